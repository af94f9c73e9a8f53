"""Central finite-difference checks of autodiff gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as _T
from .tensor import NumericError, Tensor, no_grad


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    scale: float | None = None,
) -> float:
    """Largest componentwise relative error between autodiff and central differences.

    ``f`` takes the tensors in ``inputs`` and returns a scalar. The relative error
    of a component is ``|a - n| / max(|a|, |n|, floor)``. The default floor is
    1e4 times the rounding noise of the difference quotient, so gradients too small
    to resolve at step ``eps`` (exact zeros included) are compared on that scale.
    The noise estimate uses ``scale``, the magnitude of the terms summed into ``f``,
    when given; otherwise ``|f|``, which understates it when the terms cancel.
    With ``max_coords`` set, only that many random coordinates per input are perturbed.
    """
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.requires_grad = True
        x.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: f is not finite at the inputs")
    out.backward()
    if floor is None:
        mag = abs(float(out.data)) if scale is None else scale
        floor = max(1e-8, 1e4 * np.finfo(np.float64).eps * (mag + 1.0) / eps)
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for x, a in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: f is not finite near the inputs")
                num = (fp - fm) / (2.0 * eps)
                ana = a.reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst


def weighted_sum(fn, shape_out_rng):
    """Scalarise fn's output against fixed random weights so every output element matters."""
    cache = {}

    def f(*xs):
        y = fn(*xs)
        if "w" not in cache:
            cache["w"] = Tensor(shape_out_rng.standard_normal(y.shape))
        return (y * cache["w"]).sum()

    return f


def primitive_cases(rng):
    """(name, fn, inputs) triples covering every primitive."""
    r = rng.standard_normal
    idx = rng.integers(0, 5, size=(3, 2))
    return [
        ("add", lambda a, b: a + b, [r((3, 4)), r((1, 4))]),
        ("sub", lambda a, b: a - b, [r((2, 3)), r((3,))]),
        ("mul", lambda a, b: a * b, [r((3, 4)), r((3, 1))]),
        ("div", lambda a, b: a / b, [r((3, 4)), 2.0 + rng.random((3, 4))]),
        ("pow", lambda a: a ** 3, [r((5,))]),
        ("exp", lambda a: _T.exp(a), [r((2, 3))]),
        ("log", lambda a: _T.log(a), [0.5 + rng.random((2, 3))]),
        ("sqrt", lambda a: _T.sqrt(a), [0.5 + rng.random((4,))]),
        ("tanh", lambda a: _T.tanh(a), [r((3, 3))]),
        ("matmul", lambda a, b: a @ b, [r((3, 4)), r((4, 2))]),
        ("batched_matmul", lambda a, b: a @ b, [r((2, 3, 4)), r((4, 5))]),
        ("conv1d", lambda x, w, b: _T.conv1d(x, w, b, 1, 1), [r((2, 3, 7)), r((4, 3, 3)), r((4,))]),
        ("conv1d_stride2", lambda x, w, b: _T.conv1d(x, w, b, 2, 1), [r((2, 3, 8)), r((2, 3, 3)), r((2,))]),
        ("upsample", lambda x: _T.upsample_nearest1d(x, 2), [r((2, 3, 4))]),
        ("avgpool", lambda x: _T.avg_pool1d(x, 2), [r((2, 3, 6))]),
        ("softmax", lambda x: _T.softmax(x, -1), [r((3, 5))]),
        ("log_softmax", lambda x: _T.log_softmax(x, -1), [r((3, 5))]),
        ("mha", lambda q, k, v: _T.multi_head_attention(q, k, v, 2), [r((2, 3, 4)), r((2, 5, 4)), r((2, 5, 4))]),
        ("layernorm", lambda x, w, b: _T.layer_norm(x, w, b), [r((3, 6)), r((6,)), r((6,))]),
        ("groupnorm", lambda x, w, b: _T.group_norm(x, 2, w, b), [r((2, 4, 5)), r((4,)), r((4,))]),
        ("silu", lambda x: _T.silu(x), [r((4, 3))]),
        ("relu", lambda x: _T.relu(x), [np.sign(r((4, 3))) * (0.1 + rng.random((4, 3)))]),
        ("sigmoid", lambda x: _T.sigmoid(x), [r((4, 3))]),
        ("embedding", lambda tbl: _T.embedding(tbl, idx), [r((5, 3))]),
        ("concat", lambda a, b: _T.concat([a, b], axis=1), [r((2, 3)), r((2, 2))]),
        ("slice", lambda a: a[1:, ::2], [r((4, 5))]),
        ("gather", lambda a: a[np.array([0, 2, 2]), np.array([1, 0, 1])], [r((3, 2))]),
        ("sum_mean", lambda a: _T.mean(a, axis=0) * _T.sum_(a, axis=0), [r((3, 4))]),
        ("reshape_transpose", lambda a: _T.transpose(_T.reshape(a, (3, 2, 2)), (2, 0, 1)), [r((4, 3))]),
        ("pad", lambda a: _T.pad1d(a, 1, 2), [r((2, 3))]),
        ("cross_entropy", lambda a: _T.cross_entropy(a, [0, 2, 1]), [r((3, 3))]),
    ]
