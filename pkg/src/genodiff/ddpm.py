"""Linear-beta DDPM: schedule, forward noising, epsilon-prediction training, sampling.

All arrays of embeddings are (batch, genes, width); positions where the clamp
mask is false are held at exactly zero everywhere.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Adam
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .cohort import substream

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed directly by t = 0..T; entries at t = 0 are the alpha_bar(0) = 1 convention."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    log_alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.beta) - 1

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 1 or t.max() > self.n_steps):
            raise ScheduleError(f"timestep outside [1, {self.n_steps}]: {t.min()}..{t.max()}")
        return t


def linear_schedule(n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if n_steps < 2:
        raise ScheduleError(f"need at least 2 steps, got {n_steps}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, n_steps)])
    alpha = 1.0 - beta
    log_ab = np.cumsum(np.log1p(-beta))
    alpha_bar = np.cumprod(alpha)
    beta_tilde = np.zeros_like(beta)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(beta, alpha, alpha_bar, log_ab, beta_tilde)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    v = np.asarray(v)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def forward_noise(x: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar) x + sqrt(1 - abar) eps; t is a scalar or one step per batch row."""
    t = schedule.check_t(t)
    lab = _bcast(schedule.log_alpha_bar[t], np.ndim(x))
    return np.exp(0.5 * lab) * x + np.sqrt(-np.expm1(lab)) * eps


def one_shot_denoise(x_t: np.ndarray, t, eps_p: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Single-step estimate of the clean sample, inverting ``forward_noise``."""
    t = schedule.check_t(t)
    lab = _bcast(schedule.log_alpha_bar[t], np.ndim(x_t))
    return (x_t - np.sqrt(-np.expm1(lab)) * eps_p) * np.exp(-0.5 * lab)


def ancestral_step(x_t: np.ndarray, t: int, eps_p: np.ndarray, schedule: NoiseSchedule, z: np.ndarray | None) -> np.ndarray:
    a = schedule.alpha[t]
    coef = (1.0 - a) / math.sqrt(-math.expm1(schedule.log_alpha_bar[t]))
    mean = (x_t - coef * eps_p) / math.sqrt(a)
    if t == 1 or z is None:
        return mean
    return mean + math.sqrt(schedule.beta_tilde[t]) * z


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    batch_size: int = 64
    train_steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    seed: int = 0
    conditional: bool = True
    eval_every: int = 200
    lr_min_ratio: float = 0.1

    def __post_init__(self):
        if self.n_steps < 2:
            raise ScheduleError("n_steps must be >= 2")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.n_steps, self.beta_start, self.beta_end)


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over mask-true positions only."""
    m = np.broadcast_to(mask, target.shape).astype(np.float64)
    n_real = m.sum()
    diff = T.where_mask(pred - Tensor(target), m)
    return (diff * diff).sum() * (1.0 / n_real)


def undecayed_parameters(model) -> list:
    """Biases, normalisation scales and the label table are exempt from weight decay."""
    skip = ("bias", "norm", "label")
    return [p for name, p in model.named_parameters() if any(s in name for s in skip)]


def training_step(model, x: np.ndarray, y, schedule: NoiseSchedule, opt, rng: np.random.Generator,
                  mask: np.ndarray) -> float:
    b = x.shape[0]
    x = np.where(mask, x, 0.0)
    t = rng.integers(1, schedule.n_steps + 1, size=b)
    eps = rng.standard_normal(x.shape) * mask
    x_t = forward_noise(x, t, eps, schedule)
    opt.zero_grad()
    loss = masked_mse(model(x_t, t, y), eps, mask)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} (t range {t.min()}..{t.max()})")
    loss.backward()
    opt.step()
    return value


def evaluate_loss(model, x: np.ndarray, y, schedule: NoiseSchedule, mask: np.ndarray, seed: int,
                  batch_size: int = 256) -> tuple[float, float]:
    """Validation loss and mean one-shot reconstruction error ||x_p - x|| with fixed noise draws."""
    rng = substream(seed, "validation")
    n = x.shape[0]
    t = rng.integers(1, schedule.n_steps + 1, size=n)
    eps = rng.standard_normal(x.shape) * mask
    sq, rec = 0.0, 0.0
    with T.no_grad():
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            x_t = forward_noise(x[sl], t[sl], eps[sl], schedule)
            yb = None if y is None else y[sl]
            eps_p = model(x_t, t[sl], yb).data
            sq += float((((eps_p - eps[sl]) * mask) ** 2).sum())
            x_p = one_shot_denoise(x_t, t[sl], eps_p, schedule) * mask
            rec += float(np.sqrt(((x_p - x[sl]) ** 2).reshape(x_p.shape[0], -1).sum(axis=1)).sum())
    return float(sq / (n * mask.sum())), float(rec / n)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    skipped_steps: int = 0

    @property
    def final_val_loss(self) -> float:
        vals = [h["val_loss"] for h in self.history if h.get("val_loss") is not None]
        return vals[-1] if vals else float("nan")


def train(model, x: np.ndarray, y, cfg: TrainConfig, mask: np.ndarray, x_val: np.ndarray | None = None,
          y_val=None, on_eval: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on the masked epsilon-prediction loss with cosine learning-rate decay."""
    schedule = cfg.schedule()
    rng = substream(cfg.seed, "train")
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
               no_decay=undecayed_parameters(model))
    y = None if (y is None or not cfg.conditional) else np.asarray(y)
    if y_val is not None and not cfg.conditional:
        y_val = None
    n = x.shape[0]
    bs = min(cfg.batch_size, n)
    result = TrainResult()
    order = rng.permutation(n)
    pos = 0
    running = []
    for step in range(1, cfg.train_steps + 1):
        frac = (step - 1) / max(cfg.train_steps - 1, 1)
        opt.lr = cfg.lr * (cfg.lr_min_ratio + (1 - cfg.lr_min_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        loss = training_step(model, x[idx], None if y is None else y[idx], schedule, opt, rng, mask)
        running.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.train_steps:
            row = {"step": step, "train_loss": float(np.mean(running)), "val_loss": None,
                   "val_reconstruction_error": None}
            running = []
            if x_val is not None and len(x_val):
                row["val_loss"], row["val_reconstruction_error"] = evaluate_loss(
                    model, x_val, None if y_val is None else np.asarray(y_val), schedule, mask, cfg.seed)
            result.history.append(row)
            log.info("step %d train %.4f val %s", step, row["train_loss"], row["val_loss"])
            if on_eval:
                on_eval(row)
    result.skipped_steps = opt.skipped_steps
    return result


def write_metrics_csv(path, history: list[dict], header_comment: str | None = None) -> None:
    cols = ["step", "train_loss", "val_loss", "val_reconstruction_error"]
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow(["" if row.get(c) is None else (repr(float(row[c])) if c != "step" else row[c]) for c in cols])


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class SampleRequest:
    n_samples: int
    label: int | list[int] | None = None
    seed: int = 0
    n_classes: int | None = None

    def labels(self) -> np.ndarray | None:
        if self.label is None:
            return None
        lab = np.asarray(self.label, dtype=np.int64).reshape(-1)
        if lab.size == 1:
            lab = np.full(self.n_samples, lab[0])
        if lab.size != self.n_samples:
            raise ValueError(f"{lab.size} labels for {self.n_samples} samples")
        return lab


def sample(model, schedule: NoiseSchedule, req: SampleRequest, mask: np.ndarray, batch_size: int = 512,
           on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Full T-step ancestral sampling; chain i draws all of its noise from stream ("chain", i) of the seed."""
    n_classes = getattr(model, "n_classes", None)
    if req.n_classes is not None and n_classes is not None and req.n_classes != n_classes:
        raise SamplingError(f"request expects {req.n_classes} classes, model was trained with {n_classes}")
    y_all = req.labels()
    if y_all is not None and n_classes is not None and (y_all.min() < 0 or y_all.max() >= n_classes):
        raise SamplingError(f"label outside 0..{n_classes - 1}")
    shape = mask.shape
    out = np.empty((req.n_samples,) + shape)
    for s in range(0, req.n_samples, batch_size):
        chains = range(s, min(s + batch_size, req.n_samples))
        gens = [substream(req.seed, "chain", i) for i in chains]
        x = np.stack([g.standard_normal(shape) for g in gens]) * mask
        y = None if y_all is None else y_all[s:s + len(gens)]
        for t in range(schedule.n_steps, 0, -1):
            with T.no_grad():
                eps_p = model(x, np.full(len(gens), t), y)
            eps_p = (eps_p.data if isinstance(eps_p, Tensor) else np.asarray(eps_p)) * mask
            z = np.stack([g.standard_normal(shape) for g in gens]) if t > 1 else None
            x = ancestral_step(x, t, eps_p, schedule, z) * mask
            if not np.all(np.isfinite(x)):
                raise SamplingError(f"non-finite sampler state at step t={t}")
            if on_step:
                on_step(t, x)
        out[s:s + len(gens)] = x
    return out


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def time_bins(n_steps: int, n_bins: int) -> list[tuple[int, int]]:
    """Contiguous half-open [lo, hi) bins partitioning 1..n_steps."""
    edges = np.unique(np.round(np.linspace(1, n_steps + 1, n_bins + 1)).astype(int))
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def loss_vs_noise_report(model, x: np.ndarray, y, schedule: NoiseSchedule, mask: np.ndarray, n_bins: int = 10,
                         seed: int = 0) -> list[dict]:
    """Mean one-shot reconstruction error ||x_p - x|| per timestep bin over a validation set."""
    if x.shape[0] == 0:
        raise ValueError("loss_vs_noise_report: empty validation set")
    rng = substream(seed, "loss_vs_noise")
    rows = []
    for lo, hi in time_bins(schedule.n_steps, n_bins):
        t = rng.integers(lo, hi, size=x.shape[0])
        eps = rng.standard_normal(x.shape) * mask
        x_t = forward_noise(x, t, eps, schedule)
        with T.no_grad():
            out = model(x_t, t, y)
        eps_p = (out.data if isinstance(out, Tensor) else np.asarray(out)) * mask
        x_p = one_shot_denoise(x_t, t, eps_p, schedule) * mask
        err = np.sqrt(((x_p - x) ** 2).reshape(x.shape[0], -1).sum(axis=1))
        rows.append({"t_lo": lo, "t_hi": hi - 1, "mean_error": float(err.mean()), "n": int(x.shape[0])})
    return rows


def write_curve_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_lo", "t_hi", "mean_error", "n"])
        for r in rows:
            w.writerow([r["t_lo"], r["t_hi"], repr(r["mean_error"]), r["n"]])
