import numpy as np
import pytest

from genodiff.autodiff import Tensor, grad_check, nn, no_grad
from genodiff.backbones import (
    BackboneConfigError,
    CnnUnetConfig,
    DenseBlock,
    GatedCombo,
    MlpUnetConfig,
    TransformerConfig,
    build_cnn_unet,
    build_gated_combo,
    build_mlp_unet,
    build_preset,
    build_transformer,
    count_flops,
    count_params,
    lambda_curve,
    load_model,
    preset_config,
    save_model,
)

TOY = ["mlp-toy", "cnn-toy", "transformer-toy", "combo-toy"]
DESK = ["mlp-desk", "cnn-desk", "transformer-desk", "combo-desk"]


def _inputs(rng, b, n_padded, mask=None):
    x = rng.standard_normal((b, n_padded, 8))
    if mask is not None:
        x = np.where(mask, x, 0.0)
    return x, rng.integers(1, 1001, b).astype(float), rng.integers(0, 2, b)


def _mask(n_padded, n_real, seed=0):
    rng = np.random.default_rng(seed)
    m = np.zeros((n_padded, 8), dtype=bool)
    for g in range(n_real):
        m[g, :rng.integers(1, 9)] = True
    return m


@pytest.mark.parametrize("name", TOY + DESK)
def test_output_shape_and_mask(name):
    n_padded = 16
    mask = _mask(n_padded, 13)
    model = build_preset(name, n_padded, 2, np.random.default_rng(1), mask)
    if isinstance(model, GatedCombo):
        model.gate.l2.weight.data[:] = 0.3
    for b in (1, 3):
        x, t, y = _inputs(np.random.default_rng(b), b, n_padded, mask)
        with no_grad():
            out = model(x, t, y).data
        assert out.shape == (b, n_padded, 8)
        assert np.all(out[:, ~mask] == 0.0)


@pytest.mark.parametrize("name", ["mlp-desk", "cnn-desk", "transformer-desk"])
def test_zero_initialised_output_gives_zero(name):
    model = build_preset(name, 16, 2, np.random.default_rng(0))
    x, t, y = _inputs(np.random.default_rng(0), 4, 16)
    with no_grad():
        assert np.all(model(x, t, y).data == 0.0)


def test_shape_mismatch_raises():
    model = build_preset("mlp-toy", 16, 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="expected input"):
        model(np.zeros((2, 8, 8)), 1, [0, 1])


@pytest.mark.parametrize("build,cfg", [
    (build_mlp_unet, MlpUnetConfig(n_padded=12, n_classes=2, depth=3)),
    (build_cnn_unet, CnnUnetConfig(n_padded=24, n_classes=2)),
    (build_cnn_unet, CnnUnetConfig(n_padded=32, n_classes=2, heads=3)),
    (build_transformer, TransformerConfig(n_padded=8, n_classes=2, d_model=30, heads=4)),
])
def test_inconsistent_configs_rejected(build, cfg):
    with pytest.raises(BackboneConfigError):
        build(cfg, np.random.default_rng(0))


def test_combo_rejects_shape_mismatch():
    mlp = build_preset("mlp-toy", 16, 2, np.random.default_rng(0))
    cnn = build_preset("cnn-toy", 32, 2, np.random.default_rng(0))
    with pytest.raises(BackboneConfigError):
        build_gated_combo(mlp, cnn)


# -- gradients ---------------------------------------------------------------

def _loss_fn(model, x, t, y, rng):
    w = rng.standard_normal(x.shape)

    def f(*_):
        return (model(x, t, y) * Tensor(w)).sum()

    return f


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", TOY)
def test_toy_presets_pass_gradient_check(name, seed):
    rng = np.random.default_rng(seed)
    n_padded = 8
    model = build_preset(name, n_padded, 2, rng, _mask(n_padded, 7, seed))
    x, t, y = _inputs(rng, 2, n_padded)
    xt = Tensor(x)
    f = _loss_fn(model, xt, t, y, rng)
    err = grad_check(f, [xt] + model.parameters(), max_coords=4, rng=rng)
    assert err < 1e-4


@pytest.mark.parametrize("name", DESK)
def test_desk_presets_pass_sampled_gradient_check(name):
    rng = np.random.default_rng(7)
    model = build_preset(name, 16, 2, rng)
    # desk presets zero their output layers; perturb so gradients reach every layer
    for p in model.parameters():
        if not p.data.any():
            p.data[:] = rng.normal(0, 0.1, p.shape)
    x, t, y = _inputs(rng, 2, 16)
    xt = Tensor(x)
    err = grad_check(_loss_fn(model, xt, t, y, rng), [xt] + model.parameters(), max_coords=3, rng=rng)
    assert err < 1e-4


# -- gated combination -------------------------------------------------------

@pytest.fixture
def combo():
    model = build_preset("combo-toy", 16, 2, np.random.default_rng(3))
    x, t, y = _inputs(np.random.default_rng(4), 5, 16)
    return model, x, t, y


def test_gated_identity(combo):
    model, x, t, y = combo
    with no_grad():
        out = model(x, t, y).data
        lam = model.lam(t).data.reshape(-1, 1, 1)
        expect = (1 - lam) * model.mlp(x, t, y).data + lam * model.cnn(x, t, y).data
    assert np.all((lam > 0) & (lam < 1))
    assert np.max(np.abs(out - expect)) < 1e-12


def test_forced_lambda_limits_are_bitwise(combo):
    model, x, t, y = combo
    with no_grad():
        mlp_out = model.mlp(x, t, y).data
        cnn_out = model.cnn(x, t, y).data
        model.force_lambda = 0.0
        assert np.array_equal(model(x, t, y).data, mlp_out)
        model.force_lambda = 1.0
        assert np.array_equal(model(x, t, y).data, cnn_out)


def test_lambda_curve_range_and_zero_init():
    grid = np.arange(1, 1001)
    fresh = build_preset("combo-desk", 16, 2, np.random.default_rng(0))
    assert np.all(lambda_curve(fresh, grid) == 0.5)
    toy = build_preset("combo-toy", 16, 2, np.random.default_rng(0))
    curve = lambda_curve(toy, grid)
    assert np.all((curve > 0) & (curve < 1))
    assert np.array_equal(curve, lambda_curve(toy, grid))
    with pytest.raises(TypeError):
        lambda_curve(toy.mlp, grid)


# -- structural symmetries ---------------------------------------------------

def test_cnn_translation_equivariance_without_attention():
    n = 256
    cfg = CnnUnetConfig(n_padded=n, n_classes=2, base=4, multipliers=(1, 2), attention_blocks=(), groups=2,
                        emb_dim=8, time_features=8, zero_out=False)
    model = build_cnn_unet(cfg, np.random.default_rng(0))
    x = np.zeros((1, n, 8))
    # content far from the borders: group-norm statistics are global, so border effects reach
    # the interior whenever the content's receptive field touches the zero padding
    x[0, n // 2 - 4:n // 2 + 4] = np.random.default_rng(1).standard_normal((8, 8))
    interior = slice(n // 4, 3 * n // 4)

    def gap(shift):
        with no_grad():
            a = model(x, [300.0], [1]).data
            b = model(np.roll(x, shift, axis=1), [300.0], [1]).data
        return np.max(np.abs(np.roll(a, shift, axis=1)[:, interior] - b[:, interior]))

    # two stride-2 downsamplings: exact for shifts by multiples of 4 genes, not for a single gene
    assert gap(4) < 1e-10
    assert gap(8) < 1e-10
    assert gap(1) > 1e-3


def test_transformer_is_not_permutation_equivariant():
    model = build_preset("transformer-toy", 16, 2, np.random.default_rng(0))
    x, t, y = _inputs(np.random.default_rng(1), 2, 16)
    perm = np.random.default_rng(2).permutation(16)
    with no_grad():
        a = model(x, t, y).data[:, perm]
        b = model(x[:, perm], t, y).data
    assert np.max(np.abs(a - b)) > 1e-6


def test_label_changes_output():
    model = build_preset("mlp-toy", 16, 2, np.random.default_rng(0))
    x, t, _ = _inputs(np.random.default_rng(1), 2, 16)
    with no_grad():
        assert not np.allclose(model(x, t, [0, 0]).data, model(x, t, [1, 1]).data)
        model(x, t, None)  # unconditional index is valid
    with pytest.raises(BackboneConfigError):
        model(x, t, [0, 3])


# -- accounting --------------------------------------------------------------

def test_linear_parameter_count():
    assert nn.Linear(7, 3, np.random.default_rng(0)).num_parameters() == 7 * 3 + 3


def test_dense_block_width_delta():
    # lin n_in*n + n, cond emb*n + n, norm 2n  ->  (n_in + emb + 4) * n
    small = DenseBlock(10, 4, 8, np.random.default_rng(0))
    wide = DenseBlock(10, 8, 8, np.random.default_rng(0))
    assert count_params(wide) - count_params(small) == (10 + 8 + 4) * 4


def test_mlp_toy_count_matches_hand_sum():
    model = build_preset("mlp-toy", 16, 2, np.random.default_rng(0))
    d_in = 16 * 8
    block = lambda i, o: i * o + o + 8 * o + o + 2 * o  # noqa: E731
    expected = (
        (8 * 8 + 8) * 2 + 3 * 8          # time perceptron, label table
        + block(d_in, 16) + block(16, 8) + block(8, 4) + block(4, 4)
        + block(8, 8) + block(16, 16)     # up blocks see concatenated skips
        + (32 * d_in + d_in)              # output layer
        + 2 * (8 * d_in + d_in)           # gain and shift
    )
    assert count_params(model) == expected == 9912


def test_flops_scale_with_batch():
    model = build_preset("mlp-toy", 16, 2, np.random.default_rng(0))
    one, four = count_flops(model, 1), count_flops(model, 4)
    assert one > 2 * 128 * 16
    assert four > 3 * one


def test_full_presets_describe_reference_scale():
    cnn = preset_config("cnn-full", 18432, 2)
    assert cnn.multipliers == (1, 1, 1, 1, 2, 2, 3, 4) and cnn.base == 64 and cnn.attention_blocks == (4, 5)
    tr = preset_config("transformer-full", 18432, 2)
    assert (tr.layers, tr.d_model) == (12, 384)


def test_checkpoint_round_trip(tmp_path):
    mask = _mask(16, 12)
    model = build_preset("combo-toy", 16, 2, np.random.default_rng(5), mask)
    save_model(tmp_path / "m", model, extra={"config_hash": "h"})
    loaded, manifest = load_model(tmp_path / "m")
    assert manifest["config_hash"] == "h"
    x, t, y = _inputs(np.random.default_rng(0), 3, 16, mask)
    with no_grad():
        assert np.array_equal(loaded(x, t, y).data, model(x, t, y).data)
    assert np.array_equal(loaded.mask, mask)
