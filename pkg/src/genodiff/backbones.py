"""Noise predictors E(x_t, t, y) -> eps over (batch, genes, 8) embeddings.

Four variants: a dense U-Net, a 1-D convolutional U-Net with attention at
chosen depths, a transformer encoder with conditioning tokens, and a gated
convex combination of the dense and convolutional U-Nets.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.serialize import load_params, save_params
from .autodiff.tensor import Tensor


class BackboneConfigError(ValueError):
    pass


@dataclass
class MlpUnetConfig:
    n_padded: int
    n_classes: int
    width: int = 8
    hidden: int = 256
    depth: int = 2
    emb_dim: int = 64
    time_features: int = 32
    n_steps: int = 1000
    zero_out: bool = True


@dataclass
class CnnUnetConfig:
    n_padded: int
    n_classes: int
    width: int = 8
    base: int = 16
    multipliers: tuple = (1, 1, 2, 2)
    attention_blocks: tuple = (2, 3)
    heads: int = 4
    groups: int = 4
    emb_dim: int = 64
    time_features: int = 32
    n_steps: int = 1000
    zero_out: bool = True


@dataclass
class TransformerConfig:
    n_padded: int
    n_classes: int
    width: int = 8
    d_model: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    time_features: int = 32
    n_steps: int = 1000
    zero_out: bool = True


@dataclass
class GateConfig:
    hidden: int = 16
    n_steps: int = 1000
    zero_out: bool = True


@dataclass
class ComboConfig:
    mlp: MlpUnetConfig
    cnn: CnnUnetConfig
    gate: GateConfig = field(default_factory=GateConfig)

    @property
    def n_padded(self):
        return self.mlp.n_padded

    @property
    def width(self):
        return self.mlp.width

    @property
    def n_classes(self):
        return self.mlp.n_classes


def _as_tensor_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _labels(y, batch: int, n_classes: int) -> np.ndarray:
    """Class indices; ``None`` maps every sample to the extra unconditional index."""
    if y is None:
        return np.full(batch, n_classes, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != batch:
        raise BackboneConfigError(f"got {y.shape[0]} labels for a batch of {batch}")
    if y.size and (y.min() < 0 or y.max() > n_classes):
        raise BackboneConfigError(f"label index out of range for {n_classes} classes")
    return y


def _steps(t, batch: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size == 1 and batch > 1:
        t = np.full(batch, t[0])
    return t


class Conditioning(nn.Module):
    """Sinusoidal time features through a 2-layer perceptron plus a learned label embedding."""

    def __init__(self, n_classes, emb_dim, time_features, n_steps, rng):
        self.n_classes = n_classes
        self.time_features = time_features
        self.n_steps = n_steps
        self.t1 = nn.Linear(time_features, emb_dim, rng)
        self.t2 = nn.Linear(emb_dim, emb_dim, rng)
        self.label = nn.Embedding(n_classes + 1, emb_dim, rng)

    def time(self, t) -> Tensor:
        feats = nn.sinusoidal_features(np.asarray(t) / self.n_steps, self.time_features)
        return self.t2(T.silu(self.t1(Tensor(feats))))

    def forward(self, t, y):
        return self.time(t) + self.label(y)


class NoisePredictor(nn.Module):
    variant = ""

    def __init__(self, cfg, mask):
        self.cfg = cfg
        shape = (cfg.n_padded, cfg.width)
        self.mask = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if self.mask.shape != shape:
            raise BackboneConfigError(f"mask shape {self.mask.shape} != input shape {shape}")

    @property
    def input_shape(self) -> tuple:
        return (self.cfg.n_padded, self.cfg.width)

    @property
    def n_classes(self) -> int:
        return self.cfg.n_classes

    def _check(self, x: Tensor):
        if x.ndim != 3 or x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"{self.variant}: expected input (batch, {self.input_shape[0]}, {self.input_shape[1]}), got {x.shape}")

    def forward(self, x, t, y=None) -> Tensor:
        x = _as_tensor_input(x)
        self._check(x)
        b = x.shape[0]
        out = self._predict(x, _steps(t, b), _labels(y, b, self.n_classes))
        return T.where_mask(out, self.mask)

    def _predict(self, x, t, y) -> Tensor:
        raise NotImplementedError

    def manifest(self) -> dict:
        return {"variant": self.variant, "config": _cfg_dict(self.cfg)}


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d))


# ---------------------------------------------------------------------------
# dense U-Net
# ---------------------------------------------------------------------------

class DenseBlock(nn.Module):
    def __init__(self, n_in, n_out, emb_dim, rng):
        self.lin = nn.Linear(n_in, n_out, rng)
        self.cond = nn.Linear(emb_dim, n_out, rng)
        self.norm = nn.LayerNorm(n_out)

    def forward(self, x, c):
        return T.silu(self.norm(self.lin(x) + self.cond(c)))


class MlpUnet(NoisePredictor):
    variant = "MlpUnet"

    def __init__(self, cfg: MlpUnetConfig, rng, mask=None):
        super().__init__(cfg, mask)
        if cfg.depth < 1:
            raise BackboneConfigError("MlpUnet depth must be >= 1")
        if cfg.n_padded % (2 ** cfg.depth):
            raise BackboneConfigError(f"MlpUnet depth {cfg.depth} needs padded gene count divisible by {2 ** cfg.depth}, got {cfg.n_padded}")
        widths = [cfg.hidden // 2 ** i for i in range(cfg.depth + 1)]
        if widths[-1] < 1:
            raise BackboneConfigError(f"hidden width {cfg.hidden} too small for depth {cfg.depth}")
        d_in = cfg.n_padded * cfg.width
        self.widths = widths
        self.cond = Conditioning(cfg.n_classes, cfg.emb_dim, cfg.time_features, cfg.n_steps, rng)
        self.inp = DenseBlock(d_in, widths[0], cfg.emb_dim, rng)
        self.down = [DenseBlock(widths[i], widths[i + 1], cfg.emb_dim, rng) for i in range(cfg.depth)]
        self.mid = DenseBlock(widths[-1], widths[-1], cfg.emb_dim, rng)
        self.up = [DenseBlock(2 * widths[i + 1], widths[i], cfg.emb_dim, rng) for i in reversed(range(cfg.depth))]
        self.out = nn.Linear(2 * widths[0], d_in, rng, zero=cfg.zero_out)
        # per-position affine map of the raw input conditioned on (t, y); without it the output is
        # rank-limited by the hidden width
        self.gain = nn.Linear(cfg.emb_dim, d_in, rng, zero=cfg.zero_out)
        self.shift = nn.Linear(cfg.emb_dim, d_in, rng, zero=cfg.zero_out)

    def _predict(self, x, t, y):
        b = x.shape[0]
        c = self.cond(t, y)
        x_flat = T.reshape(x, (b, -1))
        h = self.inp(x_flat, c)
        skips = [h]
        for blk in self.down:
            h = blk(h, c)
            skips.append(h)
        h = self.mid(h, c)
        for blk in self.up:
            h = blk(T.concat([h, skips.pop()], axis=1), c)
        a = T.silu(c)
        h = self.out(T.concat([h, skips.pop()], axis=1)) + self.gain(a) * x_flat + self.shift(a)
        return T.reshape(h, (b,) + self.input_shape)


# ---------------------------------------------------------------------------
# convolutional U-Net
# ---------------------------------------------------------------------------

def _groups(channels, groups):
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim, groups, rng):
        self.norm1 = nn.GroupNorm(_groups(c_in, groups), c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, rng)
        self.cond = nn.Linear(emb_dim, c_out, rng)
        self.norm2 = nn.GroupNorm(_groups(c_out, groups), c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, rng)
        self.skip = nn.Conv1d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x, c):
        h = self.conv1(T.silu(self.norm1(x)))
        e = self.cond(c)
        h = h + T.reshape(e, e.shape + (1,))
        h = self.conv2(T.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


class AttnBlock(nn.Module):
    """Self-attention across sequence positions with a residual connection."""

    def __init__(self, channels, heads, groups, rng):
        self.norm = nn.GroupNorm(_groups(channels, groups), channels)
        self.attn = nn.MultiHeadAttention(channels, heads, rng)

    def forward(self, x):
        h = T.transpose(self.norm(x), (0, 2, 1))
        return x + T.transpose(self.attn(h), (0, 2, 1))


class CnnUnet(NoisePredictor):
    variant = "CnnUnet"

    def __init__(self, cfg: CnnUnetConfig, rng, mask=None):
        super().__init__(cfg, mask)
        n_down = len(cfg.multipliers)
        if cfg.n_padded % (2 ** n_down):
            raise BackboneConfigError(f"CnnUnet with {n_down} down blocks needs length divisible by {2 ** n_down}, got {cfg.n_padded}")
        chs = [cfg.base * m for m in cfg.multipliers]
        for i in cfg.attention_blocks:
            if not 0 <= i < n_down:
                raise BackboneConfigError(f"attention block index {i} outside 0..{n_down - 1}")
            if chs[i] % cfg.heads:
                raise BackboneConfigError(f"{cfg.heads} heads do not divide {chs[i]} channels at block {i}")
        e = cfg.emb_dim
        self.chs = chs
        self.cond = Conditioning(cfg.n_classes, e, cfg.time_features, cfg.n_steps, rng)
        self.conv_in = nn.Conv1d(cfg.width, cfg.base, 3, rng)
        prev = cfg.base
        self.down_res, self.down_attn, self.downsample = [], [], []
        for i, ch in enumerate(chs):
            self.down_res.append(ResBlock(prev, ch, e, cfg.groups, rng))
            self.down_attn.append(AttnBlock(ch, cfg.heads, cfg.groups, rng) if i in cfg.attention_blocks else None)
            self.downsample.append(nn.Conv1d(ch, ch, 3, rng, stride=2, padding=1))
            prev = ch
        self.mid = ResBlock(prev, prev, e, cfg.groups, rng)
        self.up_conv, self.up_res, self.up_attn = [], [], []
        for i in reversed(range(n_down)):
            self.up_conv.append(nn.Conv1d(prev, prev, 3, rng))
            self.up_res.append(ResBlock(prev + chs[i], chs[i], e, cfg.groups, rng))
            self.up_attn.append(AttnBlock(chs[i], cfg.heads, cfg.groups, rng) if i in cfg.attention_blocks else None)
            prev = chs[i]
        self.norm_out = nn.GroupNorm(_groups(prev, cfg.groups), prev)
        self.conv_out = nn.Conv1d(prev, cfg.width, 3, rng, zero=cfg.zero_out)

    def _predict(self, x, t, y):
        c = self.cond(t, y)
        h = self.conv_in(T.transpose(x, (0, 2, 1)))
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsample):
            h = res(h, c)
            if attn is not None:
                h = attn(h)
            skips.append(h)
            h = down(h)
        h = self.mid(h, c)
        for conv, res, attn in zip(self.up_conv, self.up_res, self.up_attn):
            h = conv(T.upsample_nearest1d(h, 2))
            h = res(T.concat([h, skips.pop()], axis=1), c)
            if attn is not None:
                h = attn(h)
        h = self.conv_out(T.silu(self.norm_out(h)))
        return T.transpose(h, (0, 2, 1))


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------

class EncoderLayer(nn.Module):
    def __init__(self, d, heads, mlp_ratio, rng):
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiHeadAttention(d, heads, rng)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp_ratio * d, rng)
        self.fc2 = nn.Linear(mlp_ratio * d, d, rng)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(T.silu(self.fc1(self.ln2(x))))


class TransformerPredictor(NoisePredictor):
    """One token per gene (its 8-vector), per-position input/output projections, two conditioning tokens."""

    variant = "Transformer"

    def __init__(self, cfg: TransformerConfig, rng, mask=None):
        super().__init__(cfg, mask)
        if cfg.d_model % cfg.heads:
            raise BackboneConfigError(f"{cfg.heads} heads do not divide feature size {cfg.d_model}")
        d = cfg.d_model
        self.proj_in = nn.PositionwiseLinear(cfg.n_padded, cfg.width, d, rng)
        self.pos = nn.Parameter(rng.normal(0.0, 0.02, size=(cfg.n_padded, d)))
        self.t1 = nn.Linear(cfg.time_features, d, rng)
        self.t2 = nn.Linear(d, d, rng)
        self.label = nn.Embedding(cfg.n_classes + 1, d, rng)
        self.layers = [EncoderLayer(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.layers)]
        self.ln_out = nn.LayerNorm(d)
        self.proj_out = nn.PositionwiseLinear(cfg.n_padded, d, cfg.width, rng, zero=cfg.zero_out)

    def _predict(self, x, t, y):
        b = x.shape[0]
        d = self.cfg.d_model
        feats = nn.sinusoidal_features(t / self.cfg.n_steps, self.cfg.time_features)
        t_tok = T.reshape(self.t2(T.silu(self.t1(Tensor(feats)))), (b, 1, d))
        y_tok = T.reshape(self.label(y), (b, 1, d))
        h = self.proj_in(x) + self.pos
        h = T.concat([t_tok, y_tok, h], axis=1)
        for layer in self.layers:
            h = layer(h)
        h = self.ln_out(h)[:, 2:, :]
        return self.proj_out(h)


# ---------------------------------------------------------------------------
# gated combination
# ---------------------------------------------------------------------------

class GateNet(nn.Module):
    """lambda(t) = sigmoid(W2 silu(W1 (t/T) + b1) + b2)."""

    def __init__(self, cfg: GateConfig, rng):
        self.cfg = cfg
        self.l1 = nn.Linear(1, cfg.hidden, rng)
        self.l2 = nn.Linear(cfg.hidden, 1, rng, zero=cfg.zero_out)

    def forward(self, t) -> Tensor:
        s = Tensor(np.asarray(t, dtype=np.float64).reshape(-1, 1) / self.cfg.n_steps)
        return T.sigmoid(self.l2(T.silu(self.l1(s))))


class GatedCombo(NoisePredictor):
    variant = "GatedCombo"

    def __init__(self, mlp: MlpUnet, cnn: CnnUnet, gate: GateNet, mask=None):
        if mlp.input_shape != cnn.input_shape:
            raise BackboneConfigError(f"sub-model input shapes differ: {mlp.input_shape} vs {cnn.input_shape}")
        if mlp.n_classes != cnn.n_classes:
            raise BackboneConfigError("sub-models disagree on the number of classes")
        super().__init__(ComboConfig(mlp.cfg, cnn.cfg, gate.cfg), mask if mask is not None else mlp.mask)
        self.mlp = mlp
        self.cnn = cnn
        self.gate = gate
        self.force_lambda: float | None = None

    @property
    def input_shape(self):
        return self.mlp.input_shape

    @property
    def n_classes(self):
        return self.mlp.n_classes

    def lam(self, t) -> Tensor:
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if self.force_lambda is not None:
            return Tensor(np.full((t.size, 1), float(self.force_lambda)))
        return self.gate(t)

    def _predict(self, x, t, y):
        b = x.shape[0]
        lam = T.reshape(self.lam(t), (b, 1, 1))
        return (1.0 - lam) * self.mlp(x, t, y) + lam * self.cnn(x, t, y)


def lambda_curve(model, t_grid) -> np.ndarray:
    if not isinstance(model, GatedCombo):
        raise TypeError(f"lambda_curve needs a GatedCombo model, got {type(model).__name__}")
    with T.no_grad():
        return model.lam(np.asarray(t_grid)).data.reshape(-1).copy()


# ---------------------------------------------------------------------------
# builders, presets, accounting, checkpoints
# ---------------------------------------------------------------------------

def build_mlp_unet(cfg: MlpUnetConfig, rng, mask=None) -> MlpUnet:
    return MlpUnet(cfg, rng, mask)


def build_cnn_unet(cfg: CnnUnetConfig, rng, mask=None) -> CnnUnet:
    return CnnUnet(cfg, rng, mask)


def build_transformer(cfg: TransformerConfig, rng, mask=None) -> TransformerPredictor:
    return TransformerPredictor(cfg, rng, mask)


def build_gated_combo(mlp: MlpUnet, cnn: CnnUnet, gate: GateNet | None = None, rng=None) -> GatedCombo:
    if gate is None:
        gate = GateNet(GateConfig(n_steps=mlp.cfg.n_steps), rng if rng is not None else np.random.default_rng(0))
    return GatedCombo(mlp, cnn, gate)


def preset_config(name: str, n_padded: int, n_classes: int, n_steps: int = 1000):
    """Named architecture presets.

    ``*-toy`` and ``*-desk`` run on a laptop core; ``*-full`` describe the large reference
    architectures and are only practical to build, not to train, on numpy.
    """
    base = dict(n_padded=n_padded, n_classes=n_classes, n_steps=n_steps)
    presets = {
        "mlp-desk": lambda: MlpUnetConfig(**base, hidden=8, depth=1),
        "mlp-toy": lambda: MlpUnetConfig(**base, hidden=16, depth=2, emb_dim=8, time_features=8, zero_out=False),
        "mlp-full": lambda: MlpUnetConfig(**base, hidden=2048, depth=3, emb_dim=512, time_features=128),
        "cnn-desk": lambda: CnnUnetConfig(**base),
        "cnn-toy": lambda: CnnUnetConfig(**base, base=4, multipliers=(1, 2), attention_blocks=(1,), heads=2,
                                         groups=2, emb_dim=8, time_features=8, zero_out=False),
        "cnn-full": lambda: CnnUnetConfig(**base, base=64, multipliers=(1, 1, 1, 1, 2, 2, 3, 4),
                                           attention_blocks=(4, 5), heads=8, groups=32, emb_dim=256,
                                           time_features=128),
        "transformer-desk": lambda: TransformerConfig(**base),
        "transformer-toy": lambda: TransformerConfig(**base, d_model=8, layers=1, heads=2, time_features=8,
                                                     zero_out=False),
        "transformer-full": lambda: TransformerConfig(**base, d_model=384, layers=12, heads=6, mlp_ratio=4,
                                                       time_features=128),
    }
    if name.startswith("combo-"):
        scale = name.split("-", 1)[1]
        gate = GateConfig(n_steps=n_steps, zero_out=scale != "toy")
        return ComboConfig(preset_config(f"mlp-{scale}", n_padded, n_classes, n_steps),
                           preset_config(f"cnn-{scale}", n_padded, n_classes, n_steps), gate)
    if name not in presets:
        raise BackboneConfigError(f"unknown preset {name!r}; known: {sorted(presets) + ['combo-desk', 'combo-toy', 'combo-full']}")
    return presets[name]()


def preset_depth(name: str) -> int:
    """Down-sampling depth a preset needs from the embedding padding."""
    cfg = preset_config(name, 2 ** 12, 2)
    return _config_depth(cfg)


def _config_depth(cfg) -> int:
    if isinstance(cfg, MlpUnetConfig):
        return cfg.depth
    if isinstance(cfg, CnnUnetConfig):
        return len(cfg.multipliers)
    if isinstance(cfg, ComboConfig):
        return max(cfg.mlp.depth, len(cfg.cnn.multipliers))
    return 0


def build_from_config(cfg, rng, mask=None) -> NoisePredictor:
    if isinstance(cfg, MlpUnetConfig):
        return MlpUnet(cfg, rng, mask)
    if isinstance(cfg, CnnUnetConfig):
        return CnnUnet(cfg, rng, mask)
    if isinstance(cfg, TransformerConfig):
        return TransformerPredictor(cfg, rng, mask)
    if isinstance(cfg, ComboConfig):
        mlp = MlpUnet(cfg.mlp, rng, mask)
        cnn = CnnUnet(cfg.cnn, rng, mask)
        return GatedCombo(mlp, cnn, GateNet(cfg.gate, rng), mask)
    raise BackboneConfigError(f"not a backbone config: {type(cfg).__name__}")


def build_preset(name: str, n_padded: int, n_classes: int, rng, mask=None, n_steps: int = 1000) -> NoisePredictor:
    return build_from_config(preset_config(name, n_padded, n_classes, n_steps), rng, mask)


def count_params(model: nn.Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def count_flops(model: NoisePredictor, batch: int = 1) -> int:
    """Forward-pass flops from per-primitive formulas (matmul 2mnk, conv 2*B*Cout*L*Cin*K, elementwise 1-6/elt)."""
    x = np.zeros((batch,) + model.input_shape)
    with T.no_grad(), T.count_flops() as counter:
        model(x, np.ones(batch), np.zeros(batch, dtype=np.int64))
    return counter.total


def _config_from_manifest(variant: str, cfg: dict):
    def tup(d, *keys):
        d = dict(d)
        for k in keys:
            d[k] = tuple(d[k])
        return d

    if variant == "MlpUnet":
        return MlpUnetConfig(**cfg)
    if variant == "CnnUnet":
        return CnnUnetConfig(**tup(cfg, "multipliers", "attention_blocks"))
    if variant == "Transformer":
        return TransformerConfig(**cfg)
    if variant == "GatedCombo":
        return ComboConfig(MlpUnetConfig(**cfg["mlp"]), CnnUnetConfig(**tup(cfg["cnn"], "multipliers", "attention_blocks")),
                           GateConfig(**cfg["gate"]))
    raise BackboneConfigError(f"unknown variant {variant!r}")


def save_model(prefix, model: NoisePredictor, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.params`` (parameter container) and ``<prefix>.json`` (architecture manifest)."""
    prefix = Path(prefix)
    manifest = model.manifest()
    manifest["mask"] = model.mask.astype(int).tolist()
    manifest.update(extra or {})
    params_path = prefix.with_suffix(".params")
    json_path = prefix.with_suffix(".json")
    save_params(params_path, model.state_dict(), {k: v for k, v in manifest.items() if k != "mask"})
    json_path.write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return params_path, json_path


def load_model(prefix) -> tuple[NoisePredictor, dict]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    cfg = _config_from_manifest(manifest["variant"], manifest["config"])
    model = build_from_config(cfg, np.random.default_rng(0), np.array(manifest["mask"], dtype=bool))
    state, _ = load_params(prefix.with_suffix(".params"))
    model.load_state_dict(state)
    return model, manifest
