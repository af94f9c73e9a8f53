"""Run configuration: one TOML file with a section per pipeline stage.

Every key is optional; missing keys take the dataclass defaults below. Unknown
keys and wrongly typed values are rejected with the dotted field name.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbones import BackboneConfigError, preset_config, preset_depth
from .cohort import ConfigError, PhenotypeConfig, SimConfig
from .ddpm import TrainConfig
from .evaluation import ClassifierSpec


class ConfigFieldError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass
class SimulateSection:
    n_samples: int = 600
    n_genes: int = 200
    snps_per_gene_range: tuple = (5, 8)
    n_populations: int = 2
    fst: float = 0.3
    ld_strength: float = 0.6
    mode: str = "genotype"
    split: tuple = (0.7, 0.1, 0.2)
    phenotype: dict | None = None


@dataclass
class EmbedSection:
    variance_target: float = 0.95
    depth: int | None = None  # defaults to what the model preset needs
    full_rank: bool = False


@dataclass
class ModelSection:
    preset: str = "mlp-desk"


@dataclass
class TrainSection:
    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    batch_size: int = 64
    train_steps: int = 1000
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    eval_every: int = 100
    lr_min_ratio: float = 0.1
    conditional: bool = True
    loss_curve_bins: int = 10


@dataclass
class GenerateSection:
    n_samples: int = 400
    label: str | int = "balanced"
    batch_size: int = 512


@dataclass
class EvaluateSection:
    arch: str = "mlp"
    hidden: int = 64
    depth: int = 1
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-4


@dataclass
class AugmentSection:
    fractions: tuple = (0.05, 0.1, 0.2, 0.5)


@dataclass
class GradcheckSection:
    primitives: bool = True
    presets: tuple = ("mlp-toy", "cnn-toy", "transformer-toy", "combo-toy",
                      "mlp-desk", "cnn-desk", "transformer-desk", "combo-desk")
    seeds: int = 5
    max_coords: int = 3
    tolerance: float = 1e-4


@dataclass
class ReportSection:
    presets: tuple = ("mlp-toy", "cnn-toy", "transformer-toy", "combo-toy",
                      "mlp-desk", "cnn-desk", "transformer-desk", "combo-desk")


# sections each stage's outputs depend on, upstream stages included
STAGE_SECTIONS = {
    "simulate": ("simulate",),
    "embed": ("simulate", "embed", "model"),
    "train": ("simulate", "embed", "model", "train"),
    "generate": ("simulate", "embed", "model", "train", "generate"),
    "evaluate": ("simulate", "embed", "model", "train", "generate", "evaluate"),
    "augment": ("simulate", "embed", "model", "train", "generate", "evaluate", "augment"),
    "gradcheck": ("gradcheck",),
    "report": ("simulate", "embed", "model", "report"),
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    report: ReportSection = field(default_factory=ReportSection)

    # -- derived objects ----------------------------------------------------
    @property
    def seed(self) -> int:
        return self.run.seed

    def sim_config(self) -> SimConfig:
        s = self.simulate
        ph = PhenotypeConfig(**s.phenotype) if s.phenotype else None
        return SimConfig(s.n_samples, s.n_genes, tuple(s.snps_per_gene_range), s.n_populations, s.fst,
                         s.ld_strength, ph, self.seed, s.mode)

    def embed_depth(self) -> int:
        return self.embed.depth if self.embed.depth is not None else preset_depth(self.model.preset)

    def train_config(self) -> TrainConfig:
        t = asdict(self.train)
        t.pop("loss_curve_bins")
        return TrainConfig(seed=self.seed, **t)

    def classifier_spec(self) -> ClassifierSpec:
        return ClassifierSpec(seed=self.seed, **asdict(self.evaluate))

    # -- identity -------------------------------------------------------------
    def canonical(self) -> dict:
        d = json.loads(json.dumps(asdict(self)))
        d["run"].pop("out_dir")  # where results go does not change what they are
        return d

    def hash(self) -> str:
        return _digest(self.canonical())

    def stage_hash(self, stage: str) -> str:
        """Hash of the seed plus the sections a stage's outputs depend on."""
        d = self.canonical()
        return _digest({"seed": self.seed, **{k: d[k] for k in STAGE_SECTIONS[stage]}})

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigFieldError("run.seed", "must be an unsigned 64-bit integer")
        try:
            self.sim_config().validate()
        except ConfigError as exc:
            raise ConfigFieldError(f"simulate.{exc.field}", str(exc).split(": ", 1)[-1]) from exc
        split = self.simulate.split
        if len(split) != 3 or min(split) <= 0 or abs(sum(split) - 1.0) > 1e-9:
            raise ConfigFieldError("simulate.split", f"need three positive fractions summing to 1, got {list(split)}")
        if not 0.0 < self.embed.variance_target <= 1.0:
            raise ConfigFieldError("embed.variance_target", "must lie in (0, 1]")
        try:
            preset_config(self.model.preset, 2 ** 12, 2)
        except BackboneConfigError as exc:
            raise ConfigFieldError("model.preset", str(exc)) from exc
        if self.embed.depth is not None and self.embed.depth < preset_depth(self.model.preset):
            raise ConfigFieldError("embed.depth", f"preset {self.model.preset} needs depth >= "
                                                  f"{preset_depth(self.model.preset)}, got {self.embed.depth}")
        t = self.train
        positive = {"train.n_steps": t.n_steps - 1, "train.batch_size": t.batch_size, "train.train_steps": t.train_steps,
                    "train.lr": t.lr, "train.eval_every": t.eval_every, "train.loss_curve_bins": t.loss_curve_bins,
                    "generate.n_samples": self.generate.n_samples, "generate.batch_size": self.generate.batch_size,
                    "evaluate.epochs": self.evaluate.epochs, "gradcheck.seeds": self.gradcheck.seeds}
        for name, v in positive.items():
            if v <= 0:
                raise ConfigFieldError(name, "must be positive" if name != "train.n_steps" else "must be >= 2")
        if not 0.0 < t.beta_start < t.beta_end < 1.0:
            raise ConfigFieldError("train.beta_start", "need 0 < beta_start < beta_end < 1")
        lab = self.generate.label
        if isinstance(lab, str) and lab != "balanced":
            raise ConfigFieldError("generate.label", f"must be 'balanced' or a class index, got {lab!r}")
        if isinstance(lab, int) and not 0 <= lab < self.simulate.n_populations:
            raise ConfigFieldError("generate.label", f"class index outside 0..{self.simulate.n_populations - 1}")
        try:
            self.classifier_spec().validate()
        except ValueError as exc:
            raise ConfigFieldError("evaluate.arch", str(exc)) from exc
        for name in (*self.gradcheck.presets, *self.report.presets):
            try:
                preset_config(name, 2 ** 12, 2)
            except BackboneConfigError as exc:
                raise ConfigFieldError("gradcheck.presets" if name in self.gradcheck.presets else "report.presets",
                                       str(exc)) from exc
        for f in self.augment.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigFieldError("augment.fractions", f"fractions must lie in (0, 1], got {f}")


def _digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _coerce(name: str, default, value):
    """Check ``value`` against the type of the field's default and normalise lists to tuples."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigFieldError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool) and name != "generate.label":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigFieldError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFieldError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigFieldError(name, f"expected a list, got {value!r}")
        return tuple(value)
    if name == "generate.label":
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigFieldError(name, f"expected 'balanced' or a class index, got {value!r}")
        return value
    if name == "embed.depth":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigFieldError(name, f"expected an integer, got {value!r}")
        return value
    if name == "simulate.phenotype":
        if not isinstance(value, dict):
            raise ConfigFieldError(name, "expected a table")
        unknown = set(value) - {"n_causal_snps", "effect_size", "intercept"}
        if unknown:
            raise ConfigFieldError(f"{name}.{sorted(unknown)[0]}", "unknown key")
        return dict(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigFieldError(name, f"expected a string, got {value!r}")
        return value
    return value


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for section, body in data.items():
        if not hasattr(cfg, section):
            raise ConfigFieldError(section, "unknown section")
        if not isinstance(body, dict):
            raise ConfigFieldError(section, "expected a table")
        target = getattr(cfg, section)
        known = {f.name for f in fields(target)}
        for key, value in body.items():
            if key not in known:
                raise ConfigFieldError(f"{section}.{key}", "unknown key")
            setattr(target, key, _coerce(f"{section}.{key}", getattr(target, key), value))
    return cfg


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value`` with the value parsed as a TOML literal (bare words fall back to strings)."""
    if "=" not in text:
        raise ConfigFieldError(text, "override must look like section.key=value")
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    if len(path) != 2:
        raise ConfigFieldError(key, "override key must be section.key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def load_config(path=None, overrides: list[str] = (), seed: int | None = None, out: str | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigFieldError(str(path), f"invalid TOML ({exc})") from exc
    data = copy.deepcopy(data)
    for text in overrides:
        (section, key), value = parse_override(text)
        data.setdefault(section, {})[key] = value
    if seed is not None:
        data.setdefault("run", {})["seed"] = seed
    if out is not None:
        data.setdefault("run", {})["out_dir"] = str(out)
    cfg = from_dict(data)
    cfg.validate()
    return cfg
