"""Simulated genotype/haplotype cohorts, stratified splits, and the cohort text format.

Populations follow the Balding-Nichols model; within each gene, alleles along a
haplotype are coupled through a Gaussian copula with lag-1 correlation ``ld_strength``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, ndtri

GENOTYPE = "genotype"
HAPLOTYPE = "haplotype"
MIN_SNPS_PER_GENE = 5
MAX_SNPS_PER_GENE = 100


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class CohortFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)
        self.line = line
        self.column = column


class StratificationError(ValueError):
    pass


@dataclass
class GeneMap:
    """Contiguous SNP ranges; ``ends[g]`` is the exclusive end index of gene g."""

    ends: np.ndarray

    def __post_init__(self):
        self.ends = np.asarray(self.ends, dtype=np.int64)
        if self.ends.ndim != 1 or len(self.ends) == 0:
            raise ValueError("gene map needs at least one gene")
        if np.any(np.diff(np.concatenate([[0], self.ends])) <= 0):
            raise ValueError("gene ranges must be non-empty and increasing")

    @property
    def n_genes(self) -> int:
        return len(self.ends)

    @property
    def n_snps(self) -> int:
        return int(self.ends[-1])

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], self.ends[:-1]])

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(np.concatenate([[0], self.ends]))

    def snps_of_gene(self, g: int) -> range:
        return range(int(self.starts[g]), int(self.ends[g]))

    @property
    def gene_of_snp(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_genes), self.sizes)

    def __eq__(self, other):
        return isinstance(other, GeneMap) and np.array_equal(self.ends, other.ends)


@dataclass
class GenotypeMatrix:
    values: np.ndarray
    labels: np.ndarray
    label_names: list[str]
    sample_ids: list[str]
    mode: str = GENOTYPE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.mode not in (GENOTYPE, HAPLOTYPE):
            raise ValueError(f"unknown ploidy mode {self.mode!r}")
        if self.values.ndim != 2:
            raise ValueError("values must be a samples x SNPs matrix")
        if len(self.labels) != self.values.shape[0] or len(self.sample_ids) != self.values.shape[0]:
            raise ValueError("labels and sample_ids must have one entry per sample")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.label_names)):
            raise ValueError("label index out of range of label_names")
        if self.values.size and (self.values.min() < 0 or self.values.max() > self.max_value):
            raise ValueError(f"entries outside the {self.mode} alphabet 0..{self.max_value}")

    @property
    def max_value(self) -> int:
        return 2 if self.mode == GENOTYPE else 1

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_snps(self) -> int:
        return self.values.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def subset(self, idx) -> "GenotypeMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return GenotypeMatrix(self.values[idx], self.labels[idx], list(self.label_names),
                              [self.sample_ids[i] for i in idx], self.mode)

    def __eq__(self, other):
        return (isinstance(other, GenotypeMatrix) and self.mode == other.mode
                and np.array_equal(self.values, other.values) and np.array_equal(self.labels, other.labels)
                and self.label_names == other.label_names and self.sample_ids == other.sample_ids)


@dataclass
class PhenotypeConfig:
    n_causal_snps: int = 50
    effect_size: float = 0.5
    intercept: float = 0.0


@dataclass
class SimConfig:
    n_samples: int = 600
    n_genes: int = 200
    snps_per_gene_range: tuple[int, int] = (5, 20)
    n_populations: int = 2
    fst: float = 0.3
    ld_strength: float = 0.6
    phenotype: PhenotypeConfig | None = None
    seed: int = 0
    mode: str = GENOTYPE
    population_names: list[str] = field(default_factory=list)

    def validate(self) -> None:
        lo, hi = self.snps_per_gene_range
        if self.n_samples < 1:
            raise ConfigError("n_samples", "must be >= 1")
        if self.n_genes < 1:
            raise ConfigError("n_genes", "must be >= 1")
        if lo < MIN_SNPS_PER_GENE or hi > MAX_SNPS_PER_GENE or lo > hi:
            raise ConfigError("snps_per_gene_range", f"need {MIN_SNPS_PER_GENE} <= min <= max <= {MAX_SNPS_PER_GENE}, got {(lo, hi)}")
        if self.n_populations < 1:
            raise ConfigError("n_populations", "must be >= 1")
        if not 0.0 < self.fst < 1.0:
            raise ConfigError("fst", f"must lie in (0, 1), got {self.fst}")
        if not 0.0 <= self.ld_strength < 1.0:
            raise ConfigError("ld_strength", f"must lie in [0, 1), got {self.ld_strength}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if self.mode not in (GENOTYPE, HAPLOTYPE):
            raise ConfigError("mode", f"must be '{GENOTYPE}' or '{HAPLOTYPE}'")
        if self.population_names and len(self.population_names) != self.n_populations:
            raise ConfigError("population_names", "needs one name per population")
        if self.phenotype is not None:
            if self.phenotype.n_causal_snps < 1:
                raise ConfigError("phenotype.n_causal_snps", "must be >= 1")


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for a named stage (and optional integer sub-index) of a root seed."""
    key = (zlib.crc32(name.encode()),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def _copula_latent(e: np.ndarray, gene_start: np.ndarray, rho: float) -> np.ndarray:
    """Stationary AR(1) N(0,1) latents along SNPs, restarted at each gene boundary."""
    z = np.empty_like(e)
    s = np.sqrt(1.0 - rho * rho)
    z[..., 0] = e[..., 0]
    for j in range(1, e.shape[-1]):
        z[..., j] = e[..., j] if gene_start[j] else rho * z[..., j - 1] + s * e[..., j]
    return z


def simulate_cohort(cfg: SimConfig) -> tuple[GenotypeMatrix, GeneMap]:
    cfg.validate()
    seed = int(cfg.seed)
    rng = substream(seed, "simulate")
    lo, hi = cfg.snps_per_gene_range
    sizes = rng.integers(lo, hi + 1, size=cfg.n_genes)
    gmap = GeneMap(np.cumsum(sizes))
    n_snps = gmap.n_snps

    p_anc = rng.uniform(0.05, 0.95, size=n_snps)
    f = cfg.fst
    a = p_anc * (1.0 - f) / f
    b = (1.0 - p_anc) * (1.0 - f) / f
    p_pop = rng.beta(a, b, size=(cfg.n_populations, n_snps))
    thresholds = ndtri(np.clip(p_pop, 0.0, 1.0))  # allele = 1 iff latent < Phi^-1(p)

    pops = rng.permutation(np.arange(cfg.n_samples) % cfg.n_populations)
    gene_start = np.zeros(n_snps, dtype=bool)
    gene_start[gmap.starts] = True
    n_hap = 2 if cfg.mode == GENOTYPE else 1

    e = np.stack([substream(seed, "sample", i).standard_normal((n_hap, n_snps)) for i in range(cfg.n_samples)])
    z = _copula_latent(e, gene_start, cfg.ld_strength)
    haps = z < thresholds[pops][:, None, :]
    values = haps.sum(axis=1).astype(np.int8)

    if cfg.phenotype is None:
        labels = pops
        names = list(cfg.population_names) or [f"pop{k}" for k in range(cfg.n_populations)]
    else:
        ph = cfg.phenotype
        causal = rng.choice(n_snps, size=min(ph.n_causal_snps, n_snps), replace=False)
        dosage = values[:, causal] - n_hap * p_anc[causal]
        score = ph.intercept + ph.effect_size * dosage.sum(axis=1) / np.sqrt(len(causal))
        u = np.array([substream(seed, "phenotype", i).random() for i in range(cfg.n_samples)])
        labels = (u < expit(score)).astype(np.int64)
        names = ["control", "case"]
    ids = [f"S{i:05d}" for i in range(cfg.n_samples)]
    return GenotypeMatrix(values, labels, names, ids, cfg.mode), gmap


# ---------------------------------------------------------------------------
# stratified split
# ---------------------------------------------------------------------------

def _largest_remainder(total: int, fractions: np.ndarray) -> np.ndarray:
    raw = total * fractions
    out = np.floor(raw).astype(np.int64)
    short = total - out.sum()
    order = np.argsort(-(raw - out), kind="stable")
    out[order[:short]] += 1
    return out


def split_dataset(m: GenotypeMatrix, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[GenotypeMatrix, ...]:
    """Stratified partition; per-class counts are within one sample of their exact share."""
    fr = np.asarray(fractions, dtype=float)
    if np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be positive and sum to 1, got {tuple(fractions)}")
    n_splits = len(fr)
    classes, counts = np.unique(m.labels, return_counts=True)
    for c, n_c in zip(classes, counts):
        if n_c < n_splits:
            raise StratificationError(f"class {m.label_names[c]!r} has {n_c} samples, fewer than {n_splits} splits")

    targets = _largest_remainder(m.n_samples, fr)
    alloc = np.floor(np.outer(counts, fr)).astype(np.int64)
    rest = counts - alloc.sum(axis=1)
    demand = targets - alloc.sum(axis=0)
    frac = np.outer(counts, fr) - alloc
    # unit top-ups, largest remaining remainders first (row-sum = class size, col-sum = target)
    for ci in np.argsort(-rest, kind="stable"):
        for _ in range(rest[ci]):
            open_cols = [s for s in range(n_splits) if demand[s] > 0 and alloc[ci, s] == np.floor(counts[ci] * fr[s])]
            if not open_cols:
                raise StratificationError("could not balance stratified split sizes")
            s = max(open_cols, key=lambda s: (demand[s], frac[ci, s]))
            alloc[ci, s] += 1
            demand[s] -= 1

    rng = substream(seed, "split")
    parts: list[list[int]] = [[] for _ in range(n_splits)]
    for ci, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(m.labels == c))
        bounds = np.concatenate([[0], np.cumsum(alloc[ci])])
        for s in range(n_splits):
            parts[s].extend(idx[bounds[s]:bounds[s + 1]].tolist())
    return tuple(m.subset(sorted(p)) for p in parts)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def write_cohort(path, m: GenotypeMatrix, g: GeneMap, extra: dict | None = None) -> None:
    if g.n_snps != m.n_snps:
        raise ValueError(f"gene map covers {g.n_snps} SNPs but matrix has {m.n_snps}")
    head = (f"#cohort v1 mode={m.mode} samples={m.n_samples} snps={m.n_snps} "
            f"genes={g.n_genes} classes={m.n_classes}")
    for k, v in (extra or {}).items():
        head += f" {k}={v}"
    lines = [head, "#genes " + " ".join(str(int(e)) for e in g.ends), "#labels " + " ".join(m.label_names)]
    digits = (m.values + ord("0")).astype(np.uint8)
    for i in range(m.n_samples):
        lines.append(f"{m.sample_ids[i]} {int(m.labels[i])} {digits[i].tobytes().decode()}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cohort_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return _parse_header(first.rstrip("\n"))


def _parse_header(line: str) -> dict:
    if not line:
        raise CohortFormatError("missing header", line=1)
    tokens = line.split()
    if tokens[:2] != ["#cohort", "v1"]:
        raise CohortFormatError(f"bad header, expected '#cohort v1 ...', got {line[:40]!r}", line=1)
    fields = {}
    for tok in tokens[2:]:
        if "=" not in tok:
            raise CohortFormatError(f"malformed header field {tok!r}", line=1)
        k, v = tok.split("=", 1)
        fields[k] = v
    for k in ("mode", "samples", "snps", "genes", "classes"):
        if k not in fields:
            raise CohortFormatError(f"header lacks '{k}='", line=1)
    return fields


def read_cohort(path) -> tuple[GenotypeMatrix, GeneMap]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CohortFormatError("missing header", line=1)
    h = _parse_header(lines[0])
    mode = h["mode"]
    if mode not in (GENOTYPE, HAPLOTYPE):
        raise CohortFormatError(f"unknown mode {mode!r}", line=1)
    try:
        n, n_snps, n_genes, n_classes = (int(h[k]) for k in ("samples", "snps", "genes", "classes"))
    except ValueError as exc:
        raise CohortFormatError(f"non-integer header count ({exc})", line=1) from exc
    if len(lines) < 3:
        raise CohortFormatError("truncated file: missing '#genes' or '#labels' line", line=len(lines) + 1)
    gtok = lines[1].split()
    if not gtok or gtok[0] != "#genes":
        raise CohortFormatError("expected '#genes' line", line=2)
    try:
        ends = [int(t) for t in gtok[1:]]
    except ValueError as exc:
        raise CohortFormatError(f"non-integer gene end ({exc})", line=2) from exc
    if len(ends) != n_genes or (ends and ends[-1] != n_snps):
        raise CohortFormatError(f"gene ends disagree with header (genes={n_genes}, snps={n_snps})", line=2)
    ltok = lines[2].split()
    if not ltok or ltok[0] != "#labels" or len(ltok) - 1 != n_classes:
        raise CohortFormatError(f"expected '#labels' line with {n_classes} names", line=3)
    names = ltok[1:]
    body = lines[3:]
    if len(body) != n:
        raise CohortFormatError(f"truncated file: header promises {n} samples, found {len(body)}", line=3 + len(body) + 1)
    maxv = 2 if mode == GENOTYPE else 1
    values = np.empty((n, n_snps), dtype=np.int8)
    labels = np.empty(n, dtype=np.int64)
    ids = []
    for i, row in enumerate(body):
        lineno = i + 4
        parts = row.split(" ")
        if len(parts) != 3:
            raise CohortFormatError("expected '<id> <label> <digits>'", line=lineno)
        sid, lab, digits = parts
        try:
            labels[i] = int(lab)
        except ValueError:
            raise CohortFormatError(f"label {lab!r} is not an integer", line=lineno) from None
        if not 0 <= labels[i] < n_classes:
            raise CohortFormatError(f"label index {labels[i]} out of range", line=lineno)
        if len(digits) != n_snps:
            raise CohortFormatError(f"expected {n_snps} genotype digits, found {len(digits)}", line=lineno)
        arr = np.frombuffer(digits.encode(), dtype=np.uint8).astype(np.int16) - ord("0")
        bad = np.flatnonzero((arr < 0) | (arr > maxv))
        if bad.size:
            col = int(bad[0])
            raise CohortFormatError(f"value {digits[col]!r} outside the {mode} alphabet (row {i}, column {col})",
                                    line=lineno, column=col)
        values[i] = arr
        ids.append(sid)
    return GenotypeMatrix(values, labels, names, ids, mode), GeneMap(np.array(ends))
