"""Per-gene PCA embedding of genotype matrices into (genes x 8) real tensors, and back."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff.serialize import read_container, write_container
from .cohort import GENOTYPE, GeneMap, GenotypeMatrix

WIDTH = 8


class EmbeddingShapeError(ValueError):
    pass


def padded_gene_count(n_genes: int, depth: int) -> int:
    """Least multiple of 2**depth that is >= n_genes."""
    step = 2 ** depth
    return int(math.ceil(n_genes / step) * step)


@dataclass
class EmbeddingTensor:
    values: np.ndarray  # (n, G_pad, width)
    standardized: bool = True
    labels: np.ndarray | None = None
    label_names: list[str] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    def flat(self, mask: np.ndarray | None = None) -> np.ndarray:
        """Rows as vectors; restricted to mask-true positions when a mask is given."""
        if mask is None:
            return self.values.reshape(self.n_samples, -1)
        return self.values[:, mask]

    def subset(self, idx) -> "EmbeddingTensor":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return EmbeddingTensor(self.values[idx], self.standardized, labels, list(self.label_names))


@dataclass
class EmbeddingModel:
    gene_map: GeneMap
    means: list[np.ndarray]
    components: list[np.ndarray]
    eigenvalues: list[np.ndarray]
    depth: int
    mode: str = GENOTYPE
    width: int = WIDTH
    stat_mean: np.ndarray | None = None
    stat_std: np.ndarray | None = None
    degenerate_genes: list[int] = field(default_factory=list)

    @property
    def n_genes(self) -> int:
        return self.gene_map.n_genes

    @property
    def n_padded(self) -> int:
        return padded_gene_count(self.n_genes, self.depth)

    @property
    def n_components(self) -> np.ndarray:
        return np.array([w.shape[1] for w in self.components], dtype=np.int64)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_padded, self.width), dtype=bool)
        for g, k in enumerate(self.n_components):
            m[g, :k] = True
        return m

    @property
    def max_value(self) -> int:
        return 2 if self.mode == GENOTYPE else 1

    # -- encode / decode ------------------------------------------------------
    def coefficients(self, x: GenotypeMatrix) -> np.ndarray:
        if x.n_snps != self.gene_map.n_snps:
            raise EmbeddingShapeError(f"matrix has {x.n_snps} SNPs, embedding was fit on {self.gene_map.n_snps}")
        if x.mode != self.mode:
            raise EmbeddingShapeError(f"matrix is in {x.mode} mode, embedding expects {self.mode}")
        out = np.zeros((x.n_samples, self.n_padded, self.width))
        vals = x.values.astype(np.float64)
        for g, (s, e) in enumerate(zip(self.gene_map.starts, self.gene_map.ends)):
            w = self.components[g]
            out[:, g, :w.shape[1]] = (vals[:, s:e] - self.means[g]) @ w
        return out

    def encode(self, x: GenotypeMatrix, standardize: bool = True) -> EmbeddingTensor:
        c = self.coefficients(x)
        if standardize:
            c = self.standardize(c)
        return EmbeddingTensor(c, standardize, x.labels.copy(), list(x.label_names))

    def standardize(self, c: np.ndarray) -> np.ndarray:
        mask = self.mask
        return np.where(mask, (c - self.stat_mean) / self.stat_std, 0.0)

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        mask = self.mask
        return np.where(mask, z * self.stat_std + self.stat_mean, 0.0)

    def reconstruct(self, e: EmbeddingTensor) -> np.ndarray:
        """Real-valued SNP reconstruction before rounding."""
        vals = np.asarray(e.values, dtype=np.float64)
        if vals.ndim != 3 or vals.shape[1:] != (self.n_padded, self.width):
            raise EmbeddingShapeError(f"tensor shape {vals.shape[1:]} != model shape {(self.n_padded, self.width)}")
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("decode: embedding tensor contains non-finite values")
        c = self.destandardize(vals) if e.standardized else np.where(self.mask, vals, 0.0)
        out = np.empty((vals.shape[0], self.gene_map.n_snps))
        for g, (s, t) in enumerate(zip(self.gene_map.starts, self.gene_map.ends)):
            w = self.components[g]
            out[:, s:t] = self.means[g] + c[:, g, :w.shape[1]] @ w.T
        return out

    def decode(self, e: EmbeddingTensor) -> GenotypeMatrix:
        real = self.reconstruct(e)
        # nearest allowed value, halves rounded down
        vals = np.clip(np.ceil(real - 0.5), 0, self.max_value).astype(np.int8)
        n = vals.shape[0]
        labels = e.labels if e.labels is not None else np.zeros(n, dtype=np.int64)
        names = e.label_names or [f"class{k}" for k in range(int(labels.max(initial=0)) + 1)]
        return GenotypeMatrix(vals, labels, names, [f"G{i:05d}" for i in range(n)], self.mode)

    # -- persistence ----------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        manifest = {
            "gene_ends": self.gene_map.ends.tolist(),
            "k": self.n_components.tolist(),
            "depth": self.depth,
            "n_padded": self.n_padded,
            "width": self.width,
            "mode": self.mode,
            "degenerate_genes": list(self.degenerate_genes),
        }
        manifest.update(extra or {})
        arrays = []
        for g in range(self.n_genes):
            arrays += [(f"mean.{g}", self.means[g]), (f"components.{g}", self.components[g]),
                       (f"eigenvalues.{g}", self.eigenvalues[g])]
        arrays += [("stat_mean", self.stat_mean), ("stat_std", self.stat_std)]
        write_container(path, "#embed v1", manifest, arrays)

    @classmethod
    def load(cls, path) -> tuple["EmbeddingModel", dict]:
        manifest, arrays = read_container(path, "#embed v1")
        gmap = GeneMap(np.array(manifest["gene_ends"]))
        g = gmap.n_genes
        model = cls(
            gene_map=gmap,
            means=[arrays[f"mean.{i}"] for i in range(g)],
            components=[arrays[f"components.{i}"] for i in range(g)],
            eigenvalues=[arrays[f"eigenvalues.{i}"] for i in range(g)],
            depth=int(manifest["depth"]),
            mode=manifest["mode"],
            width=int(manifest["width"]),
            stat_mean=arrays["stat_mean"],
            stat_std=arrays["stat_std"],
            degenerate_genes=list(manifest.get("degenerate_genes", [])),
        )
        return model, manifest


def _gene_pca(block: np.ndarray, variance_target: float, max_k: int, full_rank: bool):
    mu = block.mean(axis=0)
    xc = block - mu
    cov = xc.T @ xc / max(len(block) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(evecs.shape[1])])
    evecs = evecs * np.where(signs == 0, 1.0, signs)
    s = block.shape[1]
    total = evals.sum()
    if total <= 0:
        w = np.zeros((s, 1))
        w[0, 0] = 1.0
        return mu, w, evals, True
    if full_rank:
        k = s
    else:
        ratio = np.cumsum(evals) / total
        k = int(np.searchsorted(ratio, variance_target - 1e-12) + 1)
    k = max(1, min(k, max_k, s))
    return mu, evecs[:, :k].copy(), evals, False


def fit_embedding(
    train: GenotypeMatrix,
    gene_map: GeneMap,
    variance_target: float = 0.95,
    depth: int = 0,
    width: int = WIDTH,
    full_rank: bool = False,
) -> EmbeddingModel:
    """Fit one PCA per gene on centred SNP columns and standardisation stats on the encoded data.

    The PC count is the smallest k whose cumulative explained variance reaches
    ``variance_target``, clamped to ``[1, min(width, s_g)]``. ``full_rank`` keeps
    every component and requires each gene to have at most ``width`` SNPs.
    """
    if train.n_samples == 0:
        raise ValueError("fit_embedding: empty training matrix")
    if gene_map.n_snps != train.n_snps:
        raise EmbeddingShapeError(f"gene map covers {gene_map.n_snps} SNPs, matrix has {train.n_snps}")
    if full_rank and gene_map.sizes.max() > width:
        raise ValueError(f"full_rank needs every gene to have <= {width} SNPs (largest has {gene_map.sizes.max()})")
    vals = train.values.astype(np.float64)
    means, comps, evs, degenerate = [], [], [], []
    for g, (s, e) in enumerate(zip(gene_map.starts, gene_map.ends)):
        mu, w, ev, flat = _gene_pca(vals[:, s:e], variance_target, width, full_rank)
        means.append(mu)
        comps.append(w)
        evs.append(ev)
        if flat:
            degenerate.append(g)
    model = EmbeddingModel(gene_map, means, comps, evs, depth, train.mode, width, degenerate_genes=degenerate)
    c = model.coefficients(train)
    mask = model.mask
    mu = np.where(mask, c.mean(axis=0), 0.0)
    sd = np.where(mask, c.std(axis=0), 1.0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    model.stat_mean, model.stat_std = mu, sd
    return model


def reconstruction_report(model: EmbeddingModel, x: GenotypeMatrix) -> dict:
    """Explained-variance fraction kept per gene and the decode(encode(x)) mismatch rate."""
    explained = []
    for ev, w in zip(model.eigenvalues, model.components):
        total = ev.sum()
        explained.append(float(ev[:w.shape[1]].sum() / total) if total > 0 else 1.0)
    back = model.decode(model.encode(x))
    mismatch = float(np.mean(back.values != x.values))
    return {
        "explained_variance": explained,
        "n_components": model.n_components.tolist(),
        "mismatch_rate": mismatch,
        "degenerate_genes": list(model.degenerate_genes),
    }


def save_tensor(path, e: EmbeddingTensor, extra: dict | None = None) -> None:
    manifest = {"standardized": e.standardized, "label_names": list(e.label_names), "shape": list(e.values.shape)}
    manifest.update(extra or {})
    arrays = [("values", np.asarray(e.values, dtype=np.float64))]
    if e.labels is not None:
        arrays.append(("labels", np.asarray(e.labels, dtype=np.int64)))
    write_container(path, "#embtensor v1", manifest, arrays)


def load_tensor(path) -> tuple[EmbeddingTensor, dict]:
    manifest, arrays = read_container(path, "#embtensor v1")
    e = EmbeddingTensor(arrays["values"], bool(manifest["standardized"]), arrays.get("labels"),
                        list(manifest.get("label_names", [])))
    return e, manifest
