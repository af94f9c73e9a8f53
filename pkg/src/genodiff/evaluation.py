"""Downstream classifiers, recovery rate, nearest-neighbour adversarial accuracy, distance audits."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .autodiff import Adam, nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .cohort import GenotypeMatrix, StratificationError, substream
from .embed import EmbeddingTensor

MAX_CLASSIFIER_PARAMS = 2_000_000


class EvaluationError(ValueError):
    pass


def as_samples(data) -> np.ndarray:
    """Sample array from an EmbeddingTensor, GenotypeMatrix or plain ndarray, float64, samples first."""
    if isinstance(data, EmbeddingTensor):
        return np.asarray(data.values, dtype=np.float64)
    if isinstance(data, GenotypeMatrix):
        return data.values.astype(np.float64)
    return np.asarray(data, dtype=np.float64)


def flat(data, mask: np.ndarray | None = None) -> np.ndarray:
    x = as_samples(data)
    if mask is not None and x.ndim == 3:
        return x[:, mask]
    return x.reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------

@dataclass
class ClassifierSpec:
    arch: str = "mlp"  # mlp | cnn1d | transformer
    hidden: int = 64
    depth: int = 1
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.arch not in ("mlp", "cnn1d", "transformer"):
            raise EvaluationError(f"unknown classifier arch {self.arch!r}")
        if self.hidden < 1 or self.depth < 1 or self.epochs < 1:
            raise EvaluationError("classifier hidden, depth and epochs must be positive")


class _Mlp(nn.Module):
    def __init__(self, d_in, n_classes, spec, rng):
        dims = [d_in] + [spec.hidden] * spec.depth
        self.layers = [nn.Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.head = nn.Linear(dims[-1], n_classes, rng)

    def forward(self, x):
        h = T.reshape(x, (x.shape[0], -1))
        for lin in self.layers:
            h = T.relu(lin(h))
        return self.head(h)


class _Cnn(nn.Module):
    def __init__(self, shape, n_classes, spec, rng):
        length, channels = shape
        self.convs = []
        c = channels
        for _ in range(spec.depth):
            self.convs.append(nn.Conv1d(c, spec.hidden, 5, rng, stride=2))
            c = spec.hidden
        self.head = nn.Linear(c, n_classes, rng)

    def forward(self, x):
        h = T.transpose(x, (0, 2, 1))
        for conv in self.convs:
            h = T.relu(conv(h))
        return self.head(T.mean(h, axis=2))


class _Transformer(nn.Module):
    def __init__(self, shape, n_classes, spec, rng):
        length, channels = shape
        self.inp = nn.Linear(channels, spec.hidden, rng)
        self.pos = nn.Parameter(0.02 * rng.standard_normal((length, spec.hidden)))
        self.attn = [nn.MultiHeadAttention(spec.hidden, 2 if spec.hidden % 2 == 0 else 1, rng)
                     for _ in range(spec.depth)]
        self.norms = [nn.LayerNorm(spec.hidden) for _ in range(spec.depth)]
        self.head = nn.Linear(spec.hidden, n_classes, rng)

    def forward(self, x):
        h = self.inp(x) + self.pos
        for attn, norm in zip(self.attn, self.norms):
            h = h + attn(norm(h))
        return self.head(T.mean(h, axis=1))


def _structured(x: np.ndarray) -> np.ndarray:
    """(n, length, channels) view for sequence classifiers; raw SNP rows get one channel."""
    return x if x.ndim == 3 else x.reshape(x.shape[0], -1, 1)


@dataclass
class Classifier:
    spec: ClassifierSpec
    net: nn.Module
    mean: np.ndarray
    std: np.ndarray
    n_classes: int

    def _prep(self, x) -> np.ndarray:
        x = as_samples(x)
        if self.spec.arch != "mlp":
            x = _structured(x)
        return (x - self.mean) / self.std

    def logits(self, x, batch: int = 512) -> np.ndarray:
        z = self._prep(x)
        with T.no_grad():
            return np.concatenate([self.net(Tensor(z[s:s + batch])).data for s in range(0, len(z), batch)])

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def train_classifier(x, y, spec: ClassifierSpec | None = None, x_val=None, y_val=None,
                     n_classes: int | None = None) -> tuple[Classifier, float | None]:
    """Fit a softmax classifier with Adam; returns the model and held-out accuracy when a split is given."""
    spec = spec or ClassifierSpec()
    spec.validate()
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise StratificationError("classifier training set contains a single class")
    k = n_classes or int(y.max()) + 1
    xs = as_samples(x)
    if spec.arch != "mlp":
        xs = _structured(xs)
    mean = xs.mean(axis=0)
    std = xs.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    z = (xs - mean) / std
    rng = substream(spec.seed, "classifier")
    if spec.arch == "mlp":
        net = _Mlp(int(np.prod(z.shape[1:])), k, spec, rng)
    elif spec.arch == "cnn1d":
        net = _Cnn(z.shape[1:], k, spec, rng)
    else:
        net = _Transformer(z.shape[1:], k, spec, rng)
    if net.num_parameters() > MAX_CLASSIFIER_PARAMS:
        raise EvaluationError(f"classifier has {net.num_parameters()} parameters, cap is {MAX_CLASSIFIER_PARAMS}")
    opt = Adam(net.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    n = len(z)
    bs = min(spec.batch_size, n)
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            opt.zero_grad()
            loss = T.cross_entropy(net(Tensor(z[idx])), y[idx])
            loss.backward()
            opt.step()
    clf = Classifier(spec, net, mean, std, k)
    acc = None if x_val is None else clf.accuracy(x_val, y_val)
    return clf, acc


@dataclass
class NearestCentroid:
    centroids: np.ndarray

    @classmethod
    def fit(cls, x, y) -> "NearestCentroid":
        xs = flat(x)
        y = np.asarray(y)
        k = int(y.max()) + 1
        return cls(np.stack([xs[y == c].mean(axis=0) for c in range(k)]))

    def predict(self, x) -> np.ndarray:
        return np.argmin(cdist(flat(x), self.centroids), axis=1)

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def recovery_rate(a_r: float, a_s: float) -> float:
    if not a_r > 0:
        raise EvaluationError(f"recovery rate undefined for real accuracy {a_r}")
    return a_s / a_r


# ---------------------------------------------------------------------------
# nearest-neighbour adversarial accuracy
# ---------------------------------------------------------------------------

def _subsample(x: np.ndarray, n: int, seed: int, name: str) -> np.ndarray:
    if len(x) == n:
        return x
    idx = np.sort(substream(seed, name).choice(len(x), size=n, replace=False))
    return x[idx]


def _loo_min(d: np.ndarray) -> np.ndarray:
    d = d.copy()
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def nnaa(truth, syn, seed: int = 0, n: int | None = None) -> tuple[float, float]:
    """(AA_truth, AA_syn) under Euclidean distance; both sets are subsampled to a common size first."""
    a, b = flat(truth), flat(syn)
    n = n if n is not None else min(len(a), len(b))
    if n < 2:
        raise EvaluationError("nnaa needs at least 2 samples per set")
    a = _subsample(a, n, seed, "nnaa-truth")
    b = _subsample(b, n, seed, "nnaa-syn")
    if len(a) != len(b):
        raise AssertionError("nnaa: set sizes differ after subsampling")
    d_ab = cdist(a, b)
    aa_truth = float(np.mean(d_ab.min(axis=1) > _loo_min(cdist(a, a))))
    aa_syn = float(np.mean(d_ab.min(axis=0) > _loo_min(cdist(b, b))))
    return aa_truth, aa_syn


def privacy_loss(truth_train, truth_test, syn, seed: int = 0) -> dict:
    """S(train) - S(test) with S the averaged AA score; the AA_truth-only difference is reported too."""
    tr, te, sy = flat(truth_train), flat(truth_test), flat(syn)
    n = min(len(tr), len(te), len(sy))
    at_tr, as_tr = nnaa(tr, sy, seed, n)
    at_te, as_te = nnaa(te, sy, seed, n)
    return {
        "aa_truth_train": at_tr, "aa_syn_train": as_tr,
        "aa_truth_test": at_te, "aa_syn_test": as_te,
        "privacy_loss": 0.5 * (at_tr + as_tr) - 0.5 * (at_te + as_te),
        "privacy_loss_truth_only": at_tr - at_te,
        "n": n,
    }


def distance_audit(truth, syn, chunk: int = 256) -> dict:
    a, b = flat(truth), flat(syn)
    if len(a) == 0 or len(b) == 0:
        raise EvaluationError("distance_audit needs non-empty sets")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    out = {"min_l1": math.inf, "min_l2": math.inf, "min_cosine": math.inf, "duplicate_count": 0,
           "zero_norm_pairs": 0}
    for s in range(0, len(b), chunk):
        bb = b[s:s + chunk]
        l2 = cdist(a, bb)
        out["min_l1"] = min(out["min_l1"], float(cdist(a, bb, "cityblock").min()))
        out["min_l2"] = min(out["min_l2"], float(l2.min()))
        out["duplicate_count"] += int((l2 < 1e-9).sum())
        denom = np.outer(na, nb[s:s + chunk])
        zero = denom == 0
        cos = np.where(zero, 1.0, 1.0 - (a @ bb.T) / np.where(zero, 1.0, denom))
        out["min_cosine"] = min(out["min_cosine"], float(cos.min()))
        out["zero_norm_pairs"] += int(zero.sum())
    return out


# ---------------------------------------------------------------------------
# augmentation and projection
# ---------------------------------------------------------------------------

def stratified_subset(y: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Indices of a class-proportional subset of round(fraction * n) samples."""
    y = np.asarray(y)
    rng = substream(seed, "augment-subset")
    m = int(round(fraction * len(y)))
    classes = np.unique(y)
    per = {c: int(round(fraction * np.sum(y == c))) for c in classes}
    while sum(per.values()) > m:
        per[max(per, key=per.get)] -= 1
    while sum(per.values()) < m:
        per[min(per, key=per.get)] += 1
    idx = [rng.permutation(np.flatnonzero(y == c))[:per[c]] for c in classes]
    return np.sort(np.concatenate(idx))


@dataclass
class AugmentationRow:
    fraction: float
    n_real: int
    n_syn: int
    acc_real_only: float | None
    acc_augmented: float | None
    note: str = ""


def augmentation_experiment(x_real, y_real, x_syn, y_syn, x_test, y_test, fractions=(0.05, 0.1, 0.2, 0.5),
                            spec: ClassifierSpec | None = None, seed: int = 0) -> list[AugmentationRow]:
    """Real-only vs real-plus-synthetic top-up accuracy on a shared test set, per real-data fraction."""
    spec = spec or ClassifierSpec()
    xr, xs = as_samples(x_real), as_samples(x_syn)
    yr, ys = np.asarray(y_real), np.asarray(y_syn)
    n = len(xr)
    if len(xs) < n:
        raise EvaluationError(f"need at least {n} synthetic samples, got {len(xs)}")
    k = int(max(yr.max(), ys.max())) + 1
    syn_order = substream(seed, "augment-syn").permutation(len(xs))
    rows = []
    for f in fractions:
        idx = stratified_subset(yr, f, seed)
        top = syn_order[:n - len(idx)]
        if len(np.unique(yr[idx])) < 2:
            rows.append(AugmentationRow(f, len(idx), len(top), None, None, "fewer than 2 classes"))
            continue
        _, acc_real = train_classifier(xr[idx], yr[idx], spec, x_test, y_test, n_classes=k)
        if len(top):
            _, acc_aug = train_classifier(np.concatenate([xr[idx], xs[top]]), np.concatenate([yr[idx], ys[top]]),
                                          spec, x_test, y_test, n_classes=k)
        else:
            acc_aug = acc_real
        rows.append(AugmentationRow(f, len(idx), len(top), acc_real, acc_aug))
    return rows


def write_augmentation_csv(path, rows: list[AugmentationRow], header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["fraction", "n_real", "n_syn", "acc_real_only", "acc_augmented", "note"])
        for r in rows:
            w.writerow([r.fraction, r.n_real, r.n_syn, "" if r.acc_real_only is None else repr(r.acc_real_only),
                        "" if r.acc_augmented is None else repr(r.acc_augmented), r.note])


def export_projection(datasets: dict, out_path=None) -> list[tuple[str, float, float]]:
    """Two-component PCA fitted on the union of all sets; optionally written as CSV."""
    mats = {name: flat(x) for name, x in datasets.items()}
    dims = {m.shape[1] for m in mats.values()}
    if len(dims) != 1:
        raise EvaluationError(f"datasets differ in dimensionality: {sorted(dims)}")
    union = np.concatenate(list(mats.values()))
    mu = union.mean(axis=0)
    cov = (union - mu).T @ (union - mu) if union.shape[1] <= union.shape[0] else None
    if cov is not None:
        evals, evecs = np.linalg.eigh(cov)
        comps = evecs[:, np.argsort(evals)[::-1][:2]]
    else:
        _, _, vt = np.linalg.svd(union - mu, full_matrices=False)
        comps = vt[:2].T
    if comps.shape[1] < 2:
        comps = np.pad(comps, ((0, 0), (0, 2 - comps.shape[1])))
    signs = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(comps.shape[1])])
    comps = comps * np.where(signs == 0, 1.0, signs)
    rows = []
    for name, m in mats.items():
        p = (m - mu) @ comps
        rows += [(name, float(a), float(b)) for a, b in p]
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source_name", "pc1", "pc2"])
            for name, a, b in rows:
                w.writerow([name, repr(a), repr(b)])
    return rows


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    a_r: float
    a_s: float
    recovery_rate: float
    aa_truth_train: float
    aa_syn_train: float
    aa_truth_test: float
    aa_syn_test: float
    privacy_loss: float
    privacy_loss_truth_only: float
    min_l1: float
    min_l2: float
    min_cosine: float
    duplicate_count: int
    conditional_accuracy: float | None = None
    augmentation: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.a_r > 0 and self.recovery_rate != self.a_s / self.a_r:
            raise EvaluationError("recovery_rate must equal a_s / a_r")
        for name in ("aa_truth_train", "aa_syn_train", "aa_truth_test", "aa_syn_test"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise EvaluationError(f"{name} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))
