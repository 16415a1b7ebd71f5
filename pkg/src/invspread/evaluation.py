"""Measurements on learned embeddings: kNN, linear probe, R@K, NMI, similarity histograms."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, FormatError

# coarse attribute grouping of the CIFAR-10 classes
CIFAR_ANIMALS_VS_ARTIFACTS = {
    "airplane": "artifact",
    "automobile": "artifact",
    "bird": "animal",
    "cat": "animal",
    "deer": "animal",
    "dog": "animal",
    "frog": "animal",
    "horse": "animal",
    "ship": "artifact",
    "truck": "artifact",
}


@dataclass
class EmbeddingSet:
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if self.features.ndim != 2 or len(self.features) != n or len(self.labels) != n:
            raise ContractError("ids, features and labels must be aligned")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def check_unit(self, tol: float = 1e-5) -> None:
        norms = np.linalg.norm(self.features.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ContractError("embedding rows must be unit-norm")

    def permuted(self, order) -> "EmbeddingSet":
        order = np.asarray(order)
        return EmbeddingSet(self.ids[order], self.features[order], self.labels[order])


def _ranked(sims: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Column order per row: descending similarity, ties by lower id."""
    order = np.empty(sims.shape, dtype=np.int64)
    for r in range(len(sims)):
        order[r] = np.lexsort((ids, -sims[r]))
    return order


def _cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a.astype(np.float64) @ b.astype(np.float64).T


# ---------------------------------------------------------------- weighted kNN


def knn_predict(train: EmbeddingSet, test: EmbeddingSet, k: int = 200, tau: float = 0.1) -> np.ndarray:
    if k < 1:
        raise ContractError("k must be >= 1")
    if k > len(train):
        raise ContractError(f"k={k} exceeds the {len(train)} training embeddings")
    if not tau > 0:
        raise ContractError("tau must be > 0")
    sims = _cosines(test.features, train.features)
    top = _ranked(sims, train.ids)[:, :k]
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    preds = np.empty(len(test), dtype=np.int64)
    for r in range(len(test)):
        votes = np.zeros(num_classes)
        np.add.at(votes, train.labels[top[r]], np.exp(sims[r, top[r]] / tau))
        preds[r] = int(np.argmax(votes))
    return preds


def weighted_knn(train: EmbeddingSet, test: EmbeddingSet, k: int = 200, tau: float = 0.1) -> float:
    """Accuracy of exp(cos/tau)-weighted voting among the k most similar training rows."""
    return float(np.mean(knn_predict(train, test, k, tau) == test.labels))


# ---------------------------------------------------------------- linear probe


def probe_loss(W: Tensor, b: Tensor, X: np.ndarray, y: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of the linear map X W^T + b."""
    logits = ad.add(ad.matmul(Tensor(X, dtype=W.dtype), ad.transpose(W)), b)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(y)), y] = 1
    picked = ad.sum(ad.mul(logits, onehot), axis=1)
    return ad.scale(ad.sum(ad.sub(ad.logsumexp(logits, axis=1), picked)), 1.0 / len(y))


def linear_probe(train: EmbeddingSet, test: EmbeddingSet, epochs: int = 300, lr: float = 1.0, num_classes: int | None = None) -> float:
    """Test accuracy of a softmax-regression classifier fit on frozen training features.

    Full-batch gradient descent from zero weights, so the result is deterministic.
    """
    if len(np.unique(train.labels)) < 2:
        raise ContractError("linear probe needs at least two classes in the training set")
    C = num_classes or int(max(train.labels.max(), test.labels.max())) + 1
    d = train.dim
    W = Tensor(np.zeros((C, d)), requires_grad=True, dtype=np.float64)
    b = Tensor(np.zeros(C), requires_grad=True, dtype=np.float64)
    X = train.features.astype(np.float64)
    for _ in range(epochs):
        with ad.Tape():
            loss = probe_loss(W, b, X, train.labels)
            ad.backward(loss)
        W.data = W.data - lr * W.grad
        b.data = b.data - lr * b.grad
        W.grad = b.grad = None
    logits = test.features.astype(np.float64) @ W.data.T + b.data
    return float(np.mean(logits.argmax(axis=1) == test.labels))


# ---------------------------------------------------------------- retrieval


def recall_at_k(es: EmbeddingSet, ks=(1, 2, 4, 8)) -> dict[int, float]:
    """Fraction of queries with a same-label item among their K nearest others."""
    n = len(es)
    ks = [int(k) for k in ks]
    if any(k < 1 or k >= n for k in ks):
        raise ContractError(f"every K must satisfy 1 <= K < n={n}")
    sims = _cosines(es.features, es.features)
    np.fill_diagonal(sims, -np.inf)
    order = _ranked(sims, es.ids)[:, : max(ks)]
    hits = es.labels[order] == es.labels[:, None]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), np.iinfo(np.int64).max)
    return {k: float(np.mean(first < k)) for k in ks}


# ---------------------------------------------------------------- clustering


def nmi(assignments, labels) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    a = np.asarray(assignments)
    y = np.asarray(labels)
    if a.size == 0 or a.shape != y.shape:
        raise ContractError("nmi needs two aligned, non-empty label arrays")
    _, ai = np.unique(a, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((ai.max() + 1, yi.max() + 1))
    np.add.at(joint, (ai, yi), 1.0)
    p = joint / a.size
    pa, py = p.sum(axis=1), p.sum(axis=0)
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / np.outer(pa, py)[nz])).sum())
    ha = float(-(pa * np.log(pa)).sum())
    hy = float(-(py * np.log(py)).sum())
    if ha == 0.0 and hy == 0.0:
        return 1.0
    return float(np.clip(mi / ((ha + hy) / 2.0), 0.0, 1.0))


def kmeans(features: np.ndarray, k: int, restarts: int = 10, seed: int = 0) -> np.ndarray:
    """Best-inertia assignment over seeded k-means++ restarts (ties: lowest seed)."""
    from sklearn.cluster import KMeans

    best = None
    for r in range(restarts):
        km = KMeans(n_clusters=k, n_init=1, random_state=seed + r).fit(features.astype(np.float64))
        if best is None or km.inertia_ < best[0]:
            best = (km.inertia_, km.labels_)
    return np.asarray(best[1], dtype=np.int64)


def clustering_nmi(es: EmbeddingSet, restarts: int = 10, seed: int = 0) -> float:
    k = len(np.unique(es.labels))
    return nmi(kmeans(es.features, k, restarts, seed), es.labels)


# ---------------------------------------------------------------- similarity histograms


@dataclass
class SimilarityHistograms:
    bin_edges: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    positive_values: np.ndarray = field(repr=False)
    negative_values: np.ndarray = field(repr=False)

    @property
    def positive_median(self) -> float:
        return float(np.median(self.positive_values))

    @property
    def negative_median(self) -> float:
        return float(np.median(self.negative_values))

    @property
    def median_gap(self) -> float:
        return self.positive_median - self.negative_median

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "positive_count", "negative_count"])
            for i in range(len(self.positive)):
                w.writerow([f"{self.bin_edges[i]:.6g}", f"{self.bin_edges[i + 1]:.6g}", int(self.positive[i]), int(self.negative[i])])


def regroup_labels(labels: np.ndarray, mapping: dict, class_names=None) -> tuple[np.ndarray, list]:
    """Map fine labels (ints, or names via ``class_names``) to coarse group indices."""
    groups: list = []
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        key = class_names[lab] if class_names is not None else int(lab)
        if key not in mapping and str(key) in mapping:
            key = str(key)
        if key not in mapping:
            raise ContractError(f"label {key!r} missing from the regrouping map")
        g = mapping[key]
        if g not in groups:
            groups.append(g)
        out[i] = groups.index(g)
    return out, groups


def similarity_histograms(es: EmbeddingSet, regroup: dict | None = None, knn: int = 5, bins: int = 100, class_names=None) -> SimilarityHistograms:
    """Cosines from each query to its ``knn`` nearest same-group and different-group rows."""
    labels = es.labels
    names = None
    if regroup is not None:
        labels, names = regroup_labels(labels, regroup, class_names)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ContractError("similarity histograms need at least two label groups")
    for c, cnt in zip(classes, counts):
        if cnt < knn + 1:
            name = names[c] if names is not None else int(c)
            raise ContractError(f"group {name!r} has {cnt} members, needs at least {knn + 1}")
        if len(labels) - cnt < knn:
            name = names[c] if names is not None else int(c)
            raise ContractError(f"group {name!r} has fewer than {knn} rows outside it")
    sims = _cosines(es.features, es.features)
    n = len(es)
    pos, neg = [], []
    for q in range(n):
        order = np.lexsort((es.ids, -sims[q]))
        order = order[order != q]
        same = labels[order] == labels[q]
        pos.append(sims[q, order[same][:knn]])
        neg.append(sims[q, order[~same][:knn]])
    pos_v = np.clip(np.concatenate(pos), -1.0, 1.0)
    neg_v = np.clip(np.concatenate(neg), -1.0, 1.0)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    return SimilarityHistograms(edges, np.histogram(pos_v, edges)[0], np.histogram(neg_v, edges)[0], pos_v, neg_v)


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    knn_accuracy: float
    linear_accuracy: float | None
    recall_at: dict[int, float]
    nmi: float | None
    histogram_median_gap: float | None = None
    knn_k: int = 200
    num_train: int = 0
    num_test: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        return d

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- invariance / spread


def invariance_spread(plain: np.ndarray, augmented: np.ndarray) -> tuple[float, float]:
    """Mean cos(f_i, f̂_i) and mean cos(f_i, f_j) over i != j."""
    plain = plain.astype(np.float64)
    augmented = augmented.astype(np.float64)
    same = float(np.mean(np.sum(plain * augmented, axis=1)))
    G = plain @ plain.T
    n = len(G)
    cross = float((G.sum() - np.trace(G)) / (n * (n - 1)))
    return same, cross


# ---------------------------------------------------------------- export format

EMBED_MAGIC = b"ISEMB\0\0\1"
EMBED_VERSION = 1
_EMBED_HEADER = struct.Struct("<8sIQQ")


def write_embeddings(es: EmbeddingSet, path) -> None:
    """Header (magic, u32 version, u64 n, u64 d) then int64 ids, int64 labels, float32 rows; all little-endian."""
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_MAGIC, EMBED_VERSION, len(es), es.dim))
        fh.write(es.ids.astype("<i8").tobytes())
        fh.write(es.labels.astype("<i8").tobytes())
        fh.write(np.ascontiguousarray(es.features, dtype="<f4").tobytes())


def read_embeddings(path, expected_dim: int | None = None) -> EmbeddingSet:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _EMBED_HEADER.size:
        raise FormatError("file shorter than header", offset=len(blob), path=path)
    magic, version, n, d = _EMBED_HEADER.unpack_from(blob, 0)
    if magic != EMBED_MAGIC:
        raise FormatError("bad magic bytes", offset=0, path=path)
    if version != EMBED_VERSION:
        raise FormatError(f"unsupported version {version}", offset=8, path=path)
    if expected_dim is not None and d != expected_dim:
        raise FormatError(f"embedding dimension {d} != expected {expected_dim}", offset=20, path=path)
    want = _EMBED_HEADER.size + 16 * n + 4 * n * d
    if len(blob) != want:
        raise FormatError(f"expected {want} bytes for n={n}, d={d}, found {len(blob)}", offset=min(len(blob), want), path=path)
    o = _EMBED_HEADER.size
    ids = np.frombuffer(blob, "<i8", n, o).astype(np.int64)
    labels = np.frombuffer(blob, "<i8", n, o + 8 * n).astype(np.int64)
    feats = np.frombuffer(blob, "<f4", n * d, o + 16 * n).astype(np.float32).reshape(n, d)
    return EmbeddingSet(ids, feats, labels)
