"""Instance-level softmax embedding losses and the baselines they are compared with.

All losses take l2-normalised embeddings as :class:`Tensor` objects, so
``F @ G.T`` is a matrix of cosine similarities. The scalar probability helpers
work on plain arrays in float64 and exist for inspection and testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tensor
from .errors import ContractError, NumericDomainError

VARIANTS = ("instance_softmax", "classifier_softmax", "memory_softmax", "triplet", "triplet_hard")
SCHEMES = ("paper_eq", "symmetric_2N")
FILTERS = ("all", "hard_top_half", "easy_bottom_half")

PROB_CLAMP = 1e-12
UNIT_TOL = 1e-5


@dataclass(frozen=True)
class LossConfig:
    variant: str = "instance_softmax"
    temperature: float = 0.1
    triplet_margin: float = 0.5
    denominator_scheme: str = "paper_eq"
    negative_filter: str = "all"
    classifier_temperature: float = 1.0
    memory_momentum: float = 0.0  # 0 = replace the bank row with the new feature

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.denominator_scheme not in SCHEMES:
            raise ContractError(f"denominator_scheme must be one of {SCHEMES}")
        if self.negative_filter not in FILTERS:
            raise ContractError(f"negative_filter must be one of {FILTERS}")
        if not self.temperature > 0 or not self.classifier_temperature > 0:
            raise ContractError("temperature and classifier_temperature must be > 0")
        if self.triplet_margin < 0:
            raise ContractError("triplet_margin must be >= 0")
        if not 0.0 <= self.memory_momentum < 1.0:
            raise ContractError("memory_momentum must lie in [0, 1)")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_unit(*mats) -> None:
    if not ad.is_strict():
        return
    for m in mats:
        norms = np.linalg.norm(_data(m).astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ContractError("features must have unit-norm rows")


def _check_index(i: int, m: int, what: str) -> None:
    if not 0 <= i < m:
        raise ContractError(f"{what}={i} out of range for {m} instances")


# ---------------------------------------------------------------- probabilities


def prob_positive(F, Fhat, i: int, tau: float) -> float:
    """Probability that the augmented view of instance ``i`` is recognised as ``i``.

    Softmax over the batch's original features: column ``i`` of ``F @ Fhat.T``.
    """
    F, Fhat = np.asarray(_data(F), np.float64), np.asarray(_data(Fhat), np.float64)
    _check_index(i, len(F), "i")
    _check_unit(F, Fhat)
    logits = F @ Fhat[i] / tau
    w = np.exp(logits - logits.max())
    return float(w[i] / w.sum())


def prob_positive_split(F, Fhat, i: int, tau: float) -> float:
    """Same quantity with the matching term separated from the other instances.

    Kept as an independent code path: the explicit loop over ``k != i`` is
    compared against :func:`prob_positive` in the tests.
    """
    F, Fhat = np.asarray(_data(F), np.float64), np.asarray(_data(Fhat), np.float64)
    _check_index(i, len(F), "i")
    q = Fhat[i]
    shift = max(float(F[k] @ q) for k in range(len(F))) / tau
    own = np.exp(float(F[i] @ q) / tau - shift)
    others = 0.0
    for k in range(len(F)):
        if k != i:
            others += np.exp(float(F[k] @ q) / tau - shift)
    return float(own / (own + others))


def prob_negative(F, j: int, i: int, tau: float) -> float:
    """Probability that original instance ``j`` is recognised as a different instance ``i``."""
    F = np.asarray(_data(F), np.float64)
    _check_index(i, len(F), "i")
    _check_index(j, len(F), "j")
    if i == j:
        raise ContractError("prob_negative needs i != j")
    _check_unit(F)
    logits = F @ F[j] / tau
    w = np.exp(logits - logits.max())
    return float(w[i] / w.sum())


def prob_negative_split(F, j: int, i: int, tau: float) -> float:
    """:func:`prob_negative` with the self-similarity term of ``j`` written out separately."""
    F = np.asarray(_data(F), np.float64)
    if i == j:
        raise ContractError("prob_negative needs i != j")
    q = F[j]
    shift = max(float(F[k] @ q) for k in range(len(F))) / tau
    self_term = np.exp(float(q @ q) / tau - shift)
    rest = 0.0
    for k in range(len(F)):
        if k != j:
            rest += np.exp(float(F[k] @ q) / tau - shift)
    return float(np.exp(float(F[i] @ q) / tau - shift) / (self_term + rest))


# ---------------------------------------------------------------- negative selection


def negative_filter(F, anchor: int, mode: str = "all", candidates=None) -> np.ndarray:
    """Indices of the negatives kept for ``anchor``, sorted ascending.

    Candidates (default: every row except the anchor) are ranked by cosine
    similarity to the anchor, ties going to the lower index. ``hard_top_half``
    keeps the first ceil(n/2) of that ranking, ``easy_bottom_half`` the last
    ceil(n/2).
    """
    if mode not in FILTERS:
        raise ContractError(f"negative filter must be one of {FILTERS}, got {mode!r}")
    F = _data(F)
    if candidates is None:
        candidates = np.array([j for j in range(len(F)) if j != anchor], dtype=np.int64)
    candidates = np.asarray(candidates, dtype=np.int64)
    if mode == "all" or len(candidates) == 0:
        return np.sort(candidates)
    sims = F[candidates].astype(np.float64) @ F[anchor].astype(np.float64)
    ranked = candidates[np.lexsort((candidates, -sims))]
    keep = -(-len(candidates) // 2)
    chosen = ranked[:keep] if mode == "hard_top_half" else ranked[len(ranked) - keep :]
    return np.sort(chosen)


def _negative_mask(F, mode: str, candidate_sets) -> np.ndarray:
    n = len(candidate_sets)
    mask = np.zeros((n, _data(F).shape[0]), dtype=bool)
    for a, cands in enumerate(candidate_sets):
        mask[a, negative_filter(F, a, mode, cands)] = True
    return mask


# ---------------------------------------------------------------- the instance loss


def _log_one_minus(P: Tensor, mask: np.ndarray) -> Tensor:
    if np.any(P.data > 1.0 + 1e-6):
        raise NumericDomainError("probability above 1 entering log(1 - p)")
    Pc = ad.clamp(P, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = ad.log(ad.sub(1.0, Pc))
    return ad.sum(ad.mul(terms, mask.astype(P.dtype)))


def instance_loss(F: Tensor, Fhat: Tensor, tau: float = 0.1, scheme: str = "paper_eq", negatives: str = "all") -> Tensor:
    """Negative log-likelihood of the instance-feature softmax, summed over the batch.

    ``paper_eq`` scores each augmented view against the m original features and
    each original feature against the other originals:
    J = -Σ_i log P(i|x̂_i) - Σ_i Σ_{j≠i} log(1 - P(i|x_j)).

    ``symmetric_2N`` pools both branches: every one of the 2m features is an
    anchor whose candidates are the other 2m-1 features, one positive (its
    other view) and 2m-2 negatives.

    ``negatives`` restricts the negative sums to the hard or easy half ranked by
    similarity (see :func:`negative_filter`).
    """
    if F.shape != Fhat.shape or F.ndim != 2:
        raise ContractError(f"F and Fhat must be matching m×d matrices, got {F.shape} and {Fhat.shape}")
    if scheme not in SCHEMES:
        raise ContractError(f"unknown denominator scheme {scheme!r}")
    _check_unit(F, Fhat)
    m = F.shape[0]
    inv_tau = 1.0 / tau

    if scheme == "paper_eq":
        # A[k, i] = f_k·f̂_i / τ : column i is the softmax for view x̂_i
        A = ad.scale(ad.matmul(F, ad.transpose(Fhat)), inv_tau)
        pos = ad.sub(ad.diagonal(A), ad.logsumexp(A, axis=0))
        # B[k, j] = f_k·f_j / τ : column j normalises P(·|x_j)
        B = ad.scale(ad.matmul(F, ad.transpose(F)), inv_tau)
        P = ad.exp(ad.sub(B, ad.logsumexp(B, axis=0, keepdims=True)))
        cands = [np.array([j for j in range(m) if j != i], dtype=np.int64) for i in range(m)]
        mask = _negative_mask(F, negatives, cands)
        neg = _log_one_minus(P, mask)
        return ad.sub(ad.scale(ad.sum(pos), -1.0), neg)

    Z = ad.concat_rows([F, Fhat])
    n = 2 * m
    S = ad.scale(ad.matmul(Z, ad.transpose(Z)), inv_tau)
    exclude = np.zeros((n, n), dtype=S.dtype)
    exclude[np.diag_indices(n)] = np.finfo(S.dtype).min / 4
    S = ad.add(S, exclude)
    lse = ad.logsumexp(S, axis=1, keepdims=True)
    logP = ad.sub(S, lse)
    partner = (np.arange(n) + m) % n
    pos_mask = np.zeros((n, n), dtype=S.dtype)
    pos_mask[np.arange(n), partner] = 1
    pos = ad.sum(ad.mul(logP, pos_mask))
    P = ad.exp(logP)
    Zd = Z.data
    cands = [np.array([c for c in range(n) if c != a and c != partner[a]], dtype=np.int64) for a in range(n)]
    mask = _negative_mask(Zd, negatives, cands)
    neg = _log_one_minus(P, mask)
    return ad.sub(ad.scale(pos, -1.0), neg)


# ---------------------------------------------------------------- baselines


def _nll_of_targets(logits: Tensor, targets: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(targets)), targets] = 1
    picked = ad.sum(ad.mul(logits, onehot), axis=1)
    return ad.scale(ad.sum(ad.sub(picked, ad.logsumexp(logits, axis=1))), -1.0)


def _check_ids(ids, n: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"instance ids must lie in [0, {n})")
    return ids


def classifier_softmax_loss(F: Tensor, ids, W: Tensor, tau: float = 1.0) -> Tensor:
    """Exemplar-style loss: each feature classified into its instance by a weight row.

    ``W`` is n×d with one learnable row per dataset instance; ``tau`` defaults to
    1, i.e. no temperature.
    """
    ids = _check_ids(ids, W.shape[0])
    if F.shape[1] != W.shape[1]:
        raise ContractError(f"feature dim {F.shape[1]} != weight dim {W.shape[1]}")
    logits = ad.matmul(F, ad.transpose(W))
    if tau != 1.0:
        logits = ad.scale(logits, 1.0 / tau)
    return _nll_of_targets(logits, ids)


class ClassifierWeights:
    def __init__(self, n: int, d: int, seed: int = 0):
        gen = rngmod.stream(seed, "classifier")
        self.W = Tensor(gen.standard_normal((n, d)) * np.sqrt(1.0 / d), requires_grad=True, name="classifier")


@dataclass
class BankUpdate:
    ids: np.ndarray
    features: np.ndarray


class MemoryBank:
    """Per-instance feature store; rows are constants on the tape."""

    def __init__(self, n: int, d: int, seed: int = 0, features: np.ndarray | None = None):
        if features is None:
            gen = rngmod.stream(seed, "memory-bank")
            features = gen.standard_normal((n, d))
            features /= np.linalg.norm(features, axis=1, keepdims=True)
        self.features = np.asarray(features, dtype=np.float32).copy()

    def __len__(self) -> int:
        return len(self.features)

    def apply(self, update: BankUpdate, momentum: float = 0.0) -> None:
        new = update.features.astype(np.float64)
        if momentum:
            new = momentum * self.features[update.ids] + (1.0 - momentum) * new
        new /= np.maximum(np.linalg.norm(new, axis=1, keepdims=True), ad.NORM_EPS)
        self.features[update.ids] = new.astype(np.float32)


def memory_softmax_loss(F: Tensor, ids, bank: MemoryBank, tau: float = 0.1) -> tuple[Tensor, BankUpdate]:
    """Non-parametric softmax against a memory bank.

    Returns the loss and the pending bank update (the batch features), to be
    applied with :meth:`MemoryBank.apply` after the optimiser step.
    """
    ids = _check_ids(ids, len(bank))
    _check_unit(F, bank.features)
    V = Tensor(bank.features, dtype=F.dtype)
    logits = ad.scale(ad.matmul(F, ad.transpose(V)), 1.0 / tau)
    return _nll_of_targets(logits, ids), BankUpdate(ids.copy(), F.data.copy())


def triplet_negatives(F, Fhat, hard: bool, seed: int = 0) -> np.ndarray:
    Fd, Hd = _data(F), _data(Fhat)
    m = len(Fd)
    if hard:
        sims = Hd.astype(np.float64) @ Fd.astype(np.float64).T
        sims[np.diag_indices(m)] = -np.inf
        return sims.argmax(axis=1)
    gen = rngmod.stream(seed, "triplet")
    j = gen.integers(0, m - 1, size=m)
    return j + (j >= np.arange(m))


def triplet_loss(F: Tensor, Fhat: Tensor, margin: float = 0.5, hard: bool = False, seed: int = 0) -> Tensor:
    """Mean cosine triplet hinge with anchor f̂_i, positive f_i and a negative from F.

    ``hard`` picks the most similar other row (online hard negative); otherwise a
    seeded uniform choice among the other rows.
    """
    if F.shape != Fhat.shape:
        raise ContractError("F and Fhat must have the same shape")
    m = F.shape[0]
    if m < 2:
        raise ContractError("triplet loss needs at least two instances")
    neg = triplet_negatives(F, Fhat, hard, seed)
    cos_ap = ad.sum(ad.mul(Fhat, F), axis=1)
    cos_an = ad.sum(ad.mul(Fhat, ad.take_rows(F, neg)), axis=1)
    hinge = ad.relu(ad.add(ad.sub(cos_an, cos_ap), margin))
    return ad.mean(hinge)
