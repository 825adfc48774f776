"""Temporal alignment: additive attention, warping, monotone DP paths and path error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .gradcore import tensor as T
from .gradcore.nn import Module, glorot_uniform
from .gradcore.tensor import Tensor

SOURCE = "source"
TARGET = "target"
DEFAULT_BAND = 0.2


class AttentionParams(Module):
    """Parameters ``v``, ``W_t``, ``W_s`` of the additive score."""

    def __init__(self, v, w_t, w_s):
        self.v, self.w_t, self.w_s = (x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), True)
                                      for x in (v, w_t, w_s))
        if self.v.ndim != 1 or self.w_t.shape != self.w_s.shape or self.w_t.shape[0] != self.v.shape[0]:
            raise ContractError(f"attention params: v {self.v.shape}, W_t {self.w_t.shape}, W_s {self.w_s.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_a: int = 64) -> "AttentionParams":
        return cls(glorot_uniform(rng, (d_a,), d_a, 1),
                   glorot_uniform(rng, (d_a, d), d, d_a),
                   glorot_uniform(rng, (d_a, d), d, d_a))

    @property
    def dim(self) -> int:
        return self.w_t.shape[1]


def attention_scores(H1, H2, p: AttentionParams) -> Tensor:
    """T1 x T2 scores ``v . tanh(W_t h1_i + W_s h2_j)``."""
    H1, H2 = T.as_tensor(H1), T.as_tensor(H2)
    if H1.ndim != 2 or H2.ndim != 2 or H1.shape[0] != H2.shape[0] or H1.shape[0] != p.dim:
        raise ContractError(f"attention scores: H1 {H1.shape}, H2 {H2.shape}, params expect d={p.dim}")
    d_a = p.v.shape[0]
    t1, t2 = H1.shape[1], H2.shape[1]
    a = T.reshape(T.matmul(p.w_t, H1), (d_a, t1, 1))
    b = T.reshape(T.matmul(p.w_s, H2), (d_a, 1, t2))
    hidden = T.reshape(T.tanh(T.add(a, b)), (d_a, t1 * t2))
    return T.reshape(T.matmul(T.reshape(p.v, (1, d_a)), hidden), (t1, t2))


def band_mask(t1: int, t2: int, width: float = DEFAULT_BAND) -> np.ndarray:
    """True where ``|i/T1 - j/T2| <= width`` (1-based indices)."""
    i = np.arange(1, t1 + 1)[:, None] / t1
    j = np.arange(1, t2 + 1)[None, :] / t2
    return np.abs(i - j) <= width + 1e-12


def attention_matrix(scores, axis: str = SOURCE, band: float | None = None) -> Tensor:
    """Softmax of ``scores`` over source rows (each column sums to 1) or target columns."""
    scores = T.as_tensor(scores)
    if scores.ndim != 2:
        raise ContractError(f"attention matrix needs T1 x T2 scores, got {scores.shape}")
    if not np.all(np.isfinite(scores.data)):
        raise ContractError("attention scores must be finite")
    mask = band_mask(*scores.shape, band) if band is not None else None
    if axis == SOURCE:
        return T.transpose(T.softmax(T.transpose(scores), None if mask is None else mask.T))
    if axis == TARGET:
        return T.softmax(scores, mask)
    raise ContractError(f"unknown normalisation axis {axis!r}")


def apply_warp(H1, A) -> Tensor:
    """Warped features ``H1 A`` (d x T2)."""
    H1, A = T.as_tensor(H1), T.as_tensor(A)
    if H1.ndim != 2 or A.ndim != 2 or H1.shape[1] != A.shape[0]:
        raise ContractError(f"apply_warp: H1 {H1.shape} and A {A.shape} do not conform")
    return T.matmul(H1, A)


# ---------------------------------------------------------------- paths

_STEPS = ((1, 1), (1, 0), (0, 1))  # backtrack preference: diagonal, source advance, target advance


def _accumulate(cost: np.ndarray) -> np.ndarray:
    t1, t2 = cost.shape
    D = np.full((t1 + 1, t2 + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, t1 + 1):
        row, prev = D[i], D[i - 1]
        c = cost[i - 1]
        # the within-row dependency (0,1) is sequential; the others vectorise
        best = np.minimum(prev[:-1], prev[1:])
        for j in range(1, t2 + 1):
            row[j] = c[j - 1] + min(best[j - 1], row[j - 1])
    return D


def _backtrack(D: np.ndarray) -> list[tuple[int, int]]:
    i, j = D.shape[0] - 1, D.shape[1] - 1
    path = [(i, j)]
    while (i, j) != (1, 1):
        options = [(D[i - di, j - dj], k) for k, (di, dj) in enumerate(_STEPS) if i - di >= 1 and j - dj >= 1]
        best = min(v for v, _ in options)
        k = next(k for v, k in options if v == best)
        i, j = i - _STEPS[k][0], j - _STEPS[k][1]
        path.append((i, j))
    return path[::-1]


def min_cost_path(cost) -> tuple[list[tuple[int, int]], float]:
    """Cheapest monotone corner-to-corner path (1-based pairs) through ``cost``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] < 1 or cost.shape[1] < 1:
        raise ContractError(f"cost matrix must be nonempty 2D, got {cost.shape}")
    D = _accumulate(cost)
    return _backtrack(D), float(D[-1, -1])


def extract_path(A) -> list[tuple[int, int]]:
    A = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    return min_cost_path(1.0 - A)[0]


def pairwise_cost(X1, X2, metric: str = "sqeuclidean") -> np.ndarray:
    """T1 x T2 frame distances between d x T1 and d x T2 sequences."""
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if X1.ndim == 1:
        X1 = X1[None, :]
    if X2.ndim == 1:
        X2 = X2[None, :]
    if X1.shape[0] != X2.shape[0]:
        raise ContractError(f"dtw: feature dims differ ({X1.shape[0]} vs {X2.shape[0]})")
    if X1.shape[1] == 0 or X2.shape[1] == 0:
        raise ContractError("dtw: empty sequence")
    diff = X1[:, :, None] - X2[:, None, :]
    if metric == "sqeuclidean":
        return (diff * diff).sum(axis=0)
    if metric == "abs":
        return np.abs(diff).sum(axis=0)
    raise ContractError(f"unknown metric {metric!r}")


def dtw(X1, X2, metric: str = "sqeuclidean") -> tuple[list[tuple[int, int]], float]:
    return min_cost_path(pairwise_cost(X1, X2, metric))


# ---------------------------------------------------------------- error metric


def _directed(P: np.ndarray, Q: np.ndarray) -> float:
    d = np.sqrt(((P[:, None, :] - Q[None, :, :]) ** 2).sum(axis=2))
    return float(d.min(axis=1).sum())


def alignment_error(p_alg, p_grd, scale: tuple[float, float] = (1.0, 1.0)) -> float:
    """Symmetric mean nearest-point distance between two paths.

    ``scale`` multiplies the (source, target) coordinates first, e.g.
    ``(1/T1, 1/T2)`` for the length-normalised variant.
    """
    A = np.asarray(p_alg, dtype=np.float64).reshape(-1, 2) * scale
    G = np.asarray(p_grd, dtype=np.float64).reshape(-1, 2) * scale
    if len(A) == 0 or len(G) == 0:
        raise ContractError("alignment error needs nonempty paths")
    return (_directed(G, A) + _directed(A, G)) / (len(G) + len(A))


def normalized_alignment_error(p_alg, p_grd, t1: int, t2: int) -> float:
    return alignment_error(p_alg, p_grd, (1.0 / t1, 1.0 / t2))


def is_monotone_path(path, t1: int | None = None, t2: int | None = None) -> bool:
    p = np.asarray(path, dtype=int).reshape(-1, 2)
    if len(p) == 0:
        return False
    steps = np.diff(p, axis=0)
    ok = bool(np.all(steps >= 0) and np.all(steps <= 1) and np.all(steps.sum(axis=1) >= 1))
    if t1 is not None and t2 is not None:
        ok = ok and tuple(p[0]) == (1, 1) and tuple(p[-1]) == (t1, t2)
    return ok


@dataclass
class FeatureSequence:
    H: np.ndarray  # (d, T)
    source: str = ""

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        if self.H.ndim != 2 or self.H.shape[1] < 1 or not np.all(np.isfinite(self.H)):
            raise ContractError(f"feature sequence must be finite d x T with T >= 1, got {self.H.shape}")
