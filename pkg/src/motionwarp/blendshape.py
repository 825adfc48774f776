"""Speech blendshape model: template adaptation, PCA deformation basis, encode/decode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptyBasisError, RankError

DEFAULT_MAX_COMPONENTS = 28


@dataclass
class LandmarkSelector:
    indices: np.ndarray  # (m,) vertex indices

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=int).reshape(-1)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ContractError("landmark indices must be distinct")

    def validate(self, n_vertices: int) -> None:
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n_vertices):
            raise ContractError(f"landmark index out of range [0, {n_vertices})")

    def coords(self) -> np.ndarray:
        """Rows of the flat 3n vector picked by the indicator matrix."""
        return (3 * self.indices[:, None] + np.arange(3)).reshape(-1)

    def matrix(self, n_vertices: int) -> np.ndarray:
        """The 3m x 3n indicator matrix."""
        self.validate(n_vertices)
        A = np.zeros((3 * self.indices.size, 3 * n_vertices))
        A[np.arange(A.shape[0]), self.coords()] = 1.0
        return A

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.coords()]


def _flat(x, n3: int | None = None, what: str = "mesh") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if n3 is not None and x.size != n3:
        raise ContractError(f"{what} has {x.size} coordinates, expected {n3}")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{what} has non-finite coordinates")
    return x


def adapt_template(x_n, U_s, sel: LandmarkSelector, landmarks, rcond: float = 1e-10):
    """Expression coefficients whose deformed template best matches the target landmarks.

    Solves ``min_c || l - A (x_n + U_s c) ||`` by a column-pivoted QR of
    ``A U_s`` and returns ``(c, x_n + U_s c)``.
    """
    from scipy.linalg import qr, solve_triangular

    x_n = _flat(x_n, what="neutral")
    n3 = x_n.size
    U_s = np.asarray(U_s, dtype=np.float64)
    if U_s.ndim != 2 or U_s.shape[0] != n3:
        raise ContractError(f"expression basis must be {n3} x q, got {U_s.shape}")
    sel.validate(n3 // 3)
    l = _flat(landmarks, 3 * sel.indices.size, "landmarks")
    M = sel(U_s.T).T  # A U_s without forming A
    q = U_s.shape[1]
    if M.shape[0] < q:
        raise RankError(f"{M.shape[0]} landmark coordinates cannot determine {q} coefficients", M.shape[0])
    Q, R, piv = qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int((diag > rcond * max(diag[0], 1e-300)).sum()) if q else 0
    if rank < q:
        raise RankError("landmark-restricted expression basis is rank deficient", rank)
    c = np.empty(q)
    c[piv] = solve_triangular(R, Q.T @ (l - sel(x_n)))
    return c, x_n + U_s @ c


@dataclass
class SpeechBlendshapeModel:
    neutral: np.ndarray  # (3n,)
    basis: np.ndarray  # (3n, q) orthonormal columns
    weights: np.ndarray  # (q,) variance fractions, nonincreasing
    kept_variance: float

    @property
    def n_vertices(self) -> int:
        return self.neutral.size // 3

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    def save(self, path, meta: dict | None = None):
        from .io import write_container

        info = {"kind": "blendshape", "n": self.n_vertices, "q": self.n_components,
                "w": self.weights.tolist(), "kept_variance": self.kept_variance, **(meta or {})}
        return write_container(path, {"neutral": self.neutral, "basis": self.basis}, info)

    @classmethod
    def load(cls, path) -> "SpeechBlendshapeModel":
        from .io import read_container

        arrays, meta = read_container(path)
        if meta.get("kind") != "blendshape":
            raise ContractError(f"{path} is not a blendshape model file")
        return cls(arrays["neutral"], arrays["basis"], np.array(meta["w"], dtype=np.float64), meta["kept_variance"])


def build_model(meshes, x_n, keep: float = 0.999, max_components: int = DEFAULT_MAX_COMPONENTS,
                tol: float = 1e-12) -> SpeechBlendshapeModel:
    """PCA of the deformations ``x_t - x_n`` (no further mean removal).

    Keeps the fewest leading components whose variance share reaches ``keep``,
    capped at ``max_components``; components with relative energy below
    ``tol`` are never kept.
    """
    x_n = _flat(x_n, what="neutral")
    X = np.asarray(meshes, dtype=np.float64)
    X = X.reshape(X.shape[0], -1) if X.ndim > 1 else X.reshape(1, -1)
    if X.shape[0] < 2:
        raise ContractError("build_model needs at least two meshes")
    if X.shape[1] != x_n.size:
        raise ContractError(f"meshes have {X.shape[1]} coordinates, neutral has {x_n.size}")
    if not 0.0 < keep <= 1.0 or max_components < 1:
        raise ContractError(f"invalid keep={keep} / max_components={max_components}")
    D = (X - x_n).T
    U, s, _ = np.linalg.svd(D, full_matrices=False)
    energy = s * s
    total = energy.sum()
    if total <= 0.0 or energy[0] <= tol * max(np.abs(X).max(), 1.0) ** 2:
        raise EmptyBasisError("meshes show no deformation from the neutral shape")
    frac = energy / total
    significant = int((frac > tol).sum())
    q = int(np.searchsorted(np.cumsum(frac), keep - 1e-12) + 1)
    q = max(1, min(q, significant, max_components))
    return SpeechBlendshapeModel(x_n, U[:, :q].copy(), frac[:q].copy(), float(frac[:q].sum()))


def encode(mesh, model: SpeechBlendshapeModel) -> np.ndarray:
    """Shape parameters of one mesh (3n,) or a batch (T, 3n)."""
    x = np.asarray(mesh, dtype=np.float64)
    batch = x.ndim == 2 and x.shape[1] == model.neutral.size
    x = x if batch else _flat(x, model.neutral.size)
    if batch and x.shape[1] != model.neutral.size:
        raise ContractError(f"mesh has {x.shape[1]} coordinates, model expects {model.neutral.size}")
    return (x - model.neutral) @ model.basis


def decode(params, model: SpeechBlendshapeModel) -> np.ndarray:
    lam = np.asarray(params, dtype=np.float64)
    if lam.shape[-1] != model.n_components:
        raise ContractError(f"{lam.shape[-1]} parameters for a {model.n_components}-component model")
    return model.neutral + lam @ model.basis.T


def pervertex_error(a, b) -> float:
    """Mean Euclidean distance between corresponding vertices."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size % 3:
        raise ContractError(f"meshes differ in size ({a.size} vs {b.size} coordinates)")
    return float(np.linalg.norm((a - b).reshape(-1, 3), axis=1).mean())


def subspace_angle(U: np.ndarray, V: np.ndarray) -> float:
    """Largest principal angle between the column spans of ``U`` and ``V``."""
    from scipy.linalg import subspace_angles

    return float(np.max(subspace_angles(U, V)))
