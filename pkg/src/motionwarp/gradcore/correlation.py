"""Total canonical correlation between two feature matrices and its subgradient.

For views ``H1, H2`` (d x T) the objective is the nuclear norm of the whitened
cross-covariance ``K = S11^-1/2 S12 S22^-1/2`` where ``Sij = Hi C Hj^T / (T-1)``
and ``C`` centres over time.  The returned gradients are exact wherever the
singular values of ``K`` are distinct and nonzero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConditioningError, ContractError
from .tensor import Tensor, _node, as_tensor

DEFAULT_RIDGE = 1e-4


@dataclass
class CorrelationWitness:
    sigma11: np.ndarray
    sigma22: np.ndarray
    sigma12: np.ndarray
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    ridge: float


def _inv_sqrt(sigma: np.ndarray, name: str) -> np.ndarray:
    evals, evecs = np.linalg.eigh(sigma)
    top = max(float(evals[-1]), 0.0)
    if evals[0] <= 1e-12 * top or evals[0] <= 0.0:
        raise ConditioningError(f"{name} is singular", float(evals[0]))
    return (evecs / np.sqrt(evals)) @ evecs.T


def correlation_objective(H1, H2, ridge: float = DEFAULT_RIDGE):
    """Return ``(value, dH1, dH2, witness)``."""
    H1 = np.asarray(H1, dtype=np.float64)
    H2 = np.asarray(H2, dtype=np.float64)
    if H1.ndim != 2 or H1.shape != H2.shape:
        raise ContractError(f"correlation objective needs two d x T views of equal shape, got {H1.shape}, {H2.shape}")
    d, T = H1.shape
    if T < 2 or d < 1:
        raise ContractError(f"correlation objective needs d >= 1 and T >= 2, got {H1.shape}")
    if ridge < 0:
        raise ContractError(f"ridge must be nonnegative, got {ridge}")
    H1c = H1 - H1.mean(axis=1, keepdims=True)
    H2c = H2 - H2.mean(axis=1, keepdims=True)
    n = 1.0 / (T - 1)
    s11 = n * H1c @ H1c.T + ridge * np.eye(d)
    s22 = n * H2c @ H2c.T + ridge * np.eye(d)
    s12 = n * H1c @ H2c.T
    r11 = _inv_sqrt(s11, "view-1 covariance")
    r22 = _inv_sqrt(s22, "view-2 covariance")
    K = r11 @ s12 @ r22
    U, S, Vt = np.linalg.svd(K)
    V = Vt.T
    value = float(S.sum())

    a = r11 @ U
    b = r22 @ V
    l_plus = a @ b.T @ H2c
    l_minus = (a * S) @ a.T @ H1c
    dH1 = n * (l_plus - l_minus)
    m_plus = b @ a.T @ H1c
    m_minus = (b * S) @ b.T @ H2c
    dH2 = n * (m_plus - m_minus)
    witness = CorrelationWitness(s11, s22, s12, U, S, V, ridge)
    return value, dH1, dH2, witness


def nuclear_correlation(H1, H2, ridge: float = DEFAULT_RIDGE) -> Tensor:
    """Differentiable scalar node wrapping :func:`correlation_objective`."""
    H1, H2 = as_tensor(H1), as_tensor(H2)
    value, d1, d2, _ = correlation_objective(H1.data, H2.data, ridge)
    return _node(np.asarray(value), (H1, H2), lambda g: (g * d1, g * d2), "correlation-objective")

