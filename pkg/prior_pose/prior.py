"""Shape-prior adaptation: C = M (P_prior + D) plus the deformation/matching regularizers."""

from typing import Tuple

import numpy as np
from scipy.special import log_softmax, softmax, xlogy

from .core.error_handling import CardinalityMismatchError, SimplexViolationError

SIMPLEX_TOLERANCE = 1e-9


def deform(prior: np.ndarray, d: np.ndarray) -> np.ndarray:
    prior = np.asarray(prior, dtype=float).reshape(-1, 3)
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    if prior.shape != d.shape:
        raise CardinalityMismatchError("Deformation field does not match the prior", details={"prior": len(prior), "deformation": len(d)})
    return prior + d


def check_simplex(m: np.ndarray, tol: float = SIMPLEX_TOLERANCE) -> None:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise SimplexViolationError("Matching matrix must be a finite 2-D array")
    if np.any(m < -tol):
        raise SimplexViolationError("Matching matrix has negative entries", details={"min": float(m.min())})
    row_error = np.abs(m.sum(axis=1) - 1.0)
    if np.any(row_error > tol):
        raise SimplexViolationError("Matching rows do not sum to 1", details={"row": int(row_error.argmax()), "error": float(row_error.max())})


def reconstruct_coordinates(prior: np.ndarray, d: np.ndarray, m: np.ndarray) -> np.ndarray:
    deformed = deform(prior, d)
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[1] != len(deformed):
        raise CardinalityMismatchError("Matching matrix columns do not match the prior", details={"columns": m.shape[-1], "prior": len(deformed)})
    check_simplex(m)
    return m @ deformed


def matching_from_logits(logits: np.ndarray) -> np.ndarray:
    """Row-wise normalized exponential; always on the simplex."""
    return softmax(np.asarray(logits, dtype=float), axis=1)


def softmax_vjp(m: np.ndarray, grad_m: np.ndarray) -> np.ndarray:
    return m * (grad_m - np.sum(m * grad_m, axis=1, keepdims=True))


def deformation_regularizer(d: np.ndarray) -> float:
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    return float(np.mean(np.sum(d * d, axis=1)))


def deformation_regularizer_and_grad(d: np.ndarray) -> Tuple[float, np.ndarray]:
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    return deformation_regularizer(d), 2.0 * d / len(d)


def matching_regularizer(m: np.ndarray) -> float:
    """Mean row entropy; 0 for one-hot rows, ln(k) for rows uniform over k entries."""
    m = np.asarray(m, dtype=float)
    return float(np.mean(-xlogy(m, m).sum(axis=1)))


def matching_regularizer_logits_and_grad(logits: np.ndarray) -> Tuple[float, np.ndarray]:
    """Entropy regularizer evaluated on softmax(logits), with its gradient on the logits."""
    log_m = log_softmax(np.asarray(logits, dtype=float), axis=1)
    m = np.exp(log_m)
    entropy = -np.sum(m * log_m, axis=1, keepdims=True)
    grad = -m * (log_m + entropy) / len(m)
    return float(entropy.mean()), grad
