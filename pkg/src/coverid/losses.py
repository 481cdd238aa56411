"""Distillation objectives on a batch of student/teacher embedding pairs.

Two terms: a pairwise cosine-distance term pulling each student embedding
toward its teacher, and a geometry term matching the student's batch
cosine-similarity matrix to the teacher's. The combined objective blends
them with weight alpha on the cosine term; at the endpoints the unused
term is neither evaluated nor differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossConfig:
    alpha: float = 0.5
    # "sum" keeps the catalog-sum form of the cosine term; "mean" makes the
    # learning rate batch-size independent.
    reduction: str = "mean"
    # The diagonal of the similarity-difference matrix is identically zero,
    # so this flag cannot change the value; it documents the summation bound.
    include_diagonal: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass
class LossBreakdown:
    total: float
    cos: float
    mse: float


def _as_batch(A: np.ndarray, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    A = np.asarray(A, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if A.ndim != 2 or T.ndim != 2 or A.shape != T.shape:
        raise ValueError(f"expected matching 2-D batches, got {A.shape} and {T.shape}")
    if A.shape[0] < 1:
        raise ValueError("empty batch")
    return A, T


def _row_norms(M: np.ndarray, label: str) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm {label} embedding at row {int(np.argmin(norms))}")
    return norms


def _normalize(M: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    norms = _row_norms(M, label)
    return M / norms[:, None], norms


def loss_cos(A: np.ndarray, T: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Reduction over the batch of 1 - cos(student_i, teacher_i); mean by default."""
    cfg = cfg or LossConfig()
    A, T = _as_batch(A, T)
    Ahat, _ = _normalize(A, "student")
    That, _ = _normalize(T, "teacher")
    terms = 1.0 - np.sum(Ahat * That, axis=1)
    return float(np.sum(terms) if cfg.reduction == "sum" else np.mean(terms))


def _gram(M: np.ndarray) -> np.ndarray:
    """Cosine-similarity matrix of the rows, diagonal pinned to exactly 1."""
    S = M @ M.T
    np.fill_diagonal(S, 1.0)
    return S


def loss_mse(A: np.ndarray, T: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Mean squared difference of the two batch cosine-similarity matrices.

    The diagonal contributes exactly zero either way (both matrices pin it
    to 1), so include_diagonal never changes the value.
    """
    cfg = cfg or LossConfig()
    A, T = _as_batch(A, T)
    Ahat, _ = _normalize(A, "student")
    That, _ = _normalize(T, "teacher")
    E = _gram(Ahat) - _gram(That)
    if not cfg.include_diagonal:
        np.fill_diagonal(E, 0.0)
    return float(np.sum(E * E) / (A.shape[0] ** 2))


def loss_total(A: np.ndarray, T: np.ndarray, cfg: LossConfig) -> LossBreakdown:
    """alpha * cos term + (1 - alpha) * geometry term; endpoints skip the unused term."""
    a = cfg.alpha
    c = loss_cos(A, T, cfg) if a > 0.0 else 0.0
    m = loss_mse(A, T, cfg) if a < 1.0 else 0.0
    return LossBreakdown(total=a * c + (1.0 - a) * m, cos=c, mse=m)


def _cos_grad(Ahat: np.ndarray, That: np.ndarray, norms: np.ndarray, reduction: str) -> np.ndarray:
    cosines = np.sum(Ahat * That, axis=1)
    dA = -(That - cosines[:, None] * Ahat) / norms[:, None]
    return dA if reduction == "sum" else dA / Ahat.shape[0]


def _mse_grad(Ahat: np.ndarray, That: np.ndarray, norms: np.ndarray) -> np.ndarray:
    B = Ahat.shape[0]
    E = _gram(Ahat) - _gram(That)
    np.fill_diagonal(E, 0.0)
    G = (4.0 / (B * B)) * (E @ Ahat)
    # project out the radial component, then undo the row normalization
    return (G - np.sum(G * Ahat, axis=1)[:, None] * Ahat) / norms[:, None]


def loss_and_gradients(A: np.ndarray, T: np.ndarray, cfg: LossConfig) -> tuple[LossBreakdown, np.ndarray]:
    """Combined loss plus its exact gradient with respect to the student batch."""
    A, T = _as_batch(A, T)
    Ahat, norms = _normalize(A, "student")
    That, _ = _normalize(T, "teacher")
    a = cfg.alpha

    c = m = 0.0
    dA = np.zeros_like(A)
    if a > 0.0:
        terms = 1.0 - np.sum(Ahat * That, axis=1)
        c = float(np.sum(terms) if cfg.reduction == "sum" else np.mean(terms))
        dA += a * _cos_grad(Ahat, That, norms, cfg.reduction)
    if a < 1.0:
        E = _gram(Ahat) - _gram(That)
        m = float(np.sum(E * E) / (A.shape[0] ** 2))
        dA += (1.0 - a) * _mse_grad(Ahat, That, norms)
    return LossBreakdown(total=a * c + (1.0 - a) * m, cos=c, mse=m), dA
