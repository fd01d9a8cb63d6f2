"""Mean absolute correlation between true latents and learned features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    mcc: float
    assignment: np.ndarray  # assignment[i] = feature column matched to latent i
    per_component_abs_corr: np.ndarray
    n_test: int


def correlation_matrix(S, H) -> np.ndarray:
    """Pearson correlation of every column of ``S`` with every column of ``H``."""
    S = np.asarray(S, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if S.ndim != 2 or H.ndim != 2 or S.shape[0] != H.shape[0]:
        raise ValueError(f"need two matrices with the same row count, got {S.shape} and {H.shape}")
    if S.shape[0] < 3:
        raise ValueError("need at least 3 samples")
    Sc = S - S.mean(axis=0)
    Hc = H - H.mean(axis=0)
    s_norm = np.sqrt(np.einsum("ij,ij->j", Sc, Sc))
    h_norm = np.sqrt(np.einsum("ij,ij->j", Hc, Hc))
    for label, norms, scale in (("S", s_norm, S), ("H", h_norm, H)):
        tol = 1e-12 * max(1.0, float(np.abs(scale).max()))
        bad = np.flatnonzero(norms <= tol * np.sqrt(S.shape[0]))
        if bad.size:
            raise ZeroVarianceError(f"column {int(bad[0])} of {label} has zero variance")
    C = (Sc.T @ Hc) / np.outer(s_norm, h_norm)
    return np.clip(C, -1.0, 1.0)


def match_components(abs_corr) -> tuple[np.ndarray, np.ndarray]:
    """Maximum-weight assignment on a square |correlation| matrix.

    Returns ``(assignment, matched)`` with ``matched[i] = abs_corr[i, assignment[i]]``.
    """
    C = np.asarray(abs_corr, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"need a square matrix, got {C.shape}")
    rows, cols = linear_sum_assignment(C, maximize=True)
    return cols.astype(np.int64), C[rows, cols]


def mean_abs_corr(S, H) -> EvalReport:
    """Match columns by maximum total |correlation| and average the matches."""
    C = np.abs(correlation_matrix(S, H))
    if C.shape[0] != C.shape[1]:
        raise ValueError(f"S and H must have the same number of columns, got {C.shape}")
    assignment, matched = match_components(C)
    return EvalReport(float(matched.mean()), assignment, matched, int(np.shape(S)[0]))
