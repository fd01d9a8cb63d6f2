"""Numeric check of the link-state conditions for identifiability.

For the bilinear link model ``log p(w | s, s') = sum_i alpha[w, i] s_i s'_i -
log Z`` the mixed second derivative of the log-potential difference between
states ``w`` and a baseline ``w_bar`` is the constant vector
``alpha[w] - alpha[w_bar]``. Identifiability needs ``d_s`` such vectors that
are linearly independent with no zero entries, which in turn needs at least
``d_s + 1`` distinct link states.

State 0 is a reference state with zero potential. Including it (the default)
gives K + 1 states for K coefficient rows, so ``K >= d_s`` is the threshold.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import qr

from .synthdata import LinkModel

RANK_RTOL = 1e-9


@dataclass(frozen=True)
class ConditionReport:
    d_s: int
    K: int
    d2_ok: bool
    d3_ok: bool
    d3_rank: int
    baseline_state: int
    chosen_states: tuple[int, ...]
    nonzero_ok: bool
    margin: float
    evidence: str = "exact"
    per_baseline_rank: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"d_s = {self.d_s}",
            f"K = {self.K}",
            f"d2_ok = {str(self.d2_ok).lower()}",
            f"d3_ok = {str(self.d3_ok).lower()}",
            f"d3_rank = {self.d3_rank}",
            f"baseline_state = {self.baseline_state}",
            f"chosen_states = {','.join(map(str, self.chosen_states)) or '-'}",
            f"nonzero_ok = {str(self.nonzero_ok).lower()}",
            f"margin = {self.margin:.6g}",
            f"evidence = {self.evidence}",
        ]
        return "\n".join(lines)


def _check_state(model: LinkModel, w: int, allow_reference: bool):
    lo = 0 if allow_reference else 1
    if not lo <= w <= model.K:
        raise ValueError(f"link state {w} outside {lo}..{model.K}")


def _coefficients(model: LinkModel, w: int) -> np.ndarray:
    return np.zeros(model.d_s) if w == 0 else model.alpha[w - 1]


def d_vector(model: LinkModel, w: int, w_bar: int, *, allow_reference: bool = True) -> np.ndarray:
    """Cross-derivative vector of state ``w`` against baseline ``w_bar``.

    Constant in (s, s') for the bilinear model. State 0 is the zero-potential
    reference state when ``allow_reference`` is set.
    """
    _check_state(model, w, allow_reference)
    _check_state(model, w_bar, allow_reference)
    return _coefficients(model, w) - _coefficients(model, w_bar)


def numeric_rank(M, rtol: float = RANK_RTOL) -> int:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int((sv > rtol * sv[0]).sum())


def _kth_singular(M, k: int) -> float:
    if M.shape[0] < k or k == 0:
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False)[k - 1])


def _independent(M, d: int) -> bool:
    return M.shape[0] == d and numeric_rank(M) == d


def check_identifiability(model: LinkModel, *, include_reference: bool = True,
                          cross_derivative: Callable | None = None,
                          probes: Sequence | None = None,
                          max_subsets: int = 5000) -> ConditionReport:
    """Evaluate the link-state count and d-vector conditions for ``model``.

    By default the d-vectors come from the coefficient table. Pass
    ``cross_derivative(w, s, s_bar) -> (d_s,)`` and a list of ``(s, s_bar)``
    probe points to check a non-bilinear model; the result is then labelled
    ``sampled`` since finitely many probes cannot cover every ``s``.
    """
    d, K = model.d_s, model.K
    states = list(range(0 if include_reference else 1, K + 1))
    if cross_derivative is None:
        probes = [None]
        evidence = "exact"

        def cross(w, probe):
            return _coefficients(model, w)
    else:
        if not probes:
            raise ValueError("probes are required with a cross_derivative callback")
        evidence = "sampled"

        def cross(w, probe):
            s, s_bar = probe
            if w == 0:
                return np.zeros(d)
            return np.asarray(cross_derivative(w, np.asarray(s), np.asarray(s_bar)), dtype=np.float64)

    table = np.array([[cross(w, pr) for w in states] for pr in probes])  # (probes, states, d)
    scale_ = max(float(np.abs(table).max()), 1.0)
    zero_tol = RANK_RTOL * scale_

    best = None
    ranks = {}
    for b_idx, w_bar in enumerate(states):
        others = [k for k in range(len(states)) if k != b_idx]
        D = table[:, others, :] - table[:, b_idx:b_idx + 1, :]  # (probes, others, d)
        ranks[w_bar] = min(numeric_rank(D[p]) for p in range(len(probes))) if others else 0
        nonzero = np.all(np.abs(D) > zero_tol, axis=(0, 2))
        candidates = [others[k] for k in np.flatnonzero(nonzero)]
        chosen = _choose_subset(table, b_idx, candidates, d, max_subsets)
        if chosen is not None:
            M = table[0, chosen, :] - table[0, b_idx, :]
            margin = min(_kth_singular(table[p, chosen, :] - table[p, b_idx, :], d)
                         for p in range(len(probes)))
            cand = (True, margin, w_bar, tuple(states[c] for c in chosen), ranks[w_bar], M)
        else:
            margin = _kth_singular(D[0], d)
            cand = (False, margin, w_bar, (), ranks[w_bar], None)
        if best is None or (cand[0], cand[4], cand[1]) > (best[0], best[4], best[1]):
            best = cand
    ok, margin, w_bar, chosen_states, rank, _ = best
    return ConditionReport(
        d_s=d, K=K, d2_ok=K >= d, d3_ok=ok, d3_rank=rank, baseline_state=w_bar,
        chosen_states=chosen_states, nonzero_ok=ok, margin=margin, evidence=evidence,
        per_baseline_rank=ranks,
    )


def _choose_subset(table, b_idx, candidates, d, max_subsets):
    """Pick ``d`` candidate states whose d-vectors are independent at every probe."""
    if len(candidates) < d:
        return None
    diffs = table[:, candidates, :] - table[:, b_idx:b_idx + 1, :]

    def works(idx):
        return all(_independent(diffs[p][list(idx)], d) for p in range(diffs.shape[0]))

    # pivoted QR on the first probe proposes a well-conditioned subset
    _, _, piv = qr(diffs[0].T, pivoting=True, mode="economic")
    first = tuple(sorted(piv[:d]))
    if works(first):
        return [candidates[k] for k in first]
    for count, idx in enumerate(itertools.combinations(range(len(candidates)), d)):
        if count >= max_subsets:
            break
        if works(idx):
            return [candidates[k] for k in idx]
    return None
