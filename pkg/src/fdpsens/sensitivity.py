"""The Gamma sensitivity model for matched designs.

Within stratum ``i`` the treatment probabilities ``rho_i`` lie on the
simplex and no two of them differ by more than a factor ``gamma``. The set
of such vectors is a polytope whose vertices are ``rho_ij ∝ gamma**u_ij``
for binary ``u``.

Worst-case p-values use the chi-square(1) deviate ``(T - mu)^2 / sigma^2``.
Outside the interval of attainable expectations the deviate is minimised
stratum by stratum: take the expectation-extremal vertex of each stratum,
breaking ties by largest variance. Because the deviate is pseudoconvex on
either side of the interval, a first-order check certifies the result;
when the check fails the deviate is minimised exactly with the convex
solver in :mod:`fdpsens.minimax`.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import stats

from .design import MatchedDesign, ScoreMatrix, sum_statistic

__all__ = [
    "GammaBound",
    "AssignmentProbabilities",
    "MomentPair",
    "WorstCase",
    "SensitivityValue",
    "CapacityError",
    "DegenerateOutcomeError",
    "uniform_assignment",
    "membership_check",
    "vertex_assignment",
    "vertex_table",
    "moments",
    "exact_tail_probability",
    "normal_pvalue",
    "worst_case_deviate",
    "worst_case_single_pvalue",
    "worst_case_pvalues",
    "single_sensitivity_value",
]

log = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-9
ENUMERATION_LIMIT = 10**6
_FULL_VERTEX_MAX_N = 10


class CapacityError(RuntimeError):
    """Raised when exact enumeration of assignments would be too large."""


class DegenerateOutcomeError(ValueError):
    """Raised when an outcome's scores are constant within every stratum."""


@dataclass(frozen=True)
class GammaBound:
    gamma: float

    def __post_init__(self):
        g = float(self.gamma)
        if not math.isfinite(g) or g < 1.0:
            raise ValueError(f"gamma must be finite and >= 1, got {self.gamma!r}")
        object.__setattr__(self, "gamma", g)

    def __float__(self):
        return self.gamma


def _as_gamma(gamma) -> float:
    return GammaBound(float(gamma)).gamma


@dataclass(frozen=True)
class AssignmentProbabilities:
    """Per-unit treatment probabilities ``rho`` in design unit order."""

    design: MatchedDesign
    rho: np.ndarray

    def __post_init__(self):
        r = np.array(self.rho, dtype=float)
        if r.shape != (self.design.n_units,):
            raise ValueError(f"rho has shape {r.shape}, expected ({self.design.n_units},)")
        r.setflags(write=False)
        object.__setattr__(self, "rho", r)

    def stratum(self, i: int) -> np.ndarray:
        o = self.design.offsets
        return self.rho[o[i]:o[i + 1]]

    def per_stratum(self) -> list[np.ndarray]:
        return [self.stratum(i) for i in range(self.design.n_strata)]


@dataclass(frozen=True)
class MomentPair:
    mu: float
    sigma2: float


def uniform_assignment(design: MatchedDesign) -> AssignmentProbabilities:
    return AssignmentProbabilities(design, 1.0 / design.sizes[design.stratum_index])


def membership_check(rho: AssignmentProbabilities, gamma, tol: float = MEMBERSHIP_TOL) -> bool:
    """True iff ``rho`` is nonnegative, sums to one per stratum and respects
    the odds bound ``rho_ij <= gamma * rho_ij'``, all within ``tol``."""
    gamma = _as_gamma(gamma)
    design = rho.design
    r = rho.rho
    if r.shape != (design.n_units,):
        raise ValueError("rho does not match the design")
    if np.any(r < -tol):
        return False
    sums = np.add.reduceat(r, design.offsets[:-1])
    if np.any(np.abs(sums - 1.0) > tol):
        return False
    for g in design.groups:
        block = r[g.units]
        if np.any(block.max(axis=1) > gamma * block.min(axis=1) + tol):
            return False
    return True


def vertex_assignment(n: int, gamma, u) -> np.ndarray:
    """``rho_j = gamma**u_j / sum_l gamma**u_l``."""
    gamma = _as_gamma(gamma)
    u = np.asarray(u)
    if u.shape != (n,):
        raise ValueError(f"u must have length {n}")
    w = np.where(u.astype(bool), gamma, 1.0)
    return w / w.sum()


def vertex_table(n: int, gamma) -> np.ndarray:
    """All distinct vertices of the size-``n`` stratum polytope, one per row
    (the uniform vector appears once)."""
    gamma = _as_gamma(gamma)
    us = np.array(list(itertools.product((0, 1), repeat=n)), dtype=float)
    us = us[(us.sum(axis=1) > 0) & (us.sum(axis=1) < n)]
    w = np.where(us > 0, gamma, 1.0)
    table = np.vstack([np.full(n, 1.0 / n), w / w.sum(axis=1, keepdims=True)])
    return table


def _threshold_vertices(c: np.ndarray, gamma: float) -> np.ndarray:
    """For each row of ``c`` the vertices putting weight gamma on the ``m``
    largest entries, ``m = 0..n-1``; shape ``(..., n, n)`` (last axis units)."""
    n = c.shape[-1]
    ranks = np.argsort(np.argsort(-c, axis=-1, kind="stable"), axis=-1, kind="stable")
    m = np.arange(n)
    up = ranks[..., None, :] < m[:, None]
    w = np.where(up, gamma, 1.0)
    return w / w.sum(axis=-1, keepdims=True)


def _grouped_scores(design: MatchedDesign, q: np.ndarray):
    """Yield ``(group, Q)`` with ``Q[k, i, j]`` the score of unit ``j`` of
    stratum ``i`` of the group for column ``k``."""
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q[:, None]
    for g in design.groups:
        yield g, np.moveaxis(q[g.units], -1, 0)


def moments(design: MatchedDesign, scores: ScoreMatrix, k: int,
            rho: AssignmentProbabilities) -> MomentPair:
    """Expectation and variance of ``T_k`` when stratum ``i`` treats unit
    ``j`` with probability ``rho_ij`` independently across strata."""
    if rho.design is not design and rho.rho.shape != (design.n_units,):
        raise ValueError("rho does not match the design")
    qk = scores.q[:, k]
    r = rho.rho
    m1 = np.add.reduceat(r * qk, design.offsets[:-1])
    m2 = np.add.reduceat(r * qk * qk, design.offsets[:-1])
    mu = float(m1.sum())
    sigma2 = float(np.sum(np.maximum(m2 - m1 * m1, 0.0)))
    return MomentPair(mu, sigma2)


def exact_tail_probability(design: MatchedDesign, scores: ScoreMatrix, k: int,
                           rho: AssignmentProbabilities, a: float,
                           side: Literal["upper", "two-sided"] = "upper") -> float:
    """``P_rho(T_k >= a)`` by enumerating every admissible assignment.

    ``side="two-sided"`` returns ``P_rho(|T_k - mu| >= |a - mu|)``.
    """
    if design.n_assignments > ENUMERATION_LIMIT:
        raise CapacityError(
            f"|Omega| = {design.n_assignments} exceeds {ENUMERATION_LIMIT}; "
            "use the normal approximation instead")
    qk = scores.q[:, k]
    vals = np.zeros(1)
    probs = np.ones(1)
    for i in range(design.n_strata):
        sl = slice(design.offsets[i], design.offsets[i + 1])
        vals = (vals[:, None] + qk[sl][None, :]).ravel()
        probs = (probs[:, None] * rho.rho[sl][None, :]).ravel()
    scale = max(1.0, float(np.abs(qk).sum()))
    eps = 1e-12 * scale
    if side == "upper":
        return float(min(1.0, probs[vals >= a - eps].sum()))
    if side == "two-sided":
        mu = float(probs @ vals)
        return float(min(1.0, probs[np.abs(vals - mu) >= abs(a - mu) - eps].sum()))
    raise ValueError(f"unknown side {side!r}")


def normal_pvalue(t: float, mu: float, sigma2: float) -> float:
    """Two-sided p-value from the chi-square(1) deviate ``(t-mu)^2/sigma2``."""
    dev = t - mu
    if sigma2 <= 0:
        return 1.0 if dev == 0 else 0.0
    return float(stats.chi2.sf(dev * dev / sigma2, 1))


@dataclass(frozen=True)
class WorstCase:
    """Details of a worst-case deviate computation for one outcome."""

    statistic: float
    mu_min: float
    mu_max: float
    deviate: float
    mu_star: float
    sigma2_star: float
    side: Literal["inside", "upper", "lower"]
    refined: bool

    @property
    def pvalue(self) -> float:
        if self.side == "inside":
            return 1.0
        return float(stats.chi2.sf(self.deviate, 1))


def _extremal_moments(design: MatchedDesign, q: np.ndarray, gamma: float):
    """Per column of ``q``: (mu_max, var_at_max, mu_min, var_at_min) summed
    over strata, plus the chosen per-unit probabilities for each side."""
    K = q.shape[1]
    out = np.zeros((4, K))
    rho_hi = np.empty((K, design.n_units))
    rho_lo = np.empty((K, design.n_units))
    for g, Q in _grouped_scores(design, q):
        n = g.n
        if n <= _FULL_VERTEX_MAX_N:
            V = vertex_table(n, gamma)                       # (nv, n)
            M = Q @ V.T                                       # (K, B, nv)
            S = (Q * Q) @ V.T - M * M
            Vh = Vl = V
        else:
            Vh = _threshold_vertices(Q, gamma)                # (K, B, n, n)
            Vl = _threshold_vertices(-Q, gamma)
            M = np.einsum("kbj,kbmj->kbm", Q, Vh)
            S = np.einsum("kbj,kbmj->kbm", Q * Q, Vh) - M * M
        for side, sign, Vs in ((0, 1.0, Vh), (2, -1.0, Vl)):
            if Vs is not Vh:
                M = np.einsum("kbj,kbmj->kbm", Q, Vs)
                S = np.einsum("kbj,kbmj->kbm", Q * Q, Vs) - M * M
            sm = sign * M
            best = sm.max(axis=-1, keepdims=True)
            tol = 1e-12 * (1.0 + np.abs(best))
            S_masked = np.where(sm >= best - tol, S, -np.inf)
            pick = S_masked.argmax(axis=-1)                   # (K, B)
            mu = np.take_along_axis(M, pick[..., None], -1)[..., 0]
            var = np.take_along_axis(S, pick[..., None], -1)[..., 0]
            out[side] += mu.sum(axis=1)
            out[side + 1] += np.maximum(var, 0.0).sum(axis=1)
            if Vs.ndim == 2:
                chosen = Vs[pick]                             # (K, B, n)
            else:
                chosen = np.take_along_axis(Vs, pick[..., None, None], 2)[:, :, 0, :]
            target = rho_hi if side == 0 else rho_lo
            target[:, g.units] = chosen
    return out, rho_hi, rho_lo


def _vertex_is_optimal(design, qk, rho, e, sigma2, gamma) -> bool:
    """First-order check that ``rho`` minimises ``e^2/sigma2`` over the polytope."""
    m1 = np.add.reduceat(rho * qk, design.offsets[:-1])[design.stratum_index]
    grad = -2.0 * e * sigma2 * qk - e * e * (qk * qk - 2.0 * m1 * qk)
    scale = np.abs(grad).max() + 1e-300
    for g in design.groups:
        G = grad[g.units] / scale
        here = np.sum(G * rho[g.units], axis=1)
        verts = _threshold_vertices(-G, gamma)                # low-first on G
        best = np.einsum("bj,bmj->bm", G, verts).min(axis=1)
        if np.any(here > best + 1e-10):
            return False
    return True


def worst_case_deviate(design: MatchedDesign, scores: ScoreMatrix, k: int, gamma,
                       refine: bool = True) -> WorstCase:
    """Smallest chi-square(1) deviate of ``T_k`` over the Gamma polytope."""
    gamma = _as_gamma(gamma)
    return _worst_cases(design, scores.q[:, [k]], np.array([sum_statistic(design, scores, k)]),
                        gamma, refine)[0]


def _worst_cases(design, q, T, gamma, refine=True) -> list[WorstCase]:
    ext, rho_hi, rho_lo = _extremal_moments(design, q, gamma)
    out = []
    for k in range(q.shape[1]):
        mu_hi, v_hi, mu_lo, v_lo = ext[:, k]
        t = float(T[k])
        scale = 1e-12 * (1.0 + abs(t) + abs(mu_hi) + abs(mu_lo))
        if v_hi <= 0 and v_lo <= 0 and mu_hi - mu_lo <= scale:
            raise DegenerateOutcomeError(f"outcome {k}: scores are constant within every stratum")
        if mu_lo - scale <= t <= mu_hi + scale:
            out.append(WorstCase(t, mu_lo, mu_hi, 0.0, t, float("nan"), "inside", False))
            continue
        if t > mu_hi:
            side, mu_s, v_s, rho_s = "upper", mu_hi, v_hi, rho_hi[k]
        else:
            side, mu_s, v_s, rho_s = "lower", mu_lo, v_lo, rho_lo[k]
        e = t - mu_s
        dev = math.inf if v_s <= 0 else e * e / v_s
        refined = False
        if refine and gamma > 1 and math.isfinite(dev) and not _vertex_is_optimal(
                design, q[:, k], rho_s, e, v_s, gamma):
            from .minimax import minimize_deviate
            new_dev, mu_s, v_s = minimize_deviate(design, q[:, k], t, gamma, start=dev)
            log.debug("outcome %d: separable deviate %.6g refined to %.6g", k, dev, new_dev)
            dev, refined = new_dev, True
        out.append(WorstCase(t, mu_lo, mu_hi, float(dev), float(mu_s), float(v_s), side, refined))
    return out


def worst_case_single_pvalue(design: MatchedDesign, scores: ScoreMatrix, k: int, gamma) -> float:
    """``p*_{k,gamma}``: the largest two-sided p-value over the polytope."""
    return worst_case_deviate(design, scores, k, gamma).pvalue


def worst_case_pvalues(design: MatchedDesign, scores: ScoreMatrix, gamma) -> np.ndarray:
    """Worst-case p-values for every outcome at once."""
    gamma = _as_gamma(gamma)
    T = scores.q[design.treated].sum(axis=0)
    return np.array([w.pvalue for w in _worst_cases(design, scores.q, T, gamma)])


@dataclass(frozen=True)
class SensitivityValue:
    """Result of a bisection for a changepoint in gamma.

    ``gamma`` is the bracket midpoint; the predicate is false at ``lower``
    and true at ``upper``. ``saturated`` means the predicate never became
    true on ``[1, gamma_hi]``; then ``gamma == gamma_hi``.
    """

    gamma: float
    lower: float
    upper: float
    saturated: bool = False

    def __float__(self):
        return self.gamma


def bisect_gamma(predicate, gamma_hi: float = 10.0, tol: float = 1e-3) -> SensitivityValue:
    """Smallest gamma in ``[1, gamma_hi]`` where a monotone predicate turns true."""
    if predicate(1.0):
        return SensitivityValue(1.0, 1.0, 1.0)
    if not predicate(gamma_hi):
        return SensitivityValue(gamma_hi, gamma_hi, gamma_hi, saturated=True)
    lo, hi = 1.0, float(gamma_hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if predicate(mid):
            hi = mid
        else:
            lo = mid
    return SensitivityValue(0.5 * (lo + hi), lo, hi)


def single_sensitivity_value(design: MatchedDesign, scores: ScoreMatrix, k: int,
                             alpha: float = 0.05, gamma_hi: float = 10.0,
                             tol: float = 1e-3) -> SensitivityValue:
    """Smallest gamma at which the worst-case p-value of outcome ``k`` exceeds ``alpha``."""
    return bisect_gamma(lambda g: worst_case_single_pvalue(design, scores, k, g) > alpha,
                        gamma_hi, tol)
