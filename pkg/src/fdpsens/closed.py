"""Closed testing under bounded confounding: FDP sensitivity sets.

The closed procedure built from Bonferroni local tests rejects ``H_I`` when
every intersection ``H_J`` with ``J`` containing ``I`` is rejected. With the
assignment probabilities unknown but confined to the Gamma polytope, the
worst-case local test of ``H_J`` fails to reject exactly when one ``rho``
keeps all p-values in ``J`` above ``alpha/|J|`` (a negative min-max zeta
value). The largest unrejected ``I`` inside ``R`` is therefore

    v*(R) = max { |J & R| : H_J not rejected by its worst-case local test },

which is what :func:`v_star` computes by a branch-and-bound over outcome
inclusion and :func:`enumerative_oracle_v` computes by brute force.
"""
from __future__ import annotations

import enum
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .design import MatchedDesign, ScoreMatrix
from .minimax import BOUNDARY_DELTA, MinimaxSolver, chi2_quantile
from .sensitivity import (AssignmentProbabilities, SensitivityValue, _as_gamma, bisect_gamma,
                          moments, worst_case_pvalues)

log = logging.getLogger(__name__)

__all__ = [
    "ClosedTestConfig",
    "Decision",
    "ScreeningVerdict",
    "Diagnostics",
    "FdpReport",
    "ClosedTestSession",
    "SearchError",
    "holm",
    "v_known_rho",
    "screen",
    "candidate_pool",
    "v_star",
    "enumerative_oracle_v",
    "naive_v",
    "gsv",
    "subset_search",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1
ORACLE_MAX_K = 12
SUBSET_CAP = 5000


class SearchError(RuntimeError):
    """Inner-solver failure inside the branch-and-bound, with node context."""


@dataclass(frozen=True)
class ClosedTestConfig:
    alpha: float
    K: int
    gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        object.__setattr__(self, "gamma", _as_gamma(self.gamma))


class Decision(str, enum.Enum):
    REJECT = "Reject"
    FAIL_TO_REJECT = "FailToReject"
    UNDECIDED = "Undecided"


@dataclass(frozen=True)
class ScreeningVerdict:
    decisions: tuple[Decision, ...]
    worst_case_p: np.ndarray
    alpha: float
    gamma: float

    @property
    def K(self) -> int:
        return len(self.decisions)

    @property
    def undecided(self) -> tuple[int, ...]:
        return tuple(k for k, d in enumerate(self.decisions) if d is Decision.UNDECIDED)

    @property
    def decisive(self) -> bool:
        return not self.undecided


@dataclass
class Diagnostics:
    """Work counters for one v* computation.

    ``ip_invocations`` counts the (r, v) integer programs that reached the
    branch-and-bound; ``solver_calls`` counts min-max solves actually run
    (cache and implication hits excluded).
    """

    ip_invocations: int = 0
    nodes_explored: int = 0
    solver_calls: int = 0
    implied: int = 0
    wall_time: float = 0.0

    def merge(self, other: "Diagnostics") -> None:
        self.ip_invocations += other.ip_invocations
        self.nodes_explored += other.nodes_explored
        self.solver_calls += other.solver_calls
        self.implied += other.implied
        self.wall_time += other.wall_time


# -- Holm and the known-rho bound ------------------------------------------------

def holm(pvalues: Sequence[float], alpha: float) -> np.ndarray:
    """Holm step-down rejections (boolean mask); ties broken by index."""
    p = np.asarray(pvalues, dtype=float)
    K = len(p)
    order = np.lexsort((np.arange(K), p))
    rejected = np.zeros(K, dtype=bool)
    for i, k in enumerate(order):
        if p[k] <= alpha / (K - i):
            rejected[k] = True
        else:
            break
    return rejected


def _check_R(R: Iterable[int], K: int) -> tuple[int, ...]:
    R = tuple(sorted({int(k) for k in R}))
    if not R:
        raise ValueError("R must be nonempty")
    if R[0] < 0 or R[-1] >= K:
        raise IndexError(f"subset {R} outside outcomes 0..{K - 1}")
    return R


def known_rho_pvalues(design: MatchedDesign, scores: ScoreMatrix,
                      rho: AssignmentProbabilities) -> np.ndarray:
    """Two-sided normal-approximation p-values of every outcome at a fixed ``rho``."""
    T = scores.q[design.treated].sum(axis=0)
    p = np.empty(scores.n_outcomes)
    for k in range(scores.n_outcomes):
        m = moments(design, scores, k, rho)
        p[k] = stats.chi2.sf((T[k] - m.mu) ** 2 / m.sigma2, 1) if m.sigma2 > 0 else \
            float(T[k] == m.mu)
    return p


def v_known_rho(design: MatchedDesign, scores: ScoreMatrix, R: Iterable[int],
                rho: AssignmentProbabilities, alpha: float) -> int:
    """Upper confidence bound on the number of true nulls in ``R`` when ``rho`` is known."""
    R = _check_R(R, scores.n_outcomes)
    rejected = holm(known_rho_pvalues(design, scores, rho), alpha)
    return int(sum(not rejected[k] for k in R))


# -- screening -------------------------------------------------------------------

def _verdict(p: np.ndarray, alpha: float, gamma: float) -> ScreeningVerdict:
    K = len(p)
    dec = tuple(Decision.REJECT if pk <= alpha / K else
                Decision.FAIL_TO_REJECT if pk > alpha else Decision.UNDECIDED for pk in p)
    return ScreeningVerdict(dec, p, alpha, gamma)


def screen(design: MatchedDesign, scores: ScoreMatrix, config: ClosedTestConfig
           ) -> ScreeningVerdict:
    """Singleton trichotomy from the worst-case p-values."""
    p = worst_case_pvalues(design, scores, config.gamma)
    return _verdict(p, config.alpha, config.gamma)


def candidate_pool(verdict: ScreeningVerdict, R: Iterable[int]) -> tuple[int, tuple[int, ...]]:
    """``(r_max, pool)``: outcomes that can sit in an unrejected intersection.

    An outcome with ``p* <= alpha/K`` has a p-value at most ``alpha/|J|``
    under every ``rho`` and for every ``J`` containing it, so every such
    ``J`` is rejected.
    """
    R = _check_R(R, verdict.K)
    cut = verdict.alpha / verdict.K
    pool = tuple(k for k in range(verdict.K) if verdict.worst_case_p[k] > cut)
    return sum(1 for k in R if k in pool), pool


# -- sessions --------------------------------------------------------------------

class _Facts:
    """Certified local-test outcomes at one gamma, closed under implication.

    Feasible at ``(J, c)`` implies feasible for every subset of ``J`` at any
    ``c' <= c``; infeasible implies infeasible for supersets at ``c' >= c``.
    """

    def __init__(self):
        self.feasible: list[tuple[int, float]] = []
        self.infeasible: list[tuple[int, float]] = []

    def lookup(self, mask: int, c: float):
        for m, cc in self.feasible:
            if cc >= c and mask & m == mask:
                return True
        for m, cc in self.infeasible:
            if cc <= c and mask & m == m:
                return False
        return None

    def add(self, mask: int, c: float, ok: bool):
        (self.feasible if ok else self.infeasible).append((mask, c))


def _mask(ks: Iterable[int]) -> int:
    out = 0
    for k in ks:
        out |= 1 << k
    return out


class ClosedTestSession:
    """Shared state for repeated analyses of one ``(design, scores)`` pair.

    Holds the compiled min-max solver (and its cache), worst-case p-values
    per gamma, and the per-gamma implication store used by the
    branch-and-bound. Everything cached is a deterministic function of its
    key, so results never depend on call order.
    """

    def __init__(self, design: MatchedDesign, scores: ScoreMatrix, alpha: float = 0.05,
                 use_implications: bool = True):
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        self.design = design
        self.scores = scores
        self.alpha = float(alpha)
        self.K = scores.n_outcomes
        self.solver = MinimaxSolver(design, scores)
        self.use_implications = use_implications
        self._p: dict[float, np.ndarray] = {}
        self._facts: dict[float, _Facts] = {}

    def config(self, gamma) -> ClosedTestConfig:
        return ClosedTestConfig(self.alpha, self.K, gamma)

    def pstar(self, gamma) -> np.ndarray:
        gamma = _as_gamma(gamma)
        if gamma not in self._p:
            self._p[gamma] = worst_case_pvalues(self.design, self.scores, gamma)
        return self._p[gamma]

    def screen(self, gamma) -> ScreeningVerdict:
        gamma = _as_gamma(gamma)
        return _verdict(self.pstar(gamma), self.alpha, gamma)

    # local worst-case test of H_J at level c*|J| ---------------------------------

    def local_feasible(self, J: Sequence[int], c: float, gamma: float,
                       diag: Diagnostics | None = None) -> bool:
        """True when some ``rho`` keeps every p-value in ``J`` above ``c``."""
        J = tuple(sorted(J))
        if len(J) == 1:
            # exact worst-case p-value decides singletons
            return bool(self.pstar(gamma)[J[0]] > c)
        mask = _mask(J)
        facts = self._facts.setdefault(gamma, _Facts())
        if self.use_implications:
            known = facts.lookup(mask, c)
            if known is not None:
                if diag is not None:
                    diag.implied += 1
                return known
        before = self.solver.stats["solves"]
        try:
            res = self.solver.minimax(J, c, gamma, stop_on_certificate=True)
        except Exception as exc:  # surfaced with node context
            raise SearchError(f"min-max solve failed for J={J}, c={c:.6g}, "
                              f"gamma={gamma}: {exc}") from exc
        if diag is not None:
            diag.solver_calls += self.solver.stats["solves"] - before
        facts.add(mask, c, res.feasible)
        return res.feasible

    # v* ----------------------------------------------------------------------------

    def v_star(self, R: Iterable[int], gamma) -> tuple[int, Diagnostics]:
        gamma = _as_gamma(gamma)
        R = _check_R(R, self.K)
        t0 = time.perf_counter()
        diag = Diagnostics()
        p = self.pstar(gamma)
        r_max, pool = candidate_pool(self.screen(gamma), R)
        Rset = set(R)
        n_out = sum(1 for k in pool if k not in Rset)
        result = 0
        for r in range(r_max, 0, -1):
            found = False
            for v in range(r, r + n_out + 1):
                c = self.alpha / v
                cand = sorted((k for k in pool if p[k] > c), key=lambda k: (p[k], k))
                if sum(1 for k in cand if k in Rset) < r or len(cand) < v:
                    continue
                diag.ip_invocations += 1
                if self._branch(cand, Rset, r, v, c, gamma, diag):
                    found = True
                    break
            if found:
                result = r
                break
        diag.wall_time = time.perf_counter() - t0
        return result, diag

    def _branch(self, cand, Rset, r, v, c, gamma, diag) -> bool:
        """Is there ``J`` within ``cand``, ``|J| = v``, ``|J & R| >= r``, locally unrejected?"""
        n = len(cand)
        in_R_after = np.zeros(n + 1, dtype=int)
        for i in range(n - 1, -1, -1):
            in_R_after[i] = in_R_after[i + 1] + (cand[i] in Rset)

        def rec(i, chosen, nR):
            diag.nodes_explored += 1
            if len(chosen) == v:
                return nR >= r
            need = v - len(chosen)
            if n - i < need or nR + min(in_R_after[i], need) < r:
                return False
            k = cand[i]
            chosen.append(k)
            if self.local_feasible(chosen, c, gamma, diag) and rec(i + 1, chosen, nR + (k in Rset)):
                return True
            chosen.pop()
            return rec(i + 1, chosen, nR)

        return rec(0, [], 0)

    # oracle ------------------------------------------------------------------------

    def enumerative_v(self, R: Iterable[int], gamma, screening: bool = False
                      ) -> tuple[int, Diagnostics]:
        """Definitional closed testing over every intersection (or every one inside the pool)."""
        gamma = _as_gamma(gamma)
        R = _check_R(R, self.K)
        if self.K > ORACLE_MAX_K:
            raise ValueError(f"enumerative oracle limited to K <= {ORACLE_MAX_K}, got {self.K}")
        t0 = time.perf_counter()
        diag = Diagnostics()
        universe = candidate_pool(self.screen(gamma), R)[1] if screening else tuple(range(self.K))
        unrejected = []
        for size in range(1, len(universe) + 1):
            c = self.alpha / size
            for J in itertools.combinations(universe, size):
                diag.nodes_explored += 1
                if len(J) == 1:
                    ok = bool(self.pstar(gamma)[J[0]] > c)
                else:
                    before = self.solver.stats["solves"]
                    ok = self.solver.minimax(J, c, gamma, stop_on_certificate=True).feasible
                    diag.solver_calls += self.solver.stats["solves"] - before
                if ok:
                    unrejected.append(_mask(J))
        # closed testing: H_I survives iff some unrejected J contains it
        best = 0
        for size in range(len(R), 0, -1):
            for I in itertools.combinations(R, size):
                mI = _mask(I)
                if any(mJ & mI == mI for mJ in unrejected):
                    best = size
                    break
            if best:
                break
        diag.wall_time = time.perf_counter() - t0
        return best, diag

    # naive comparator and sensitivity values -----------------------------------------

    def naive_v(self, R: Iterable[int], gamma) -> int:
        R = _check_R(R, self.K)
        rejected = holm(self.pstar(gamma), self.alpha)
        return int(sum(not rejected[k] for k in R))

    def gsv(self, R: Iterable[int], r: int, gamma_hi: float = 10.0, tol: float = 1e-3,
            method: str = "exact") -> SensitivityValue:
        """Smallest gamma at which ``v*(R)`` exceeds ``r`` (bisection midpoint)."""
        R = _check_R(R, self.K)
        if not 0 <= r <= len(R) - 1:
            raise ValueError(f"r must lie in 0..{len(R) - 1}, got {r}")
        if method == "exact":
            pred = lambda g: self.v_star(R, g)[0] > r  # noqa: E731
        elif method == "naive":
            pred = lambda g: self.naive_v(R, g) > r  # noqa: E731
        else:
            raise ValueError(f"unknown method {method!r}")
        return bisect_gamma(pred, gamma_hi, tol)

    def report(self, R: Iterable[int], gamma, gsv_r: Iterable[int] | None = None,
               gamma_hi: float = 10.0, tol: float = 1e-3) -> "FdpReport":
        gamma = _as_gamma(gamma)
        R = _check_R(R, self.K)
        v, diag = self.v_star(R, gamma)
        nv = self.naive_v(R, gamma)
        rs = range(len(R)) if gsv_r is None else gsv_r
        table = {int(r): self.gsv(R, r, gamma_hi, tol) for r in rs}
        return FdpReport(subset=R, gamma=gamma, alpha=self.alpha, K=self.K, v_star=v,
                         naive_v=nv, gsv_table=table, diagnostics=diag)


# -- reports ---------------------------------------------------------------------

@dataclass
class FdpReport:
    subset: tuple[int, ...]
    gamma: float
    alpha: float
    K: int
    v_star: int
    naive_v: int
    gsv_table: dict[int, SensitivityValue] = field(default_factory=dict)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    labels: tuple[str, ...] | None = None

    @property
    def sensitivity_set(self) -> list[float]:
        """Plausible FDP values: ``{0, 1/|R|, ..., v*/|R|}``."""
        return [i / len(self.subset) for i in range(self.v_star + 1)]

    def invariant_violations(self) -> list[str]:
        out = []
        if self.v_star > self.naive_v:
            out.append(f"dominance: v_star={self.v_star} > naive_v={self.naive_v}")
        g = [self.gsv_table[r].gamma for r in sorted(self.gsv_table)]
        if any(b < a for a, b in zip(g, g[1:])):
            out.append(f"gsv table not nondecreasing in r: {g}")
        if not 0 <= self.v_star <= len(self.subset):
            out.append("v_star outside [0, |R|]")
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "subset": list(self.subset),
            "labels": list(self.labels) if self.labels else None,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "K": self.K,
            "v_star": self.v_star,
            "sensitivity_set": self.sensitivity_set,
            "naive_v": self.naive_v,
            "gsv_table": {str(r): {"gamma": sv.gamma, "lower": sv.lower, "upper": sv.upper,
                                   "saturated": sv.saturated}
                          for r, sv in sorted(self.gsv_table.items())},
            "diagnostics": asdict(self.diagnostics),
        }

    def to_json(self, provenance: dict | None = None, **kw) -> str:
        doc = self.to_dict()
        if provenance is not None:
            doc = {"provenance": provenance, **doc}
        return json.dumps(doc, **kw)


def provenance(config: dict, seed: int | None = None) -> dict:
    """Provenance header: config hash, seed, package version."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return {"config_sha256": hashlib.sha256(blob).hexdigest(), "seed": seed,
            "version": __version__, "schema_version": SCHEMA_VERSION}


# -- functional interface --------------------------------------------------------

def _session(design, scores, config: ClosedTestConfig, session=None) -> ClosedTestSession:
    if session is not None:
        if session.alpha != config.alpha:
            raise ValueError("session alpha differs from config alpha")
        return session
    if scores.n_outcomes != config.K:
        raise ValueError(f"config K={config.K} but scores have {scores.n_outcomes} outcomes")
    return ClosedTestSession(design, scores, config.alpha)


def v_star(design: MatchedDesign, scores: ScoreMatrix, R: Iterable[int],
           config: ClosedTestConfig, session: ClosedTestSession | None = None
           ) -> tuple[int, Diagnostics]:
    """Worst-case upper bound on the number of true nulls in ``R``."""
    return _session(design, scores, config, session).v_star(R, config.gamma)


def enumerative_oracle_v(design: MatchedDesign, scores: ScoreMatrix, R: Iterable[int],
                         config: ClosedTestConfig, screening: bool = False,
                         session: ClosedTestSession | None = None) -> int:
    return _session(design, scores, config, session).enumerative_v(
        R, config.gamma, screening)[0]


def naive_v(design: MatchedDesign, scores: ScoreMatrix, R: Iterable[int],
            config: ClosedTestConfig) -> int:
    """Holm on the separately maximised p-values."""
    return _session(design, scores, config).naive_v(R, config.gamma)


def gsv(design: MatchedDesign, scores: ScoreMatrix, R: Iterable[int], r: int,
        alpha: float = 0.05, gamma_hi: float = 10.0, tol: float = 1e-3,
        method: str = "exact", session: ClosedTestSession | None = None) -> SensitivityValue:
    """Generalised sensitivity value: the first gamma with ``v*(R) > r``."""
    s = session or ClosedTestSession(design, scores, alpha)
    return s.gsv(R, r, gamma_hi, tol, method)


def subset_search(design: MatchedDesign, scores: ScoreMatrix, subset_size: int, r: int,
                  alpha: float = 0.05, prefilter: Iterable[int] | None = None,
                  cap: int = SUBSET_CAP, gamma_hi: float = 10.0, tol: float = 1e-3,
                  method: str = "exact", session: ClosedTestSession | None = None
                  ) -> list[tuple[tuple[int, ...], SensitivityValue]]:
    """Rank every subset of the given size by its generalised sensitivity value.

    Sorted by decreasing value; ties broken lexicographically by index set.
    """
    universe = sorted(set(prefilter)) if prefilter is not None else list(range(scores.n_outcomes))
    n = math.comb(len(universe), subset_size)
    if n > cap:
        raise ValueError(f"{n} subsets of size {subset_size} exceed the cap of {cap}; "
                         "restrict candidates with a prefilter (e.g. outcomes with p <= 0.05 "
                         "at gamma = 1)")
    s = session or ClosedTestSession(design, scores, alpha)
    out = [(R, s.gsv(R, r, gamma_hi, tol, method))
           for R in itertools.combinations(universe, subset_size)]
    out.sort(key=lambda t: (-t[1].gamma, t[0]))
    return out
