"""Worst-case local tests: the zeta statistic and its min-max over the polytope.

For outcome ``k`` and critical level ``c``,

    zeta_k(rho; c) = (T_k - mu_k(rho))^2 - chi2_{1,1-c} * sigma2_k(rho)

is negative exactly when the normal-approximation p-value under ``rho``
exceeds ``c``. ``mu_k`` is affine and ``sigma2_k`` concave in ``rho``, so
each ``zeta_k`` is a convex quadratic and ``min_rho max_{k in J} zeta_k`` is
a convex program. A negative optimum means some single ``rho`` keeps every
p-value in ``J`` above ``c``: the Bonferroni local test of ``H_J`` at level
``c * |J|`` is not rejected.

The solver is a log-barrier interior-point method on the epigraph form
``min y s.t. zeta_k <= y``, written in reduced coordinates (the last unit of
each stratum is eliminated through the simplex constraint). The Newton
matrix is block diagonal plus a rank ``2|J|`` term and is solved with the
Woodbury identity. Every iterate also yields a certified lower bound from
linearising the max-function at the current point, so the returned value is
bracketed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import optimize, sparse, stats

from .design import MatchedDesign, ScoreMatrix
from .sensitivity import AssignmentProbabilities, _as_gamma, moments, vertex_table

__all__ = [
    "ZetaProblem",
    "Tolerances",
    "MinimaxResult",
    "MinimaxConvergenceError",
    "MinimaxSolver",
    "chi2_quantile",
    "zeta",
    "minimax_zeta",
    "minimize_deviate",
    "BOUNDARY_DELTA",
]

BOUNDARY_DELTA = 1e-7
MAX_ITER = 10_000
REL_GAP = 1e-8
ABS_GAP = 5e-7
LP_BOUND_MAX_N = 6
VALUE_TOL = 1e-6


def chi2_quantile(c: float) -> float:
    """``chi2_{1,1-c}``: the upper-``c`` quantile of chi-square(1)."""
    if not 0.0 < c < 1.0:
        raise ValueError(f"critical level must lie in (0, 1), got {c}")
    return float(stats.chi2.isf(c, 1))


class MinimaxConvergenceError(RuntimeError):
    def __init__(self, msg, lower, upper, z=None):
        super().__init__(f"{msg} (bound interval [{lower:.6g}, {upper:.6g}])")
        self.lower = lower
        self.upper = upper
        self.z = z


@dataclass(frozen=True)
class Tolerances:
    """Solver tolerances: certificate band, iteration cap."""

    delta: float = BOUNDARY_DELTA
    max_iter: int = MAX_ITER


@dataclass(frozen=True)
class ZetaProblem:
    """One worst-case local test: outcomes ``J`` at critical level ``c``."""

    design: MatchedDesign
    scores: ScoreMatrix
    J: tuple[int, ...]
    c: float
    gamma: float

    def __post_init__(self):
        J = tuple(sorted(int(k) for k in self.J))
        if not J:
            raise ValueError("J must be nonempty")
        if J[0] < 0 or J[-1] >= self.scores.n_outcomes:
            raise IndexError("outcome index out of range")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "gamma", _as_gamma(self.gamma))
        object.__setattr__(self, "_chi2", chi2_quantile(self.c))

    @property
    def chi2(self) -> float:
        return self._chi2


@dataclass(frozen=True)
class MinimaxResult:
    """Outcome of ``min_rho max_{k in J} zeta_k``.

    ``value`` is attained at ``argmin_rho``; the optimum lies in
    ``[lower_bound, value]``. ``certificate`` is ``"feasible"`` (the local
    test is not rejected) unless the optimum is certified above
    ``+BOUNDARY_DELTA``.
    """

    value: float
    lower_bound: float
    argmin_rho: AssignmentProbabilities
    iterations: int
    certificate: Literal["feasible", "infeasible"]
    converged: bool = True
    zetas: np.ndarray = field(default=None, repr=False)

    @property
    def feasible(self) -> bool:
        return self.certificate == "feasible"


def zeta(design: MatchedDesign, scores: ScoreMatrix, k: int,
         rho: AssignmentProbabilities, c: float) -> float:
    m = moments(design, scores, k, rho)
    t = float(scores.q[design.treated, k].sum())
    return (t - m.mu) ** 2 - chi2_quantile(c) * m.sigma2


# -- compiled layout ----------------------------------------------------------

class _Group:
    __slots__ = ("n", "d", "units", "B", "Q", "Q2", "Qt", "S2t", "sl")

    def __init__(self, g, q, start):
        self.n = g.n
        self.d = g.n - 1
        self.units = g.units
        self.B = len(g.strata)
        Q = np.moveaxis(q[g.units], -1, 0)                 # (K, B, n)
        self.Q = np.ascontiguousarray(Q)
        self.Q2 = self.Q * self.Q
        self.Qt = self.Q[..., :-1] - self.Q[..., -1:]      # (K, B, d)
        self.S2t = self.Q2[..., :-1] - self.Q2[..., -1:]
        self.sl = slice(start, start + self.B * self.d)


def _constraints(n: int, gamma: float):
    """Rows ``G z <= h`` encoding ``rho_j <= gamma rho_j'`` in reduced coordinates."""
    d = n - 1
    E = np.vstack([np.eye(d), -np.ones((1, d))])
    e = np.zeros(n)
    e[-1] = 1.0
    rows, rhs = [], []
    for j in range(n):
        for jp in range(n):
            if j != jp:
                rows.append(E[j] - gamma * E[jp])
                rhs.append(gamma * e[jp] - e[j])
    return np.array(rows), np.array(rhs)


def _min_linear(c_red: np.ndarray, n: int, gamma: float) -> np.ndarray:
    """Per stratum, ``min c' z`` over the polytope; ``c_red`` has shape (B, d)."""
    full = np.concatenate([c_red, np.zeros((c_red.shape[0], 1))], axis=1)
    srt = np.sort(full, axis=1)
    csum = np.concatenate([np.zeros((len(full), 1)), np.cumsum(srt, axis=1)], axis=1)
    total = csum[:, -1:]
    m = np.arange(n + 1)
    vals = (gamma * csum + (total - csum)) / (gamma * m + (n - m))
    return vals.min(axis=1)


class MinimaxSolver:
    """Compiled ``(design, scores)`` pair answering min-max zeta problems.

    ``kappa`` generalises the chi-square quantile so the same machinery also
    minimises the deviate ``(T-mu)^2/sigma2`` (see :func:`minimize_deviate`).
    Results are cached by ``(J, c, gamma)``.
    """

    def __init__(self, design: MatchedDesign, scores: ScoreMatrix | np.ndarray):
        q = scores.q if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        self.design = design
        self.q = q
        self.T = q[design.treated].sum(axis=0)
        self.groups = []
        start = 0
        for g in design.groups:
            grp = _Group(g, q, start)
            self.groups.append(grp)
            start += grp.B * grp.d
        self.dim = start
        self._cons = {}
        self.cache: dict = {}
        self.stats = {"solves": 0, "cache_hits": 0, "newton_steps": 0}

    # constraints per (n, gamma)
    def _gh(self, n, gamma):
        key = (n, gamma)
        if key not in self._cons:
            self._cons[key] = _constraints(n, gamma)
        return self._cons[key]

    def uniform_z(self) -> np.ndarray:
        z = np.empty(self.dim)
        for g in self.groups:
            z[g.sl] = 1.0 / g.n
        return z

    def rho_from_z(self, z) -> np.ndarray:
        rho = np.empty(self.design.n_units)
        for g in self.groups:
            zg = z[g.sl].reshape(g.B, g.d)
            rho[g.units] = np.concatenate([zg, 1.0 - zg.sum(axis=1, keepdims=True)], axis=1)
        return rho

    # -- function evaluation ---------------------------------------------------

    def _evaluate(self, z, J, kappa, need_grad=True):
        m_out = len(J)
        mu = np.zeros(m_out)
        sig = np.zeros(m_out)
        per = []
        for g in self.groups:
            zg = z[g.sl].reshape(g.B, g.d)
            rho = np.concatenate([zg, 1.0 - zg.sum(axis=1, keepdims=True)], axis=1)
            QJ = g.Q[J]
            m1 = np.einsum("kbn,bn->kb", QJ, rho)
            m2 = np.einsum("kbn,bn->kb", g.Q2[J], rho)
            mu += m1.sum(axis=1)
            sig += (m2 - m1 * m1).sum(axis=1)
            per.append(m1)
        e = self.T[J] - mu
        zeta_vals = e * e - kappa * sig
        if not need_grad:
            return zeta_vals, None
        grads = np.empty((m_out, self.dim))
        for g, m1 in zip(self.groups, per):
            QtJ = g.Qt[J]
            gg = -2.0 * e[:, None, None] * QtJ - kappa[:, None, None] * (
                g.S2t[J] - 2.0 * m1[..., None] * QtJ)
            grads[:, g.sl] = gg.reshape(m_out, -1)
        return zeta_vals, grads

    def _lower_bound(self, z, zeta_vals, grads, w, gamma):
        c = w @ grads
        lb = float(w @ zeta_vals) - float(c @ z)
        for g in self.groups:
            lb += float(_min_linear(c[g.sl].reshape(g.B, g.d), g.n, gamma).sum())
        return lb

    def _lp_lower_bound(self, z, zeta_vals, grads, gamma):
        """Best linearisation bound over all simplex weights (a small LP).

        The weights read off the interior-point multipliers are noisy near
        the optimum; optimising them at a fixed accurate ``z`` recovers a
        bound as tight as ``z`` itself.
        """
        m = len(zeta_vals)
        n_phi = sum(g.B for g in self.groups)
        A_blocks, off = [], 0
        for g in self.groups:
            V = vertex_table(g.n, gamma)[:, :-1]
            zg = z[g.sl].reshape(g.B, g.d)
            Gk = grads[:, g.sl].reshape(m, g.B, g.d)
            coef = np.einsum("kbd,vbd->bvk", Gk, V[:, None, :] - zg[None])
            nv = V.shape[0]
            # phi_b - sum_k w_k coef[b, v, k] <= 0
            wpart = -coef.reshape(g.B * nv, m)
            phipart = sparse.csr_matrix(
                (np.ones(g.B * nv), (np.arange(g.B * nv), off + np.repeat(np.arange(g.B), nv))),
                shape=(g.B * nv, n_phi))
            A_blocks.append(sparse.hstack([sparse.csr_matrix(wpart), phipart]))
            off += g.B
        A = sparse.vstack(A_blocks).tocsr()
        c = -np.concatenate([zeta_vals, np.ones(n_phi)])
        out = optimize.linprog(
            c, A_ub=A, b_ub=np.zeros(A.shape[0]),
            A_eq=np.concatenate([np.ones(m), np.zeros(n_phi)])[None], b_eq=[1.0],
            bounds=[(0, None)] * m + [(None, None)] * n_phi, method="highs")
        if out.status != 0:
            return -math.inf
        # re-evaluate at the returned weights so the bound does not inherit LP tolerances
        w = np.clip(out.x[:m], 0.0, None)
        w /= w.sum()
        return self._lower_bound(z, zeta_vals, grads, w, gamma)

    def _residuals(self, z, gamma):
        out = []
        for g in self.groups:
            G, h = self._gh(g.n, gamma)
            out.append(h[None, :] - z[g.sl].reshape(g.B, g.d) @ G.T)
        return out

    # -- main solve --------------------------------------------------------------

    def solve(self, J: Sequence[int], gamma: float, kappa, *, stop_on_certificate=False,
              delta=BOUNDARY_DELTA, z0=None, max_iter=MAX_ITER):
        """Infeasible-start primal-dual path following on the epigraph form.

        The epigraph rows are ``zeta_k(z) - y + s_k = 0`` with slacks
        ``s >= 0``; the polytope rows stay strictly feasible throughout, so
        every iterate ``z`` is a valid assignment and ``max_k zeta_k(z)`` is
        an attained upper bound. Returns
        ``(value, lower, z, iterations, converged, zetas)``.
        """
        J = np.asarray(J, dtype=int)
        m = len(J)
        kappa = np.broadcast_to(np.asarray(kappa, dtype=float), J.shape).copy()
        gamma = float(gamma)
        z = self.uniform_z() if z0 is None else np.array(z0, dtype=float)
        self.stats["solves"] += 1
        zv, gr = self._evaluate(z, J, kappa)
        ub = float(zv.max())
        if gamma - 1.0 <= 1e-14:
            return ub, ub, z, 0, True, zv
        lb = max(self._lower_bound(z, zv, gr, np.full(m, 1.0 / m), gamma),
                 self._lower_bound(z, zv, gr, np.eye(m)[zv.argmax()], gamma))

        def gap_ok(ub, lb):
            return ub - lb <= min(ABS_GAP, REL_GAP * max(1.0, abs(ub)))

        def done(ub, lb):
            if stop_on_certificate and (ub < -delta or lb > delta):
                return True
            return gap_ok(ub, lb)

        if done(ub, lb):
            return ub, lb, z, 0, ub - lb <= VALUE_TOL, zv

        Gs = [self._gh(g.n, gamma)[0] for g in self.groups]
        n_cons = m + sum(g.B * g.n * (g.n - 1) for g in self.groups)
        scale = max(ub - lb, 1e-8)
        y = ub
        s = np.maximum(y - zv, 1e-2 * scale)
        lam = np.full(m, 1.0 / m)
        res = self._residuals(z, gamma)
        mu = float(lam @ s) / m
        nu = [mu / r for r in res]
        best = (ub, z.copy(), zv)
        it = 0
        lp_ok = all(g.n <= LP_BOUND_MAX_N for g in self.groups)
        last_lp = math.inf

        def polish():
            nonlocal lb, last_lp
            last_lp = comp
            lb = max(lb, self._lp_lower_bound(best[1], best[2], self._evaluate(
                best[1], J, kappa)[1], gamma))

        while True:
            it += 1
            if it > max_iter:
                raise MinimaxConvergenceError("iteration cap reached", lb, best[0], best[1])
            comp = float(lam @ s) + sum(float((v * r).sum()) for v, r in zip(nu, res))
            u = lam / s
            hzy = -(u @ gr)
            hyy = u.sum()
            rowc = [v / r for v, r in zip(nu, res)]
            fac = self._factor(gr, J, 2.0 * lam, 2.0 * kappa * lam, u, rowc, Gs)

            def direction(mu):
                a = zv - y + mu / lam
                rz = -((lam + u * a) @ gr)
                for g, G, r in zip(self.groups, Gs, res):
                    rz[g.sl] -= ((mu / r) @ G).ravel()
                ry = -(1.0 - lam.sum()) + float(u @ a)
                dz = self._apply(fac, rz - hzy * (ry / hyy))
                dy = (ry - hzy @ dz) / hyy
                dlam = u * (gr @ dz - dy + a)
                ds = (mu - lam * s - s * dlam) / lam
                dnu, dr = [], []
                for g, G, v, r in zip(self.groups, Gs, nu, res):
                    gdz = dz[g.sl].reshape(g.B, g.d) @ G.T
                    dnu.append((mu - v * r + v * gdz) / r)
                    dr.append(-gdz)
                return dz, dy, dlam, ds, dnu, dr

            def max_step(pairs):
                step = 1.0
                for a, da in pairs:
                    neg = da < 0
                    if np.any(neg):
                        step = min(step, float(np.min(-a[neg] / da[neg])))
                return step

            # predictor-corrector choice of the centring parameter
            d_aff = direction(0.0)
            prim = [(s, d_aff[3])] + list(zip(res, d_aff[5]))
            dual = [(lam, d_aff[2])] + list(zip(nu, d_aff[4]))
            a_aff = min(max_step(prim), max_step(dual))
            comp_aff = float((lam + a_aff * d_aff[2]) @ (s + a_aff * d_aff[3])) + sum(
                float(((v + a_aff * dv) * (r + a_aff * dr)).sum())
                for v, dv, r, dr in zip(nu, d_aff[4], res, d_aff[5]))
            sigma = min(1.0, (comp_aff / comp) ** 3)
            dz, dy, dlam, ds, dnu, dr = direction(sigma * comp / n_cons)
            step = 0.99 * min(max_step([(s, ds)] + list(zip(res, dr))),
                              max_step([(lam, dlam)] + list(zip(nu, dnu))))
            step = min(step, 1.0)
            if step < 1e-14 or comp < 1e-13 * max(1.0, abs(best[0])):
                if lp_ok and last_lp > comp:
                    polish()
                if done(best[0], lb) or best[0] - lb <= VALUE_TOL:
                    break
                raise MinimaxConvergenceError("step length collapsed", lb, best[0], best[1])
            z = z + step * dz
            y = y + step * dy
            s = s + step * ds
            lam = lam + step * dlam
            nu = [v + step * dv for v, dv in zip(nu, dnu)]
            res = self._residuals(z, gamma)
            zv, gr = self._evaluate(z, J, kappa)
            ubn = float(zv.max())
            if ubn < best[0]:
                best = (ubn, z.copy(), zv)
            lb = max(lb, self._lower_bound(z, zv, gr, lam / lam.sum(), gamma))
            comp = float(lam @ s) + sum(float((v * r).sum()) for v, r in zip(nu, res))
            if (not done(best[0], lb) and lp_ok and comp < 1e-3 * (best[0] - lb)
                    and comp < 1e-2 * last_lp):
                polish()
            if done(best[0], lb):
                break
        self.stats["newton_steps"] += it
        return best[0], lb, best[1], it, best[0] - lb <= VALUE_TOL, best[2]

    def _factor(self, gr, J, glob, blockc, u, rowc, Gs):
        """Factor ``D + W M W'`` for repeated solves.

        ``D`` is block diagonal (variance curvature plus the polytope rows),
        ``W`` stacks the global score directions and the zeta gradients, and
        ``M = diag(glob) (+) [diag(u) - u u'/sum(u)]``.
        """
        m = len(J)
        Wt = np.empty((2 * m, self.dim))
        for g in self.groups:
            Wt[:m, g.sl] = g.Qt[J].reshape(m, -1)
        Wt[m:] = gr
        Mmat = np.zeros((2 * m, 2 * m))
        Mmat[:m, :m] = np.diag(glob)
        Mmat[m:, m:] = np.diag(u) - np.outer(u, u) / u.sum()
        blocks = []
        DinvW = np.empty_like(Wt)
        for g, G, rc in zip(self.groups, Gs, rowc):
            QtJ = g.Qt[J]
            X = Wt[:, g.sl].reshape(2 * m, g.B, g.d)
            if g.d == 1:
                Dg = np.einsum("k,kb->b", blockc, QtJ[..., 0] ** 2) + rc @ (G[:, 0] ** 2)
                DinvW[:, g.sl] = (X[..., 0] / Dg).reshape(2 * m, -1)
            else:
                Dg = np.einsum("k,kbi,kbj->bij", blockc, QtJ, QtJ) + np.einsum(
                    "br,ri,rj->bij", rc, G, G)
                Dg = np.linalg.inv(Dg)
                DinvW[:, g.sl] = np.einsum("bij,kbj->kbi", Dg, X).reshape(2 * m, -1)
            blocks.append(Dg)
        C = np.eye(2 * m) + Mmat @ (Wt @ DinvW.T)
        return blocks, Wt, DinvW, Mmat, C

    def _apply(self, fac, rhs):
        """Solve with a factorisation from :meth:`_factor` (Woodbury identity)."""
        blocks, Wt, DinvW, Mmat, C = fac
        Dinvb = np.empty_like(rhs)
        for g, Dg in zip(self.groups, blocks):
            x = rhs[g.sl].reshape(g.B, g.d)
            if g.d == 1:
                Dinvb[g.sl] = x[:, 0] / Dg
            else:
                Dinvb[g.sl] = np.einsum("bij,bj->bi", Dg, x).ravel()
        corr = np.linalg.solve(C, Mmat @ (Wt @ Dinvb))
        return Dinvb - DinvW.T @ corr


    # -- public helpers --------------------------------------------------------

    def minimax(self, J, c, gamma, *, stop_on_certificate=False,
                tolerances: Tolerances | None = None) -> MinimaxResult:
        tol = tolerances or Tolerances()
        J = tuple(sorted(int(k) for k in J))
        gamma = _as_gamma(gamma)
        key = (J, float(c), gamma, tol)
        hit = self.cache.get(key)
        if hit is not None and (hit.converged or stop_on_certificate):
            self.stats["cache_hits"] += 1
            return hit
        kappa = chi2_quantile(c)
        value, lower, z, it, conv, zv = self.solve(
            J, gamma, kappa, stop_on_certificate=stop_on_certificate, delta=tol.delta,
            max_iter=tol.max_iter)
        cert = "infeasible" if (lower > tol.delta or (conv and value > tol.delta)) \
            else "feasible"
        res = MinimaxResult(value, lower, AssignmentProbabilities(self.design, self.rho_from_z(z)),
                            it, cert, conv, zv)
        self.cache[key] = res
        return res

    def feasible(self, J, c, gamma) -> bool:
        """Certificate only: does some ``rho`` keep all of ``J`` above ``c``?"""
        return self.minimax(J, c, gamma, stop_on_certificate=True).feasible


def minimax_zeta(problem: ZetaProblem, tolerances: Tolerances | None = None, *,
                 stop_on_certificate: bool = False,
                 solver: MinimaxSolver | None = None) -> MinimaxResult:
    """Solve ``min_{rho in P_gamma} max_{k in J} zeta_k(rho; c)``.

    With ``stop_on_certificate`` the solve ends as soon as the sign of the
    optimum is certified, and ``value`` is then only an upper bound.
    """
    if solver is None:
        solver = MinimaxSolver(problem.design, problem.scores)
    return solver.minimax(problem.J, problem.c, problem.gamma,
                          stop_on_certificate=stop_on_certificate, tolerances=tolerances)


def minimize_deviate(design: MatchedDesign, qk: np.ndarray, t: float, gamma: float,
                     start: float, max_rounds: int = 50):
    """Exact ``min (t - mu)^2 / sigma2`` over the polytope (Dinkelbach).

    ``start`` is any attained deviate value. Returns ``(deviate, mu, sigma2)``.
    """
    solver = MinimaxSolver(design, np.asarray(qk, dtype=float)[:, None])
    lam = float(start)
    mu = sig = float("nan")
    for _ in range(max_rounds):
        _, _, z, _, _, _ = solver.solve([0], gamma, lam)
        rho = solver.rho_from_z(z)
        m1 = np.add.reduceat(rho * qk, design.offsets[:-1])
        m2 = np.add.reduceat(rho * qk * qk, design.offsets[:-1])
        mu = float(m1.sum())
        sig = float((m2 - m1 * m1).sum())
        new = (t - mu) ** 2 / sig if sig > 0 else math.inf
        if new >= lam * (1.0 - 1e-12):
            break
        lam = new
    return lam, mu, sig
