"""Synthetic matched-pair studies and the experiment runners built on them.

Every generator takes an explicit seed (an int or a ``numpy.random.SeedSequence``)
so that a replicate is a pure function of ``(spec, seed)``. Runners spawn one
child seed per replicate from the spec seed, so results do not depend on the
order (or process) in which replicates are evaluated.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from os import PathLike
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .closed import ClosedTestSession, holm, known_rho_pvalues
from .design import MatchedDesign, OutcomeMatrix, ScoreMatrix, build_scores

TAU_KINDS = ("linspace", "half")
SIGMA_KINDS = ("identity", "equicorrelated")


class ConfigError(ValueError):
    """Invalid experiment specification."""


@dataclass(frozen=True)
class ExperimentSpec:
    """Matched-pair simulation settings.

    ``tau_kind="linspace"`` spreads effects evenly from 0.15 to 0.35 over the
    K outcomes; ``"half"`` gives the first ``K // 2`` outcomes an effect of 0.3
    and the rest none. ``sigma_kind="equicorrelated"`` uses unit variances with
    common correlation ``rho``.
    """
    B: int = 500
    K: int = 4
    tau_kind: str = "linspace"
    sigma_kind: str = "identity"
    gamma_grid: tuple[float, ...] = (1.0, 1.25, 1.5, 1.75)
    alpha: float = 0.05
    replicates: int = 200
    seed: int = 20240601
    rho: float = 0.2
    statistic: str = "huber"
    trim: float = 2.5

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError("B must be at least 1")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.tau_kind not in TAU_KINDS:
            raise ConfigError(f"tau_kind must be one of {TAU_KINDS}")
        if self.sigma_kind not in SIGMA_KINDS:
            raise ConfigError(f"sigma_kind must be one of {SIGMA_KINDS}")
        if any(g < 1 for g in self.gamma_grid):
            raise ConfigError("gamma values must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        object.__setattr__(self, "gamma_grid", tuple(float(g) for g in self.gamma_grid))

    @property
    def tau(self) -> np.ndarray:
        if self.tau_kind == "linspace":
            return np.linspace(0.15, 0.35, self.K)
        t = np.zeros(self.K)
        t[: self.K // 2] = 0.3
        return t

    @property
    def sigma(self) -> np.ndarray:
        if self.sigma_kind == "identity":
            return np.eye(self.K)
        return np.full((self.K, self.K), self.rho) + (1 - self.rho) * np.eye(self.K)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown spec keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class ConfoundedAssignmentSpec:
    """Assignment tilted by the potential outcomes of ``driver_outcomes``.

    Within a pair, the unit with the larger sum of driver potentials is
    treated with probability ``bias_strength / (1 + bias_strength)``.
    """
    bias_strength: float = 2.0
    driver_outcomes: tuple[int, ...] = (2, 3)

    def __post_init__(self):
        if self.bias_strength < 1:
            raise ConfigError("bias_strength must be >= 1")
        object.__setattr__(self, "driver_outcomes", tuple(int(k) for k in self.driver_outcomes))


@dataclass(frozen=True)
class Truth:
    """Which outcomes carry a nonzero effect, plus the effect vector used."""
    affected: np.ndarray
    tau: np.ndarray

    @property
    def nulls(self) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(~self.affected))

    def n_true_nulls(self, R: Sequence[int]) -> int:
        return int(sum(not self.affected[k] for k in R))


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _cholesky(sigma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("covariance matrix is not positive definite") from exc


def _draw_controls(rng: np.random.Generator, B: int, sigma: np.ndarray) -> np.ndarray:
    """Control potentials, shape ``(B, 2, K)``."""
    L = _cholesky(sigma)
    return rng.standard_normal((B, 2, sigma.shape[0])) @ L.T


def _reveal(rc: np.ndarray, tau: np.ndarray, first_treated: np.ndarray
            ) -> tuple[MatchedDesign, OutcomeMatrix]:
    B, _, K = rc.shape
    treated = np.column_stack([first_treated, ~first_treated])
    y = rc + treated[:, :, None] * tau
    design = MatchedDesign.pairs(B, first_treated.tolist())
    names = tuple(f"y{k + 1}" for k in range(K))
    return design, OutcomeMatrix(y.reshape(2 * B, K), ("continuous",) * K, names)


def gen_matched_pairs(spec: ExperimentSpec, seed=None, tau: np.ndarray | None = None
                      ) -> tuple[MatchedDesign, OutcomeMatrix, Truth]:
    """Unconfounded pairs: one unit of each pair treated with probability 1/2."""
    rng = _rng(spec.seed if seed is None else seed)
    tau = spec.tau if tau is None else np.asarray(tau, dtype=float)
    rc = _draw_controls(rng, spec.B, spec.sigma)
    first = rng.random(spec.B) < 0.5
    design, outcomes = _reveal(rc, tau, first)
    return design, outcomes, Truth(tau != 0, tau)


def _confounded_sigma(K: int, rho: float, drivers: Sequence[int], null_rho: float = 0.2):
    """Affected outcomes share correlation ``rho``; driver nulls share ``null_rho``."""
    sigma = np.eye(K)
    affected = [k for k in range(K) if k not in drivers]
    for a, b in itertools.combinations(affected, 2):
        sigma[a, b] = sigma[b, a] = rho
    for a, b in itertools.combinations(drivers, 2):
        sigma[a, b] = sigma[b, a] = null_rho
    return sigma


def _confounded_draw(rng, B, sigma, tau, confound):
    rc = _draw_controls(rng, B, sigma)
    drivers = list(confound.driver_outcomes)
    # driver outcomes are nulls, so control and treated potentials coincide
    d = rc[:, :, drivers].sum(axis=2)
    high_first = d[:, 0] >= d[:, 1]
    p_high = confound.bias_strength / (1.0 + confound.bias_strength)
    high_treated = rng.random(B) < p_high
    first = np.where(high_first, high_treated, ~high_treated)
    return _reveal(rc, tau, first)


def _mean_differences(design: MatchedDesign, outcomes: OutcomeMatrix) -> np.ndarray:
    y = outcomes.values
    z = design.treated
    return y[z].mean(axis=0) - y[~z].mean(axis=0)


def calibrate_effect(spec: ExperimentSpec, confound: ConfoundedAssignmentSpec,
                     pilot_pairs: int = 200_000, seed: int = 0) -> tuple[float, np.ndarray]:
    """Effect size for affected outcomes matching the spurious null shift.

    A large pilot replicate with no effect measures the mean treated-minus-
    control difference that confounding induces on the driver outcomes; the
    affected outcomes get an effect equal to its average. Returns the effect
    and the per-outcome mean differences of a second pilot using it.
    """
    sigma = _confounded_sigma(spec.K, spec.rho, confound.driver_outcomes)
    rng = _rng(np.random.SeedSequence([seed, 1]))
    d, o = _confounded_draw(rng, pilot_pairs, sigma, np.zeros(spec.K), confound)
    shift = float(_mean_differences(d, o)[list(confound.driver_outcomes)].mean())
    tau = _confounded_tau(spec.K, confound, shift)
    rng = _rng(np.random.SeedSequence([seed, 2]))
    d, o = _confounded_draw(rng, pilot_pairs, sigma, tau, confound)
    return shift, _mean_differences(d, o)


def _confounded_tau(K, confound, effect):
    tau = np.full(K, float(effect))
    tau[list(confound.driver_outcomes)] = 0.0
    return tau


_CALIBRATION: dict = {}


def _calibrated(spec, confound) -> float:
    key = (spec.K, spec.rho, confound)
    if key not in _CALIBRATION:
        _CALIBRATION[key] = calibrate_effect(spec, confound)[0]
    return _CALIBRATION[key]


def gen_confounded_pairs(spec: ExperimentSpec, confound: ConfoundedAssignmentSpec, seed=None,
                         effect: float | None = None) -> tuple[MatchedDesign, OutcomeMatrix, Truth]:
    """Pairs whose assignment favours units with high driver-outcome potentials.

    Driver outcomes must be nulls. Non-driver outcomes are affected with a
    common effect, calibrated (unless ``effect`` is given) so every outcome
    shows roughly the same average treated-minus-control difference.
    ``spec.rho`` is the correlation among affected outcomes; the drivers are
    correlated at 0.2. With ``bias_strength = 1`` assignment is a fair coin.
    """
    K = spec.K
    if not confound.driver_outcomes or any(not 0 <= k < K for k in confound.driver_outcomes):
        raise ConfigError(f"driver outcomes must lie in 0..{K - 1}")
    if effect is None:
        effect = _calibrated(spec, confound) if confound.bias_strength > 1 else 0.3
    tau = _confounded_tau(K, confound, effect)
    sigma = _confounded_sigma(K, spec.rho, confound.driver_outcomes)
    rng = _rng(spec.seed if seed is None else seed)
    design, outcomes = _confounded_draw(rng, spec.B, sigma, tau, confound)
    return design, outcomes, Truth(tau != 0, tau)


def strong_signal_fixture(B: int = 100, K: int = 3, shift: float = 3.0, seed: int = 11
                          ) -> tuple[MatchedDesign, OutcomeMatrix, Truth]:
    """Every treated-minus-control difference positive in every outcome."""
    rng = _rng(seed)
    rc = rng.standard_normal((B, 2, K)) * 0.3
    first = rng.random(B) < 0.5
    design, outcomes = _reveal(rc, np.full(K, shift), first)
    return design, outcomes, Truth(np.ones(K, dtype=bool), np.full(K, shift))


def nonconsonant_fixture(B: int = 40) -> tuple[MatchedDesign, ScoreMatrix]:
    """Three score columns where outcome 0 is overwhelming and outcomes 1 and 2
    pull in opposite directions in alternating pairs.

    At Gamma = 1.5 neither of outcomes 1 and 2 is rejected on its own, yet no
    single assignment vector keeps both above the level, so ``v*({1, 2}) = 1``.
    """
    if B < 2 or B % 2:
        raise ConfigError("B must be a positive even number")
    x = np.tile([1.0, -1.0], B // 2)
    q = np.zeros((2 * B, 3))
    for k, col in enumerate([np.ones(B), 0.5 + x, 0.5 - x]):
        q[0::2, k] = col
        q[1::2, k] = -col
    return MatchedDesign.pairs(B), ScoreMatrix(q)


def planted_fixture(B: int = 400, K: int = 8, planted: Sequence[int] = (0, 1, 2, 3),
                    effect: float = 0.3, rho: float = 0.2, seed: int = 2024
                    ) -> tuple[MatchedDesign, OutcomeMatrix, Truth]:
    """Equicorrelated pairs where only the ``planted`` outcomes carry an effect."""
    tau = np.zeros(K)
    tau[list(planted)] = effect
    spec = ExperimentSpec(B=B, K=K, sigma_kind="equicorrelated", rho=rho, replicates=1, seed=seed)
    return gen_matched_pairs(spec, seed, tau=tau)


def scores_for(spec: ExperimentSpec, design: MatchedDesign, outcomes: OutcomeMatrix) -> ScoreMatrix:
    return build_scores(design, outcomes, spec.statistic, trim=spec.trim)


# -- replicate machinery ---------------------------------------------------------

def replicate_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def _map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


@dataclass
class StudyResult:
    """A finished experiment: a flat table plus raw per-replicate records."""
    name: str
    columns: list[str]
    rows: list[list]
    spec: dict
    records: list = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict)

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        if header:
            for line in provenance_lines(self.spec):
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([f"{x:.6g}" if isinstance(x, float) else x for x in r])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"study": self.name, "version": __version__, "spec": self.spec,
                "columns": self.columns, "rows": self.rows, "meta": self.meta}

    def write(self, out_dir: str | PathLike, svg: bool = False) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{self.name}.csv", out / f"{self.name}.json"]
        paths[0].write_text(self.to_csv())
        paths[1].write_text(json.dumps(self.summary(), indent=2, default=_jsonable) + "\n")
        if svg:
            p = plot_study(self, out / f"{self.name}.svg")
            if p is not None:
                paths.append(p)
        return paths


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def provenance_lines(spec: dict) -> list[str]:
    import hashlib
    blob = json.dumps(spec, sort_keys=True, default=_jsonable).encode()
    return [f"fdpsens {__version__}",
            f"config_sha256 {hashlib.sha256(blob).hexdigest()}",
            f"seed {spec.get('seed')}"]


def _spec_dict(spec: ExperimentSpec, **extra) -> dict:
    d = asdict(spec)
    d["gamma_grid"] = list(d["gamma_grid"])
    d.update(extra)
    return d


# -- Table 2: distribution of v* over the full outcome set ----------------------

def _table2_replicate(args):
    spec, seed = args
    design, outcomes, _ = gen_matched_pairs(spec, seed)
    s = ClosedTestSession(design, scores_for(spec, design, outcomes), spec.alpha)
    R = range(spec.K)
    return [(s.v_star(R, g)[0], s.naive_v(R, g)) for g in spec.gamma_grid]


def run_table2(spec: ExperimentSpec, workers: int = 1) -> StudyResult:
    """Monte Carlo distribution of ``v*`` over all K outcomes, exact versus naive."""
    seeds = replicate_seeds(spec.seed, spec.replicates)
    recs = _map(_table2_replicate, [(spec, s) for s in seeds], workers)
    arr = np.array(recs)  # (replicates, gammas, 2)
    cols = ["gamma", "method"] + [f"v{v}" for v in range(spec.K + 1)]
    rows = []
    for gi, g in enumerate(spec.gamma_grid):
        for mi, m in enumerate(("exact", "naive")):
            counts = np.bincount(arr[:, gi, mi], minlength=spec.K + 1)
            rows.append([g, m] + [float(c) / spec.replicates for c in counts])
    return StudyResult("table2", cols, rows, _spec_dict(spec), records=arr)


def table2_proportions(result: StudyResult) -> dict[tuple[float, str], np.ndarray]:
    return {(r[0], r[1]): np.array(r[2:]) for r in result.rows}


# -- Table 5: how often screening leaves a decision to the program --------------

def _screening_replicate(args):
    spec, seed = args
    design, outcomes, _ = gen_matched_pairs(spec, seed)
    s = ClosedTestSession(design, scores_for(spec, design, outcomes), spec.alpha)
    return [len(s.screen(g).undecided) for g in spec.gamma_grid]


def run_screening_study(spec: ExperimentSpec, B_grid: Sequence[int] = (500, 1000, 2000),
                        workers: int = 1) -> StudyResult:
    """Per (gamma, B): share of replicates with any undecided singleton, and mean count."""
    rows, records = [], {}
    for B in B_grid:
        sp = replace(spec, B=int(B))
        seeds = replicate_seeds(sp.seed + int(B), sp.replicates)
        arr = np.array(_map(_screening_replicate, [(sp, s) for s in seeds], workers))
        records[int(B)] = arr
        for gi, g in enumerate(sp.gamma_grid):
            rows.append([g, int(B), float(np.mean(arr[:, gi] > 0)), float(np.mean(arr[:, gi]))])
    rows.sort(key=lambda r: (r[0], r[1]))
    return StudyResult("screening", ["gamma", "B", "invoked_fraction", "mean_undecided"],
                       rows, _spec_dict(spec, B_grid=list(B_grid)), records=records)


# -- Table 6: choosing a robust pair of outcomes -------------------------------

def naive_selector(pvalues: Sequence[float], size: int = 2) -> tuple[int, ...]:
    """The ``size`` smallest p-values (ties by index)."""
    order = sorted(range(len(pvalues)), key=lambda k: (pvalues[k], k))
    return tuple(sorted(order[:size]))


def gsv_selector(session: ClosedTestSession, size: int = 2, r: int = 1,
                 tol: float = 1e-3) -> tuple[int, ...]:
    """The subset with the largest generalised sensitivity value; ties go to
    the smaller Gamma = 1 p-value sum, then lexicographic order."""
    p1 = session.pstar(1.0)
    best = None
    for R in itertools.combinations(range(session.K), size):
        g = session.gsv(R, r, tol=tol).gamma
        key = (-g, float(sum(p1[k] for k in R)), R)
        if best is None or key < best[0]:
            best = (key, R)
    return best[1]


def _selector_replicate(args):
    spec, confound, effect, seed = args
    design, outcomes, truth = gen_confounded_pairs(spec, confound, seed, effect=effect)
    s = ClosedTestSession(design, scores_for(spec, design, outcomes), spec.alpha)
    affected = set(np.flatnonzero(truth.affected))
    nv = naive_selector(s.pstar(1.0))
    gv = gsv_selector(s)
    return bool(affected & set(nv)), bool(affected & set(gv))


def run_selector_study(spec: ExperimentSpec, confound: ConfoundedAssignmentSpec,
                       rhos: Sequence[float] = (-0.2, 0.0, 0.2), workers: int = 1) -> StudyResult:
    """Success rates of the naive and generalised-sensitivity selectors.

    A selection succeeds when it contains at least one affected outcome.
    """
    if spec.K != 4:
        raise ConfigError("the selector study uses K = 4")
    rows, records = [], {}
    for rho in rhos:
        sp = replace(spec, rho=float(rho))
        effect = _calibrated(sp, confound) if confound.bias_strength > 1 else 0.3
        seeds = replicate_seeds(sp.seed, sp.replicates)
        arr = np.array(_map(_selector_replicate, [(sp, confound, effect, s) for s in seeds],
                            workers))
        records[float(rho)] = arr
        rows.append([float(rho), float(arr[:, 0].mean()), float(arr[:, 1].mean()), effect])
    return StudyResult("selector", ["rho", "naive", "gsv_selector", "effect"], rows,
                       _spec_dict(spec, confound=asdict(confound), rhos=list(rhos)),
                       records=records)


# -- runtime: branch-and-bound against enumeration --------------------------------

RUNTIME_SETTINGS = tuple(
    (tk, sk, g) for tk in TAU_KINDS for sk in SIGMA_KINDS for g in (1.25, 1.5, 1.75))


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def run_runtime_study(spec: ExperimentSpec, settings=RUNTIME_SETTINGS,
                      repeats: int | None = None) -> StudyResult:
    """Wall time of ``v*`` by branch-and-bound versus enumeration of every
    intersection inside the screening pool.

    Each method gets a fresh session with its worst-case p-values already
    computed, so both timings exclude the shared screening cost. One untimed
    warm-up replicate precedes the timed ones.
    """
    if spec.K > 12:
        raise ConfigError("the enumeration baseline needs K <= 12")
    repeats = repeats or spec.replicates
    R = tuple(range(spec.K))
    rows, records = [], []

    def one(sp, seed, g):
        design, outcomes, _ = gen_matched_pairs(sp, seed)
        scores = scores_for(sp, design, outcomes)
        a = ClosedTestSession(design, scores, sp.alpha)
        b = ClosedTestSession(design, scores, sp.alpha)
        a.pstar(g), b.pstar(g)
        (va, _), ta = _timed(lambda: a.v_star(R, g))
        (vb, _), tb = _timed(lambda: b.enumerative_v(R, g, screening=True))
        if va != vb:
            raise AssertionError(f"branch-and-bound v*={va} but enumeration gives {vb}")
        return ta, tb, len(a.screen(g).undecided), va

    for tk, sk, g in settings:
        sp = replace(spec, tau_kind=tk, sigma_kind=sk)
        seeds = replicate_seeds(sp.seed, repeats + 1)
        one(sp, seeds[0], g)  # warm-up
        res = np.array([one(sp, s, g) for s in seeds[1:]])
        records.append(res)
        ta, tb = res[:, 0], res[:, 1]
        rows.append([tk, sk, g, float(ta.mean()), float(tb.mean()),
                     float(np.median(tb / ta)), float(np.mean(res[:, 2] > 0)),
                     float(res[:, 2].mean())])
    cols = ["tau", "sigma", "gamma", "bnb_seconds", "enum_seconds", "median_speedup",
            "undecided_fraction", "mean_undecided"]
    return StudyResult("runtime", cols, rows, _spec_dict(spec, repeats=repeats),
                       records=records)


# -- coverage of the sensitivity sets ---------------------------------------------

def default_subset_family(K: int, size: int = 10) -> list[tuple[int, ...]]:
    """First ``size`` subsets with at least two members, by size then lexicographically."""
    fam = [R for n in range(2, K + 1) for R in itertools.combinations(range(K), n)]
    if len(fam) < size:
        raise ConfigError(f"K = {K} offers only {len(fam)} subsets of size >= 2")
    return fam[:size]


def _coverage_replicate(args):
    spec, family, seed, confound, gamma = args
    if confound is None:
        design, outcomes, truth = gen_matched_pairs(spec, seed)
    else:
        design, outcomes, truth = gen_confounded_pairs(spec, confound, seed)
    s = ClosedTestSession(design, scores_for(spec, design, outcomes), spec.alpha)
    return [truth.n_true_nulls(R) <= s.v_star(R, gamma)[0] for R in family]


def run_coverage_study(spec: ExperimentSpec, family: Sequence[Sequence[int]] | None = None,
                       confound: ConfoundedAssignmentSpec | None = None,
                       gamma: float | None = None, workers: int = 1) -> StudyResult:
    """Frequency with which ``v*`` bounds the true null count on every subset at once.

    Unconfounded data are analysed at Gamma = 1; confounded data at the true
    bias strength unless ``gamma`` says otherwise.
    """
    family = [tuple(R) for R in (family or default_subset_family(spec.K))]
    if gamma is None:
        gamma = 1.0 if confound is None else confound.bias_strength
    seeds = replicate_seeds(spec.seed, spec.replicates)
    arr = np.array(_map(_coverage_replicate,
                        [(spec, family, s, confound, gamma) for s in seeds], workers))
    simultaneous = arr.all(axis=1)
    rows = [["all", float(simultaneous.mean())]]
    rows += [["-".join(map(str, R)), float(arr[:, i].mean())] for i, R in enumerate(family)]
    se = float(np.sqrt(0.95 * 0.05 / spec.replicates))
    return StudyResult("coverage", ["subset", "coverage"], rows,
                       _spec_dict(spec, gamma=gamma, family=[list(R) for R in family],
                                  confound=asdict(confound) if confound else None),
                       records=arr, meta={"mc_se": se})


# -- Γ = 1 cross-check against known-probability Holm ----------------------------

def holm_count(design: MatchedDesign, scores: ScoreMatrix, R: Sequence[int], alpha: float) -> int:
    """Holm non-rejections inside ``R`` using uniform assignment probabilities."""
    rej = holm(known_rho_pvalues(design, scores), alpha)
    return int(sum(not rej[k] for k in R))


# -- plots ------------------------------------------------------------------------

def plot_study(result: StudyResult, path: str | PathLike) -> Path | None:
    """Render an SVG summary if matplotlib is installed; otherwise return None."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.5))
    cols = result.columns
    if result.name == "table2":
        vcols = [c for c in cols if c.startswith("v")]
        labels = [f"{r[0]:g}/{r[1]}" for r in result.rows]
        bottom = np.zeros(len(result.rows))
        for j, c in enumerate(vcols):
            h = np.array([r[2 + j] for r in result.rows])
            ax.bar(labels, h, bottom=bottom, label=c)
            bottom += h
        ax.set_ylabel("proportion")
        ax.tick_params(axis="x", rotation=60)
        ax.legend(fontsize=7)
    elif result.name == "runtime":
        labels = [f"{r[0]}/{r[1]}/{r[2]:g}" for r in result.rows]
        x = np.arange(len(labels))
        ax.bar(x - 0.2, [r[3] for r in result.rows], 0.4, label="branch-and-bound")
        ax.bar(x + 0.2, [r[4] for r in result.rows], 0.4, label="enumeration")
        ax.set_xticks(x, labels, rotation=60, fontsize=7)
        ax.set_ylabel("seconds")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    else:
        for j in range(1, len(cols)):
            vals = [r[j] for r in result.rows]
            if all(isinstance(v, float) for v in vals):
                ax.plot([str(r[0]) for r in result.rows], vals, marker="o", label=cols[j])
        ax.legend(fontsize=7)
    ax.set_title(result.name)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


# -- registry used by the CLI ----------------------------------------------------

FULL_SCALE = {"replicates": 1000}


def default_spec(study: str, paper_scale: bool = False, **overrides) -> ExperimentSpec:
    """Desk-scale defaults per study; ``paper_scale`` raises the replicate count."""
    base = {
        "table2": dict(B=500, K=4, tau_kind="linspace", sigma_kind="identity",
                       gamma_grid=(1.0, 1.25, 1.5, 1.75)),
        "screening": dict(B=500, K=10, tau_kind="half", sigma_kind="identity",
                          gamma_grid=(1.25, 1.5, 1.75, 2.0)),
        "selector": dict(B=500, K=4, gamma_grid=(1.0,)),
        "runtime": dict(B=500, K=10, replicates=3),
        "coverage": dict(B=500, K=4, tau_kind="half", gamma_grid=(1.0,), replicates=500),
    }
    if study not in base:
        raise ConfigError(f"unknown study {study!r}; choose from {sorted(base)}")
    d = dict(base[study])
    if paper_scale and study != "runtime":
        d.update(FULL_SCALE)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec(**d)


STUDIES = ("table2", "screening", "selector", "runtime", "coverage")


def run_study(name: str, spec: ExperimentSpec, workers: int = 1,
              confound: ConfoundedAssignmentSpec | None = None) -> StudyResult:
    if name == "table2":
        return run_table2(spec, workers)
    if name == "screening":
        return run_screening_study(spec, workers=workers)
    if name == "selector":
        return run_selector_study(spec, confound or ConfoundedAssignmentSpec(), workers=workers)
    if name == "runtime":
        return run_runtime_study(spec)
    if name == "coverage":
        return run_coverage_study(spec, confound=confound, workers=workers)
    raise ConfigError(f"unknown study {name!r}; choose from {list(STUDIES)}")
