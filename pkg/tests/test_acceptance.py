"""Exit criteria. Each test prints one ``[criterion N] PASS|FAIL`` line.

Run alone with ``pytest -m acceptance -s``; the simulation studies take
roughly 20 minutes on one core, dominated by the selector study.
"""
import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from fdpsens.closed import ClosedTestSession
from fdpsens.simlab import (ConfoundedAssignmentSpec, default_spec, nonconsonant_fixture,
                            run_coverage_study, run_runtime_study, run_screening_study,
                            run_selector_study, run_table2, table2_proportions)

import oracles

pytestmark = pytest.mark.acceptance

# Reference distributions of v* (proportions at v = 0..4), keyed by
# (sigma_kind, gamma, method), from the published simulation table.
TABLE2 = {
    ("identity", 1.0, "exact"): [0.590, 0.333, 0.076, 0.001, 0.000],
    ("identity", 1.0, "naive"): [0.590, 0.333, 0.076, 0.001, 0.000],
    ("identity", 1.25, "exact"): [0.008, 0.125, 0.496, 0.343, 0.028],
    ("identity", 1.25, "naive"): [0.004, 0.087, 0.384, 0.418, 0.107],
    ("identity", 1.5, "exact"): [0.000, 0.000, 0.043, 0.528, 0.429],
    ("identity", 1.5, "naive"): [0.000, 0.000, 0.006, 0.215, 0.779],
    ("identity", 1.75, "exact"): [0.000, 0.000, 0.000, 0.097, 0.903],
    ("identity", 1.75, "naive"): [0.000, 0.000, 0.000, 0.013, 0.987],
    ("equicorrelated", 1.0, "exact"): [0.576, 0.331, 0.091, 0.002, 0.000],
    ("equicorrelated", 1.0, "naive"): [0.576, 0.331, 0.091, 0.002, 0.000],
    ("equicorrelated", 1.25, "exact"): [0.018, 0.124, 0.393, 0.387, 0.078],
    ("equicorrelated", 1.25, "naive"): [0.015, 0.089, 0.339, 0.413, 0.143],
    ("equicorrelated", 1.5, "exact"): [0.000, 0.001, 0.031, 0.331, 0.636],
    ("equicorrelated", 1.5, "naive"): [0.000, 0.001, 0.012, 0.202, 0.785],
    ("equicorrelated", 1.75, "exact"): [0.000, 0.000, 0.002, 0.029, 0.969],
    ("equicorrelated", 1.75, "naive"): [0.000, 0.000, 0.001, 0.011, 0.988],
}


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def table2_runs():
    return {sk: run_table2(default_spec("table2", sigma_kind=sk))
            for sk in ("identity", "equicorrelated")}


@pytest.mark.slow
def test_c01_gamma_one_equivalence(capsys, table2_runs):
    res = table2_runs["identity"]
    gi = list(res.spec["gamma_grid"]).index(1.0)
    rec = res.records[:, gi, :]
    same = int(np.sum(rec[:, 0] == rec[:, 1]))
    verdict(capsys, 1, same == len(rec),
            f"exact == naive at gamma 1 in {same}/{len(rec)} replicates")


def test_c02_minimax_dominance(capsys):
    seen, bad = [], []

    @settings(max_examples=1000, deadline=None, derandomize=True,
              suppress_health_check=list(HealthCheck))
    @given(st.integers(0, 2**31), st.integers(1, 6), st.floats(1.0, 3.0))
    def check(seed, K, gamma):
        rng = np.random.default_rng(seed)
        d, s = oracles.random_instance(rng, int(rng.integers(4, 16)), K, shift=(0.0, 1.5),
                                       sizes=(2, 3))
        R = tuple(sorted(rng.choice(K, size=int(rng.integers(1, K + 1)), replace=False)))
        sess = ClosedTestSession(d, s)
        v, nv = sess.v_star(R, gamma)[0], sess.naive_v(R, gamma)
        seen.append(1)
        if nv < v:
            bad.append((seed, K, gamma, R, v, nv))

    check()
    verdict(capsys, 2, not bad and len(seen) >= 1000,
            f"naive_v >= v_star on {len(seen) - len(bad)}/{len(seen)} instances")


def test_c03_oracle_equivalence(capsys):
    mismatches, total, hard = [], 0, 0
    for gamma in (1.25, 1.5):
        rng = np.random.default_rng(int(gamma * 100))
        for i in range(50):
            d, s = oracles.random_instance(rng, 20, 5, shift=(0.0, 1.2))
            R = tuple(sorted(rng.choice(5, size=int(rng.integers(1, 6)), replace=False)))
            sess = ClosedTestSession(d, s)
            v = sess.v_star(R, gamma)[0]
            ref = ClosedTestSession(d, s).enumerative_v(R, gamma, screening=False)[0]
            total += 1
            hard += bool(sess.screen(gamma).undecided)
            if v != ref:
                mismatches.append((gamma, i, R, v, ref))
    verdict(capsys, 3, not mismatches, f"{len(mismatches)} mismatches in {total} instances "
                                            f"({hard} with undecided screening)")


@pytest.mark.slow
def test_c04_table2_reproduction(capsys, table2_runs):
    worst, where = 0.0, None
    for sk, res in table2_runs.items():
        props = table2_proportions(res)
        for (g, m), p in props.items():
            dev = np.abs(p - np.array(TABLE2[(sk, g, m)]))
            if dev.max() > worst:
                worst, where = float(dev.max()), (sk, g, m, int(dev.argmax()))
    head = table2_proportions(table2_runs["identity"])
    naive4, exact4 = head[(1.5, "naive")][4], head[(1.5, "exact")][4]
    ok = worst <= 0.08 and abs(naive4 - 0.779) <= 0.08 and abs(exact4 - 0.429) <= 0.08
    verdict(capsys, 4, ok, f"max |deviation| {worst:.3f} at {where}; gamma 1.5 mass at v=4 "
                           f"naive {naive4:.3f}, exact {exact4:.3f}")


@pytest.mark.slow
def test_c05_screening_trend(capsys):
    res = run_screening_study(default_spec("screening"))
    frac = {(r[0], r[1]): r[2] for r in res.rows}
    low = [frac[(1.25, B)] for B in (500, 1000, 2000)]
    high = [frac[(2.0, B)] for B in (500, 1000, 2000)]
    ok = low[0] > low[1] > low[2] and max(high) <= 0.01
    verdict(capsys, 5, ok, f"invoked fraction at gamma 1.25: {low}; at gamma 2.0: {high}")


def test_c06_monotonicity_suite(capsys):
    counts = {"gamma": 0, "r": 0, "subset": 0}
    bad = []

    @settings(max_examples=60, deadline=None, derandomize=True,
              suppress_health_check=list(HealthCheck))
    @given(st.integers(0, 2**31), st.integers(2, 5))
    def check(seed, K):
        rng = np.random.default_rng(seed)
        d, s = oracles.random_instance(rng, int(rng.integers(10, 30)), K, shift=(0.0, 1.2),
                                       sizes=(2, 3))
        sess = ClosedTestSession(d, s)
        R = tuple(range(K))
        v = [sess.v_star(R, g)[0] for g in (1.0, 1.2, 1.4, 1.7, 2.0, 3.0)]
        counts["gamma"] += 1
        if v != sorted(v):
            bad.append(("gamma", seed, v))
        g = [sess.gsv(R, r, gamma_hi=4.0, tol=1e-2).gamma for r in range(K)]
        counts["r"] += 1
        if any(b < a for a, b in zip(g, g[1:])):
            bad.append(("r", seed, g))
        gamma = float(rng.uniform(1.0, 2.0))
        for n in range(1, K):
            for A in itertools.combinations(range(K), n):
                for extra in set(range(K)) - set(A):
                    B = tuple(sorted(A + (extra,)))
                    counts["subset"] += 1
                    if sess.v_star(A, gamma)[0] > sess.v_star(B, gamma)[0]:
                        bad.append(("subset", seed, A, B))

    check()
    verdict(capsys, 6, not bad, f"{len(bad)} violations over {counts['gamma']} gamma grids, "
                                f"{counts['r']} r sweeps, {counts['subset']} nested pairs")


@pytest.mark.slow
def test_c07_coverage(capsys):
    res = run_coverage_study(default_spec("coverage"))
    cov = res.rows[0][1]
    verdict(capsys, 7, cov >= 0.93 and res.spec["replicates"] >= 500,
            f"simultaneous coverage {cov:.3f} over {len(res.rows) - 1} subsets, "
            f"{res.spec['replicates']} replicates")


@pytest.mark.slow
def test_c08_selector_study(capsys):
    res = run_selector_study(default_spec("selector"), ConfoundedAssignmentSpec())
    gaps = {r[0]: r[2] - r[1] for r in res.rows}
    detail = "; ".join(f"rho {rho:+.1f}: naive {r[1]:.3f}, selector {r[2]:.3f}"
                       for rho, r in zip(gaps, res.rows))
    verdict(capsys, 8, min(gaps.values()) >= 0.02 and set(gaps) == {-0.2, 0.0, 0.2}, detail)


def test_c09_nonconsonant_fixture(capsys):
    d, s = nonconsonant_fixture()
    sess = ClosedTestSession(d, s, 0.05)
    p = sess.pstar(1.5)
    v, nv = sess.v_star([1, 2], 1.5)[0], sess.naive_v([1, 2], 1.5)
    ok = v == 1 and nv == 2 and p[1] > 0.05 and p[2] > 0.05
    verdict(capsys, 9, ok, f"v*({{1,2}}) = {v}, naive {nv}, singleton p* "
                           f"{p[1]:.3f} and {p[2]:.3f}")


@pytest.mark.slow
def test_c10_runtime_advantage(capsys):
    res = run_runtime_study(default_spec("runtime"))
    rec = np.vstack(res.records)
    indecisive = rec[rec[:, 2] > 0]
    speedup = float(np.median(indecisive[:, 1] / indecisive[:, 0]))
    slower = int(np.sum(rec[:, 0] > rec[:, 1]))
    verdict(capsys, 10, speedup >= 3 and slower == 0 and len(indecisive) > 0,
            f"median speedup {speedup:.1f}x over {len(indecisive)} indecisive runs; "
            f"slower in {slower}/{len(rec)} runs")
