import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from fdpsens.closed import (SCHEMA_VERSION, ClosedTestConfig, ClosedTestSession, Decision,
                            FdpReport, candidate_pool, enumerative_oracle_v, gsv, holm,
                            known_rho_pvalues, naive_v, screen, subset_search, v_known_rho, v_star)
from fdpsens.design import MatchedDesign, ScoreMatrix, build_scores
from fdpsens.sensitivity import single_sensitivity_value, uniform_assignment
from fdpsens.simlab import nonconsonant_fixture, strong_signal_fixture

import oracles


# -- Holm and known rho ---------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=6), st.sampled_from([0.05, 0.1]))
def test_holm_equals_closed_testing(p, alpha):
    assert np.array_equal(holm(p, alpha), oracles.closed_testing_counts(p, alpha))


def test_holm_ties_by_index():
    assert list(holm([0.01, 0.02, 0.9], 0.05)) == [True, True, False]
    assert list(holm([0.02, 0.02], 0.05)) == [True, True]
    assert list(holm([0.03, 0.03], 0.05)) == [False, False]


def test_v_known_rho_strong_signal():
    design, outcomes, _ = strong_signal_fixture(K=4)
    strong = build_scores(design, outcomes, "huber")
    assert v_known_rho(design, strong, range(4), uniform_assignment(design), 0.05) == 0


@pytest.mark.parametrize("seed", range(10))
def test_v_known_rho_matches_full_closed_testing(seed):
    rng = np.random.default_rng(seed)
    d, s = oracles.random_instance(rng, 40, 5, shift=(0.0, 0.9))
    u = uniform_assignment(d)
    p = known_rho_pvalues(d, s, u)
    rejected = oracles.closed_testing_counts(p, 0.05)
    R = tuple(sorted(rng.choice(5, size=int(rng.integers(1, 6)), replace=False)))
    assert v_known_rho(d, s, R, u, 0.05) == sum(not rejected[k] for k in R)


def test_v_known_rho_all_insignificant():
    d = MatchedDesign.pairs(4)
    q = np.tile([[0.5, 0.5], [-0.5, -0.5], [-0.5, -0.5], [0.5, 0.5]], (2, 1))
    assert v_known_rho(d, ScoreMatrix(q), [0, 1], uniform_assignment(d), 0.05) == 2


# -- screening and the candidate pool ------------------------------------------------

def test_screen_examples():
    design, outcomes, _ = strong_signal_fixture()
    scores = build_scores(design, outcomes, "huber")
    v = screen(design, scores, ClosedTestConfig(0.05, 3, 1.0))
    assert all(x is Decision.REJECT for x in v.decisions)
    rng = np.random.default_rng(1)
    d, s = oracles.random_instance(rng, 50, 3)
    v = screen(d, s, ClosedTestConfig(0.05, 3, 1000.0))
    assert all(x is Decision.FAIL_TO_REJECT for x in v.decisions)


def test_screen_boundary_fixture():
    # tune one outcome's shift until its p-value lands in (alpha/K, alpha]
    rng = np.random.default_rng(2)
    d = MatchedDesign.pairs(100)
    base = rng.normal(size=(100, 3))
    base[:, 0] += 3.0
    base[:, 2] -= 0.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        diffs = base.copy()
        diffs[:, 1] += mid
        s = ScoreMatrix(np.repeat(diffs, 2, axis=0) * np.tile([[0.5], [-0.5]], (100, 1)))
        p = screen(d, s, ClosedTestConfig(0.05, 3, 1.0)).worst_case_p[1]
        if p > 0.03:
            lo = mid
        elif p < 0.02:
            hi = mid
        else:
            break
    v = screen(d, s, ClosedTestConfig(0.05, 3, 1.0))
    assert 0.05 / 3 < v.worst_case_p[1] <= 0.05
    assert v.undecided == (1,)


def test_candidate_pool_examples():
    design, outcomes, _ = strong_signal_fixture()
    scores = build_scores(design, outcomes, "huber")
    v = screen(design, scores, ClosedTestConfig(0.05, 3, 1.0))
    assert candidate_pool(v, [0, 1]) == (0, ())
    assert v_star(design, scores, [0, 1], ClosedTestConfig(0.05, 3, 1.0))[0] == 0


@pytest.mark.parametrize("seed", range(12))
def test_pool_keeps_every_survivor(seed):
    rng = np.random.default_rng(seed)
    d, s = oracles.random_instance(rng, 20, 5, shift=(0.0, 1.2))
    g = float(rng.choice([1.0, 1.25, 1.5]))
    sess = ClosedTestSession(d, s)
    R = tuple(sorted(rng.choice(5, size=int(rng.integers(1, 6)), replace=False)))
    full = sess.enumerative_v(R, g, screening=False)[0]
    pooled = sess.enumerative_v(R, g, screening=True)[0]
    assert full == pooled
    r_max, _ = candidate_pool(sess.screen(g), R)
    assert full <= r_max


def test_all_fail_to_reject_needs_joint_rho():
    # each singleton survives but no single rho keeps both outcomes above c
    d, s = nonconsonant_fixture()
    s2 = s.subset([1, 2])
    sess = ClosedTestSession(d, s2)
    assert all(x is Decision.FAIL_TO_REJECT for x in sess.screen(1.5).decisions)
    assert sess.v_star([0, 1], 1.5)[0] == 1  # not |R|


# -- v* ---------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_gamma_one_reduces_to_known_rho(seed):
    rng = np.random.default_rng(seed)
    d, s = oracles.random_instance(rng, 40, 4, sizes=(2, 3))
    R = tuple(sorted(rng.choice(4, size=int(rng.integers(1, 5)), replace=False)))
    cfg = ClosedTestConfig(0.05, 4, 1.0)
    v = v_star(d, s, R, cfg)[0]
    assert v == v_known_rho(d, s, R, uniform_assignment(d), 0.05)
    assert v == naive_v(d, s, R, cfg)


@pytest.mark.parametrize("seed", range(10))
def test_singleton_v_matches_decisive_screening(seed):
    rng = np.random.default_rng(seed)
    d, s = oracles.random_instance(rng, 40, 3, shift=(0.0, 1.0))
    g = 1.3
    sess = ClosedTestSession(d, s)
    verdict = sess.screen(g)
    for k in range(3):
        v = sess.v_star([k], g)[0]
        assert v in (0, 1)
        if verdict.decisions[k] is Decision.REJECT:
            assert v == 0
        elif verdict.decisions[k] is Decision.FAIL_TO_REJECT:
            assert v == 1


def test_nonconsonant_fixture():
    d, s = nonconsonant_fixture()
    sess = ClosedTestSession(d, s, 0.05)
    p = sess.pstar(1.5)
    assert p[0] <= 0.05 / 3 and p[1] > 0.05 and p[2] > 0.05
    # H_1 and H_2 survive alone, their intersection is rejected
    assert sess.local_feasible([1], 0.05, 1.5)
    assert not sess.local_feasible([1, 2], 0.025, 1.5)
    assert sess.v_star([1, 2], 1.5)[0] == 1
    assert sess.enumerative_v([1, 2], 1.5)[0] == 1
    assert sess.naive_v([1, 2], 1.5) == 2


def test_naive_strictly_above_exact():
    d, s = nonconsonant_fixture()
    s2 = s.subset([1, 2])
    cfg = ClosedTestConfig(0.05, 2, 1.5)
    assert naive_v(d, s2, [0, 1], cfg) == 2
    assert v_star(d, s2, [0, 1], cfg)[0] == 1
    assert enumerative_oracle_v(d, s2, [0, 1], cfg) == 1


def test_nothing_rejected_gives_K():
    rng = np.random.default_rng(3)
    d, s = oracles.random_instance(rng, 30, 4, shift=(0.0, 0.0))
    cfg = ClosedTestConfig(0.05, 4, 50.0)
    assert v_star(d, s, range(4), cfg)[0] == 4
    assert enumerative_oracle_v(d, s, range(4), cfg) == 4


@pytest.mark.parametrize("seed", range(8))
def test_implication_store_is_transparent(seed):
    rng = np.random.default_rng(seed)
    d, s = oracles.random_instance(rng, 25, 5)
    a = ClosedTestSession(d, s, use_implications=True)
    b = ClosedTestSession(d, s, use_implications=False)
    for g in (1.2, 1.4):
        for R in [(0, 1), (0, 2, 4), tuple(range(5))]:
            assert a.v_star(R, g)[0] == b.v_star(R, g)[0]


def test_oracle_capacity_guard():
    rng = np.random.default_rng(0)
    d, s = oracles.random_instance(rng, 5, 13)
    with pytest.raises(ValueError):
        ClosedTestSession(d, s).enumerative_v([0], 1.2)


def test_invalid_subsets():
    rng = np.random.default_rng(0)
    d, s = oracles.random_instance(rng, 5, 2)
    sess = ClosedTestSession(d, s)
    with pytest.raises(ValueError):
        sess.v_star([], 1.2)
    with pytest.raises(IndexError):
        sess.v_star([2], 1.2)
    with pytest.raises(ValueError):
        ClosedTestConfig(1.5, 2)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2**31))
def test_monotonicity_properties(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 6))
    d, s = oracles.random_instance(rng, int(rng.integers(15, 40)), K, shift=(0.0, 1.0))
    sess = ClosedTestSession(d, s)
    R = tuple(sorted(rng.choice(K, size=int(rng.integers(1, K + 1)), replace=False)))
    grid = (1.0, 1.1, 1.25, 1.5, 2.0)
    vs = [sess.v_star(R, g)[0] for g in grid]
    assert vs == sorted(vs)
    Rp = tuple(sorted(set(R) | {int(rng.integers(K))}))
    for g in grid:
        assert sess.v_star(R, g)[0] <= sess.v_star(Rp, g)[0]
        assert sess.v_star(R, g)[0] <= sess.naive_v(R, g)


# -- generalised sensitivity values and subset search -----------------------------------

def test_gsv_trivial_cases():
    rng = np.random.default_rng(5)
    d, s = oracles.random_instance(rng, 30, 3, shift=(0.0, 0.0))
    sess = ClosedTestSession(d, s)
    if sess.v_star(range(3), 1.0)[0] == 3:
        assert sess.gsv(range(3), 2).gamma == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_gsv_nondecreasing_in_r(seed):
    rng = np.random.default_rng(seed)
    d, s = oracles.random_instance(rng, 80, 4, shift=(0.3, 0.8))
    sess = ClosedTestSession(d, s)
    vals = [sess.gsv(range(4), r).gamma for r in range(4)]
    assert vals == sorted(vals)
    naive = [sess.gsv(range(4), r, method="naive").gamma for r in range(4)]
    # exact is at least as robust as naive at every r
    assert all(e >= n - 2e-3 for e, n in zip(vals, naive))


@pytest.mark.parametrize("seed", range(4))
def test_singleton_gsv_equals_single_sensitivity_value(seed):
    # with K = 1 the closed test of H_k is its own worst-case test
    rng = np.random.default_rng(seed)
    d, s = oracles.random_instance(rng, 100, 1, shift=(0.3, 0.6))
    a = gsv(d, s, [0], 0, tol=1e-3).gamma
    b = single_sensitivity_value(d, s, 0, 0.05, tol=1e-3).gamma
    assert abs(a - b) <= 2e-3


def test_subset_search():
    rng = np.random.default_rng(6)
    d, s = oracles.random_instance(rng, 60, 4, shift=(0.2, 0.6))
    ranked = subset_search(d, s, 2, 1)
    assert len(ranked) == 6
    keys = [(-sv.gamma, R) for R, sv in ranked]
    assert keys == sorted(keys)
    with pytest.raises(ValueError, match="prefilter"):
        subset_search(d, s, 2, 1, cap=5)
    assert len(subset_search(d, s, 2, 1, prefilter=[0, 1, 3])) == 3


def test_subset_search_all_null():
    rng = np.random.default_rng(7)
    d = MatchedDesign.pairs(50)
    diff = rng.normal(size=(50, 4)) * 1e-9 + np.tile([[1.0], [-1.0]], (25, 1))
    q = np.repeat(diff, 2, axis=0) * np.tile([[0.5], [-0.5]], (50, 1))
    ranked = subset_search(d, ScoreMatrix(q), 2, 1)
    assert all(sv.gamma == 1.0 for _, sv in ranked)


# -- reports ------------------------------------------------------------------------------

def test_report_json_and_invariants():
    rng = np.random.default_rng(8)
    d, s = oracles.random_instance(rng, 60, 3, shift=(0.3, 0.8))
    rep = ClosedTestSession(d, s).report([0, 1, 2], 1.2, gsv_r=[0, 1])
    doc = json.loads(rep.to_json({"seed": 1}))
    assert doc["schema_version"] == SCHEMA_VERSION
    assert set(doc) >= {"subset", "v_star", "sensitivity_set", "naive_v", "gsv_table",
                        "diagnostics", "provenance"}
    assert doc["sensitivity_set"] == [i / 3 for i in range(rep.v_star + 1)]
    assert rep.invariant_violations() == []
    bad = FdpReport((0, 1), 1.2, 0.05, 2, v_star=2, naive_v=1)
    assert any("dominance" in m for m in bad.invariant_violations())
