"""Sampled conservative-fusion program and the embedded barrier solver."""

import numpy as np
import pytest

from cofusion.core import (
    CrossSparsityPattern,
    DimensionError,
    GaussianEstimate,
    JointCovariance,
    NotPositiveDefiniteError,
    is_conservative,
)
from cofusion.fusion import exact_fuse, realized_cov
from cofusion.sampler import sample_set
from cofusion.sdp import (
    SolveStatus,
    build_problem,
    feasibility_margin,
    load_problem,
    problem_from_dict,
    problem_to_dict,
    robust_fuse,
    save_problem,
    solve,
)


def rand_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + d * np.eye(d)


def est(mean, cov):
    return GaussianEstimate(np.asarray(mean, dtype=float), cov)


# ---------------------------------------------------------------------------
# problem assembly

def test_build_problem_shapes_and_inverses():
    rng = np.random.default_rng(0)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    samples = [s.p_ab for s in
               sample_set(pa, pb, CrossSparsityPattern.unconstrained(2, 2), 5, seed=3)]
    prob = build_problem(pa, pb, samples)
    assert prob.n == 5 and prob.d == 2
    for i, s in enumerate(samples):
        joint = np.block([[pa, s], [s.T, pb]])
        np.testing.assert_allclose(prob.joint_inverses[i] @ joint, np.eye(4),
                                   atol=1e-9)


def test_build_problem_validation():
    with pytest.raises(DimensionError):
        build_problem(np.eye(2), np.eye(3), [np.zeros((2, 3))])
    with pytest.raises(DimensionError):
        build_problem(np.eye(2), np.eye(2), [])
    with pytest.raises(DimensionError):
        build_problem(np.eye(2), np.eye(2), [np.zeros((3, 3))])


def test_build_problem_rejects_degenerate_sample_with_index():
    # a cross block equal to the (identical) marginals makes the joint singular
    bad = [np.zeros((2, 2)), np.eye(2)]
    with pytest.raises(NotPositiveDefiniteError) as excinfo:
        build_problem(np.eye(2), np.eye(2), bad)
    assert excinfo.value.sample_index == 1


# ---------------------------------------------------------------------------
# solver on problems with known answers

def test_solve_independent_sample_matches_exact_fusion():
    rng = np.random.default_rng(1)
    for d in (1, 2, 3):
        pa, pb = rand_spd(rng, d), rand_spd(rng, d)
        prob = build_problem(pa, pb, [np.zeros((d, d))])
        sol = solve(prob, tol=1e-8)
        assert sol.status is SolveStatus.OPTIMAL
        ref = exact_fuse(est(np.zeros(d), pa), est(np.zeros(d), pb),
                         np.zeros((d, d)))
        assert float(np.trace(sol.bound)) == pytest.approx(
            float(np.trace(ref.bound)), abs=1e-5)


def test_solve_scalar_two_point_support():
    # with cross samples at +/-r the optimal scalar bound is known to be
    # the smaller variance as r approaches its feasible extreme
    pa, pb = np.array([[3.0]]), np.array([[1.0]])
    r = 0.999 * np.sqrt(3.0)
    sol = solve(build_problem(pa, pb, [np.array([[r]]), np.array([[-r]])]),
                tol=1e-6)
    assert sol.status is SolveStatus.OPTIMAL
    assert float(sol.bound[0, 0]) == pytest.approx(1.0, abs=2e-2)


def test_solution_feasible_and_certified():
    rng = np.random.default_rng(2)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    samples = [s.p_ab for s in
               sample_set(pa, pb, CrossSparsityPattern.unconstrained(2, 2), 25, seed=4)]
    prob = build_problem(pa, pb, samples)
    sol = solve(prob, tol=1e-7)
    assert sol.status is SolveStatus.OPTIMAL
    assert sol.gap <= 1e-7
    assert sol.min_lmi_eig >= -1e-7
    np.testing.assert_allclose(sol.gain_a + sol.gain_b, np.eye(2), atol=1e-12)
    # the bound dominates the realized covariance at every sampled joint
    for s in samples:
        actual = realized_cov(sol.gain_a, sol.gain_b, JointCovariance(pa, pb, s))
        assert is_conservative(sol.bound, actual, tol=1e-6)
    assert feasibility_margin(prob, sol.gain_a, sol.bound) >= -1e-7


def test_solve_deterministic():
    rng = np.random.default_rng(3)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    samples = [s.p_ab for s in
               sample_set(pa, pb, CrossSparsityPattern.unconstrained(2, 2), 10, seed=5)]
    s1 = solve(build_problem(pa, pb, samples))
    s2 = solve(build_problem(pa, pb, samples))
    np.testing.assert_array_equal(s1.bound, s2.bound)
    np.testing.assert_array_equal(s1.gain_a, s2.gain_a)
    assert s1.newton_iterations == s2.newton_iterations


def test_solve_budget_exhaustion_reports_status():
    rng = np.random.default_rng(4)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    samples = [s.p_ab for s in
               sample_set(pa, pb, CrossSparsityPattern.unconstrained(2, 2), 10, seed=6)]
    sol = solve(build_problem(pa, pb, samples), tol=1e-10, max_iters=2)
    assert sol.status is SolveStatus.MAX_ITERATIONS
    # even the truncated iterate is strictly feasible
    assert sol.min_lmi_eig > 0.0


def test_solve_validation():
    prob = build_problem(np.eye(1), np.eye(1), [np.zeros((1, 1))])
    with pytest.raises(DimensionError):
        solve(prob, tol=0.0)
    with pytest.raises(DimensionError):
        solve(prob, max_iters=0)


def test_more_samples_never_shrink_the_optimum():
    # growing the sample set adds constraints, so the optimal trace
    # cannot decrease (up to solver tolerance)
    rng = np.random.default_rng(5)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    draws = [s.p_ab for s in
             sample_set(pa, pb, CrossSparsityPattern.unconstrained(2, 2), 64, seed=7)]
    prev = -np.inf
    for n in (1, 4, 16, 64):
        sol = solve(build_problem(pa, pb, draws[:n]), tol=1e-8)
        obj = float(np.trace(sol.bound))
        assert obj >= prev - 1e-6 * max(abs(obj), 1.0)
        prev = obj


# ---------------------------------------------------------------------------
# composed sampling + solving

def test_robust_fuse_deterministic_and_documented():
    rng = np.random.default_rng(6)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    a, b = est(rng.standard_normal(2), pa), est(rng.standard_normal(2), pb)
    pat = CrossSparsityPattern(2, 2, frozenset({(0, 1)}))
    r1 = robust_fuse(a, b, pat, n=50, seed=11, tol=1e-6)
    r2 = robust_fuse(a, b, pat, n=50, seed=11, tol=1e-6)
    np.testing.assert_array_equal(r1.bound, r2.bound)
    assert r1.method.value == "SDP"
    diag = r1.diagnostics
    assert diag["n_samples"] == 50 and diag["seed"] == 11
    assert diag["status"] == "optimal"
    assert diag["redraws"] == 0
    with pytest.raises(DimensionError):
        robust_fuse(a, b, pat, n=0, seed=1)


def test_robust_fuse_bound_conservative_on_fresh_samples():
    # check against samples the solver never saw
    rng = np.random.default_rng(7)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    a, b = est(np.zeros(2), pa), est(np.zeros(2), pb)
    pat = CrossSparsityPattern.unconstrained(2, 2)
    r = robust_fuse(a, b, pat, n=400, seed=12)
    fresh = sample_set(pa, pb, pat, 100, seed=999)
    worst = min(
        float(np.linalg.eigvalsh(
            r.bound - realized_cov(r.gain_a, r.gain_b,
                                   JointCovariance(pa, pb, s.p_ab)))[0])
        for s in fresh)
    # a sampled program is only approximately robust; fresh draws may
    # violate slightly but not grossly
    assert worst > -0.05 * float(np.linalg.norm(r.bound, 2))


# ---------------------------------------------------------------------------
# problem round trip

def test_problem_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    samples = [s.p_ab for s in
               sample_set(pa, pb, CrossSparsityPattern.unconstrained(2, 2), 3, seed=8)]
    prob = build_problem(pa, pb, samples)
    d = problem_to_dict(prob)
    again = problem_from_dict(d)
    np.testing.assert_allclose(again.p_a, prob.p_a)
    assert again.n == prob.n
    path = tmp_path / "problem.json"
    save_problem(path, prob)
    loaded = load_problem(path)
    np.testing.assert_allclose(loaded.joint_inverses, prob.joint_inverses)
