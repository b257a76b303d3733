"""Closed-form fusion rules: intersection, block-wise intersection, exact."""

import numpy as np
import pytest

from cofusion.core import (
    BlockPartition,
    CrossSparsityPattern,
    DimensionError,
    GaussianEstimate,
    JointCovariance,
    NotPositiveDefiniteError,
    is_conservative,
)
from cofusion.fusion import (
    ci_fuse,
    exact_fuse,
    nmci_fuse,
    optimize_ci_omega,
    realized_cov,
)
from cofusion.sampler import sample_cross

P_A = np.diag([3.0, 1.0])
P_B = np.diag([1.0, 4.0])


def rand_spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T + d * np.eye(d))


def est(mean, cov, labels=None):
    return GaussianEstimate(np.asarray(mean, dtype=float), cov,
                            tuple(labels) if labels else ())


# ---------------------------------------------------------------------------
# weight optimization

def test_optimize_omega_interior_minimum():
    # frozen oracle values for the diag(3,1) / diag(1,4) pair
    w = optimize_ci_omega(P_A, P_B)
    assert w == pytest.approx(0.556349177898, abs=1e-6)
    ia, ib = np.linalg.inv(P_A), np.linalg.inv(P_B)
    f = float(np.trace(np.linalg.inv(w * ia + (1 - w) * ib)))
    assert f == pytest.approx(3.088232977134, abs=1e-9)
    # the endpoint objectives are the swapped traces
    assert float(np.trace(P_B)) == 5.0
    assert float(np.trace(P_A)) == 4.0
    assert f < 4.0


@pytest.mark.parametrize("va, vb, expected", [
    (3.0, 1.0, 0.0),   # all weight on the tighter estimate
    (1.0, 4.0, 1.0),
])
def test_optimize_omega_endpoint_snap(va, vb, expected):
    assert optimize_ci_omega([[va]], [[vb]]) == expected


def test_optimize_omega_tie_resolves_to_half():
    assert optimize_ci_omega(np.eye(3), np.eye(3)) == 0.5


def test_optimize_omega_objective_is_minimal_on_grid():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pa, pb = rand_spd(rng, 3), rand_spd(rng, 3)
        ia, ib = np.linalg.inv(pa), np.linalg.inv(pb)

        def f(w):
            return float(np.trace(np.linalg.inv(w * ia + (1 - w) * ib)))

        w = optimize_ci_omega(pa, pb)
        best = min(f(v) for v in np.linspace(0.0, 1.0, 201))
        assert f(w) <= best + 1e-6 * abs(best)


# ---------------------------------------------------------------------------
# monolithic intersection

def test_ci_endpoints_return_inputs_exactly():
    rng = np.random.default_rng(6)
    a = est(rng.standard_normal(2), rand_spd(rng, 2))
    b = est(rng.standard_normal(2), rand_spd(rng, 2))
    r0 = ci_fuse(a, b, omega=0.0)
    np.testing.assert_array_equal(r0.bound, b.covariance)
    np.testing.assert_array_equal(r0.fused_mean, b.mean)
    r1 = ci_fuse(a, b, omega=1.0)
    np.testing.assert_array_equal(r1.bound, a.covariance)
    np.testing.assert_array_equal(r1.fused_mean, a.mean)


def test_ci_information_identity():
    rng = np.random.default_rng(7)
    a = est(rng.standard_normal(3), rand_spd(rng, 3))
    b = est(rng.standard_normal(3), rand_spd(rng, 3))
    w = 0.3
    r = ci_fuse(a, b, omega=w)
    info = w * np.linalg.inv(a.covariance) + (1 - w) * np.linalg.inv(b.covariance)
    np.testing.assert_allclose(np.linalg.inv(r.bound), info, rtol=1e-10)
    np.testing.assert_allclose(r.gain_a + r.gain_b, np.eye(3), atol=1e-12)
    # the fused mean is the gain-weighted mean
    np.testing.assert_allclose(r.fused_mean, r.gain_a @ a.mean + r.gain_b @ b.mean,
                               rtol=1e-10, atol=1e-12)


def test_ci_optimized_never_worse_than_endpoints():
    rng = np.random.default_rng(8)
    for _ in range(10):
        a = est(np.zeros(2), rand_spd(rng, 2))
        b = est(np.zeros(2), rand_spd(rng, 2))
        r = ci_fuse(a, b)
        t = float(np.trace(r.bound))
        assert t <= float(np.trace(a.covariance)) + 1e-9
        assert t <= float(np.trace(b.covariance)) + 1e-9
        assert r.diagnostics["omega_source"] == "optimized"


def test_ci_conservative_under_any_admissible_joint():
    rng = np.random.default_rng(9)
    pat = CrossSparsityPattern.unconstrained(2, 2)
    for k in range(25):
        pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
        a, b = est(np.zeros(2), pa), est(np.zeros(2), pb)
        r = ci_fuse(a, b)
        cross = sample_cross(pa, pb, pat, seed=1000 + k).p_ab
        actual = realized_cov(r.gain_a, r.gain_b, JointCovariance(pa, pb, cross))
        assert is_conservative(r.bound, actual, tol=1e-9)


def test_ci_rejects_mismatched_labels():
    a = est(np.zeros(2), np.eye(2), ("p", "q"))
    b = est(np.zeros(2), np.eye(2), ("q", "p"))
    c = est(np.zeros(2), np.eye(2), ("r", "s"))
    with pytest.raises(DimensionError, match="reindex"):
        ci_fuse(a, b)
    with pytest.raises(DimensionError):
        ci_fuse(a, c)
    with pytest.raises(DimensionError):
        ci_fuse(a, est(np.zeros(2), np.eye(2), ("p", "q")), omega=1.5)


# ---------------------------------------------------------------------------
# block-wise intersection

def test_nmci_reference_pair():
    a, b = est([0.0, 0.0], P_A), est([0.0, 0.0], P_B)
    r = nmci_fuse(a, b, BlockPartition(((0,), (1,))))
    np.testing.assert_allclose(r.bound, np.eye(2), atol=1e-6)
    np.testing.assert_allclose(r.omega, [0.0, 1.0], atol=1e-6)


def test_nmci_never_above_monolithic_trace():
    rng = np.random.default_rng(10)
    part = BlockPartition.contiguous([2, 2])
    for _ in range(10):
        ca = np.zeros((4, 4))
        cb = np.zeros((4, 4))
        for blk in part.blocks:
            ix = np.ix_(blk, blk)
            ca[ix] = rand_spd(rng, 2)
            cb[ix] = rand_spd(rng, 2)
        a, b = est(rng.standard_normal(4), ca), est(rng.standard_normal(4), cb)
        nm = nmci_fuse(a, b, part)
        mono = ci_fuse(a, b)
        assert float(np.trace(nm.bound)) <= float(np.trace(mono.bound)) + 1e-9


def test_nmci_block_means_match_per_block_ci():
    rng = np.random.default_rng(11)
    part = BlockPartition(((0, 1), (2,)))
    ca = np.zeros((3, 3))
    cb = np.zeros((3, 3))
    ca[:2, :2], ca[2, 2] = rand_spd(rng, 2), 2.0
    cb[:2, :2], cb[2, 2] = rand_spd(rng, 2), 0.5
    a, b = est(rng.standard_normal(3), ca), est(rng.standard_normal(3), cb)
    r = nmci_fuse(a, b, part)
    for blk in part.blocks:
        sub = ci_fuse(a.marginal(blk), b.marginal(blk))
        np.testing.assert_allclose(r.fused_mean[list(blk)], sub.fused_mean, rtol=1e-10)
        np.testing.assert_allclose(r.bound[np.ix_(blk, blk)], sub.bound, rtol=1e-10)


def test_nmci_strict_rejects_coupling_lenient_drops_it():
    part = BlockPartition(((0,), (1,)))
    coupled = np.array([[2.0, 0.8], [0.8, 2.0]])
    a = est([0.0, 0.0], coupled)
    b = est([0.0, 0.0], np.eye(2))
    with pytest.raises(DimensionError, match="lenient"):
        nmci_fuse(a, b, part, strict=True)
    r = nmci_fuse(a, b, part, strict=False)
    assert r.diagnostics["dropped_mass_a"] > 0.0
    assert r.diagnostics["dropped_mass_b"] == 0.0
    # off-block entries of the bound are zero after the projection
    assert r.bound[0, 1] == 0.0


def test_nmci_partition_must_cover_state():
    a = est(np.zeros(3), np.eye(3))
    with pytest.raises(DimensionError):
        nmci_fuse(a, a, BlockPartition(((0,), (1,))))


# ---------------------------------------------------------------------------
# exact fusion with known cross-covariance

def test_exact_independent_matches_information_form():
    rng = np.random.default_rng(12)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    a, b = est(rng.standard_normal(2), pa), est(rng.standard_normal(2), pb)
    r = exact_fuse(a, b, np.zeros((2, 2)))
    info = np.linalg.inv(pa) + np.linalg.inv(pb)
    expected_cov = np.linalg.inv(info)
    expected_mean = expected_cov @ (np.linalg.inv(pa) @ a.mean
                                    + np.linalg.inv(pb) @ b.mean)
    np.testing.assert_allclose(r.bound, expected_cov, rtol=1e-9)
    np.testing.assert_allclose(r.fused_mean, expected_mean, rtol=1e-9)


def test_exact_identical_inputs_degenerate_joint():
    a = est([1.0, -1.0], np.eye(2))
    r = exact_fuse(a, a, np.eye(2))
    np.testing.assert_allclose(r.bound, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(r.fused_mean, a.mean)
    np.testing.assert_allclose(r.gain_a, np.zeros((2, 2)), atol=1e-12)
    assert r.diagnostics["innovation_rank"] == 0


def test_exact_bound_not_above_either_marginal():
    rng = np.random.default_rng(13)
    pat = CrossSparsityPattern.unconstrained(2, 2)
    for k in range(10):
        pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
        cross = sample_cross(pa, pb, pat, seed=2000 + k).p_ab
        a, b = est(np.zeros(2), pa), est(np.zeros(2), pb)
        r = exact_fuse(a, b, cross)
        assert is_conservative(pa, r.bound)
        assert is_conservative(pb, r.bound)
        # and it is the realized covariance of its own gains
        np.testing.assert_allclose(
            r.bound, realized_cov(r.gain_a, r.gain_b, JointCovariance(pa, pb, cross)),
            atol=1e-12)


def test_exact_rejects_inconsistent_cross():
    a = est([0.0], [[1.0]])
    b = est([0.0], [[1.0]])
    with pytest.raises(NotPositiveDefiniteError):
        exact_fuse(a, b, [[2.0]])


# ---------------------------------------------------------------------------
# realized covariance

def test_realized_cov_identity_gains():
    rng = np.random.default_rng(14)
    pa, pb = rand_spd(rng, 2), rand_spd(rng, 2)
    joint = JointCovariance(pa, pb, np.zeros((2, 2)))
    np.testing.assert_allclose(realized_cov(np.eye(2), np.zeros((2, 2)), joint), pa)
    np.testing.assert_allclose(realized_cov(np.zeros((2, 2)), np.eye(2), joint), pb)
    half = realized_cov(0.5 * np.eye(2), 0.5 * np.eye(2), joint)
    np.testing.assert_allclose(half, 0.25 * (pa + pb), rtol=1e-12)


def test_realized_cov_shape_checks():
    joint = JointCovariance(np.eye(2), np.eye(3), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        realized_cov(np.eye(3), np.eye(3), joint)
