"""Closed-form fusion rules for pairs of Gaussian estimates.

Covariance intersection with a trace-optimal weight, its block-wise
variant for estimates whose unknown correlation cannot couple different
state blocks, and the minimum-variance rule for the (rare) case where
the cross-covariance is actually known.
"""

from __future__ import annotations

import numpy as np

from .core import (
    BlockPartition,
    DimensionError,
    FusionMethod,
    FusionResult,
    GaussianEstimate,
    JointCovariance,
    NotPositiveDefiniteError,
    check_spd,
    min_eigenvalue,
    symmetrize,
)

OMEGA_TOL = 1e-8
# relative objective difference below which two weights count as tied
_TIE_RTOL = 1e-12


def _check_same_labels(a: GaussianEstimate, b: GaussianEstimate) -> None:
    if a.labels == b.labels:
        return
    if set(a.labels) == set(b.labels):
        raise DimensionError(
            "estimates carry the same labels in different orders; "
            "call .reindex() on one of them before fusing")
    raise DimensionError("estimates describe different state vectors")


def optimize_ci_omega(p_a: np.ndarray, p_b: np.ndarray, tol: float = OMEGA_TOL) -> float:
    """Weight minimizing the trace of the intersected covariance.

    The objective trace((w*P_a^-1 + (1-w)*P_b^-1)^-1) is convex on [0, 1],
    so a golden-section search suffices.  Exact ties (e.g. P_a == P_b)
    resolve to 0.5; minima within tol of an endpoint snap onto it.
    """
    ia = np.linalg.inv(check_spd(p_a, name="P_a"))
    ib = np.linalg.inv(check_spd(p_b, name="P_b"))

    def f(w: float) -> float:
        return float(np.trace(np.linalg.inv(w * ia + (1.0 - w) * ib)))

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    lo, hi = 0.0, 1.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = f(d)
    w = 0.5 * (lo + hi)
    fw = f(w)
    scale = max(abs(fw), 1.0)
    if abs(f(0.5) - fw) <= _TIE_RTOL * scale:
        return 0.5
    if f(0.0) <= fw + _TIE_RTOL * scale or w < tol:
        return 0.0
    if f(1.0) <= fw + _TIE_RTOL * scale or w > 1.0 - tol:
        return 1.0
    return w


def ci_fuse(a: GaussianEstimate, b: GaussianEstimate,
            omega: float | None = None) -> FusionResult:
    """Covariance intersection of two same-state estimates.

    With weight w the fused information is w*P_a^-1 + (1-w)*P_b^-1, which
    is conservative for every admissible correlation between the inputs.
    ``omega=None`` picks the trace-optimal weight.  At w = 0 (or 1) the
    result is exactly estimate b (or a); no inversion is attempted there.
    """
    _check_same_labels(a, b)
    source = "given"
    if omega is None:
        omega = optimize_ci_omega(a.covariance, b.covariance)
        source = "optimized"
    w = float(omega)
    if not (0.0 <= w <= 1.0):
        raise DimensionError(f"omega must lie in [0, 1], got {w}")
    d = a.dim
    eye = np.eye(d)
    if w == 0.0:
        ga, bound, mean = np.zeros((d, d)), np.array(b.covariance), np.array(b.mean)
    elif w == 1.0:
        ga, bound, mean = eye.copy(), np.array(a.covariance), np.array(a.mean)
    else:
        ia = np.linalg.inv(a.covariance)
        ib = np.linalg.inv(b.covariance)
        bound = symmetrize(np.linalg.inv(w * ia + (1.0 - w) * ib))
        ga = w * bound @ ia
        mean = ga @ a.mean + (bound @ ((1.0 - w) * ib)) @ b.mean
    return FusionResult(
        gain_a=ga, gain_b=eye - ga, fused_mean=mean, bound=bound,
        method=FusionMethod.CI, omega=np.array([w]),
        diagnostics={"omega_source": source, "trace": float(np.trace(bound))})


def nmci_fuse(a: GaussianEstimate, b: GaussianEstimate, partition: BlockPartition,
              *, strict: bool = True, tol: float = 1e-9) -> FusionResult:
    """Block-wise covariance intersection with an independent weight per block.

    Valid when each input covariance is block-diagonal over ``partition``
    and the unknown cross-correlation cannot couple different blocks; the
    result then never has a larger trace than monolithic intersection.
    In strict mode a covariance with off-block mass above tol (relative
    Frobenius) is an error; in lenient mode the off-block entries are
    dropped first and the dropped mass is reported in the diagnostics.
    """
    _check_same_labels(a, b)
    if partition.dim != a.dim:
        raise DimensionError(
            f"partition covers {partition.dim} states but estimates have {a.dim}")

    off = np.ones((a.dim, a.dim), dtype=bool)
    for blk in partition.blocks:
        off[np.ix_(blk, blk)] = False

    def _project(est: GaussianEstimate, which: str) -> tuple[GaussianEstimate, float]:
        mass = float(np.linalg.norm(est.covariance[off]))
        rel = mass / max(float(np.linalg.norm(est.covariance)), 1e-300)
        if rel <= tol:
            return est, 0.0
        if strict:
            raise DimensionError(
                f"covariance {which} couples different partition blocks "
                f"(relative off-block mass {rel:.2e} > {tol:g}); "
                "use lenient mode to drop the coupling")
        cov = np.array(est.covariance)
        cov[off] = 0.0
        return GaussianEstimate(est.mean, cov, est.labels), rel

    pa, dropped_a = _project(a, "A")
    pb, dropped_b = _project(b, "B")

    d = a.dim
    gain_a = np.zeros((d, d))
    bound = np.zeros((d, d))
    mean = np.zeros(d)
    omegas = np.zeros(partition.n_blocks)
    for k, blk in enumerate(partition.blocks):
        sub = ci_fuse(pa.marginal(blk), pb.marginal(blk))
        ix = np.ix_(blk, blk)
        gain_a[ix] = sub.gain_a
        bound[ix] = sub.bound
        mean[list(blk)] = sub.fused_mean
        omegas[k] = float(sub.omega[0])
    return FusionResult(
        gain_a=gain_a, gain_b=np.eye(d) - gain_a, fused_mean=mean, bound=bound,
        method=FusionMethod.NMCI, omega=omegas,
        diagnostics={"strict": strict, "dropped_mass_a": dropped_a,
                     "dropped_mass_b": dropped_b, "trace": float(np.trace(bound))})


def exact_fuse(a: GaussianEstimate, b: GaussianEstimate, p_ab: np.ndarray,
               tol: float = 1e-9) -> FusionResult:
    """Minimum-variance fusion when the cross-covariance is known.

    Gains follow from minimizing the fused covariance subject to the
    gains summing to identity; the innovation-like term
    S = P_a + P_b - P_ab - P_ab^T is inverted by pseudo-inverse so that
    degenerate joints (e.g. two copies of the same estimate) still fuse.
    The joint covariance must be positive semidefinite within tol.
    """
    _check_same_labels(a, b)
    joint = JointCovariance(a.covariance, b.covariance, p_ab)
    g = joint.assembled()
    scale = max(float(np.linalg.norm(g, 2)), 1.0)
    if min_eigenvalue(g) < -tol * scale:
        raise NotPositiveDefiniteError(
            "joint covariance is indefinite; the stated cross-covariance "
            "is inconsistent with the marginals")
    s = symmetrize(a.covariance + b.covariance - p_ab - np.asarray(p_ab).T)
    ga = (b.covariance - np.asarray(p_ab, dtype=float).T) @ np.linalg.pinv(s, hermitian=True)
    gb = np.eye(a.dim) - ga
    bound = realized_cov(ga, gb, joint)
    mean = ga @ a.mean + gb @ b.mean
    return FusionResult(
        gain_a=ga, gain_b=gb, fused_mean=mean, bound=bound,
        method=FusionMethod.EXACT, omega=None,
        diagnostics={"innovation_rank": int(np.linalg.matrix_rank(s, tol=1e-10 * scale)),
                     "trace": float(np.trace(bound))})


def realized_cov(gain_a: np.ndarray, gain_b: np.ndarray,
                 joint: JointCovariance) -> np.ndarray:
    """Covariance actually achieved by linear gains under a given joint.

    Returns [K_a K_b] J [K_a K_b]^T, symmetrized.  This is what the fused
    error covariance really is when the joint covariance happens to be J,
    regardless of which bound the gains were designed against.
    """
    ga = np.asarray(gain_a, dtype=float)
    gb = np.asarray(gain_b, dtype=float)
    if ga.ndim != 2 or gb.ndim != 2 or ga.shape[0] != gb.shape[0]:
        raise DimensionError("gains must be matrices with equal row counts")
    if ga.shape[1] != joint.dim_a or gb.shape[1] != joint.dim_b:
        raise DimensionError("gain columns do not match the joint covariance blocks")
    k = np.hstack([ga, gb])
    return symmetrize(k @ joint.assembled() @ k.T)
