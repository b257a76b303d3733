"""Sampled conservative-fusion program and the embedded solver for it.

The fusion gains and bound are the minimizers of

    minimize    trace(Pbar)
    subject to  [[Pbar, K], [K^T, J_i^{-1}]] >= 0   for every sampled
                joint covariance J_i,  K = [K_a, I - K_a],

which by the Schur complement says exactly that Pbar dominates the fused
covariance K J_i K^T realized under each sample.  K_b is eliminated as
I - K_a, so the unknowns are K_a (d*d entries) and the upper triangle of
Pbar (d(d+1)/2 entries).

The embedded solver is a primal log-det barrier method with damped
Newton centering and a geometric schedule on the path parameter.
Problem sizes here are tiny (blocks of side 3d with d <= ~8, up to a few
thousand samples), so this is both adequate and keeps the package free
of solver dependencies; per-iteration cost is linear in the number of
samples because the blocks are never stacked into one big matrix.

Certification: after centering at path parameter t, the barrier
parameter nu = 3*d*n bounds the duality gap by nu/t, so the reported
``gap`` is nu / (t * |objective|), a guaranteed relative optimality gap
at centered points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import (
    DimensionError,
    FusionMethod,
    FusionResult,
    GaussianEstimate,
    NotPositiveDefiniteError,
    SolverError,
    check_spd,
    make_substream_seed,
    symmetrize,
    _jsonable,
)
from .fusion import _check_same_labels
from .sampler import DEFAULT_MAX_ATTEMPTS, CrossSparsityPattern, sample_cross, sample_set

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITERS = 200
# joint-covariance Cholesky pivots below this reject the sample
MIN_PIVOT = 1e-10
# geometric increase of the path parameter (gap shrinks by 0.2 per stage)
T_GROWTH = 5.0
_NEWTON_EPS = 1e-9          # squared Newton decrement / 2 at which a point counts as centered
_CHUNK_ELEMS = 4_000_000    # bound on chunk * m * (3d)^2 in the Hessian accumulation


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE_NUMERICS = "infeasible_numerics"


@dataclass(frozen=True, eq=False)
class SampledFusionProblem:
    """Marginals, sampled joints, and their inverses, ready to solve."""

    p_a: np.ndarray
    p_b: np.ndarray
    samples: tuple[np.ndarray, ...]
    joint_inverses: np.ndarray
    d: int

    @property
    def n(self) -> int:
        return len(self.samples)


def build_problem(p_a, p_b, samples) -> SampledFusionProblem:
    """Assemble the sampled program; inverts each joint once, by Cholesky.

    Each sample is a d x d cross-covariance; the implied joint
    [[P_a, S], [S^T, P_b]] must be positive definite with every Cholesky
    pivot above 1e-10, otherwise the sample is rejected (the raised error
    carries ``sample_index`` so callers can redraw it).
    """
    p_a = check_spd(p_a, name="P_a")
    p_b = check_spd(p_b, name="P_b")
    d = p_a.shape[0]
    if p_b.shape[0] != d:
        raise DimensionError("marginals must have equal dimension")
    arrs = [np.asarray(s, dtype=float) for s in samples]
    if not arrs:
        raise DimensionError("at least one sample is required")
    for i, s in enumerate(arrs):
        if s.shape != (d, d):
            raise DimensionError(f"sample {i} has shape {s.shape}, expected ({d}, {d})")
    joints = np.empty((len(arrs), 2 * d, 2 * d))
    joints[:, :d, :d] = p_a
    joints[:, d:, d:] = p_b
    for i, s in enumerate(arrs):
        joints[i, :d, d:] = s
        joints[i, d:, :d] = s.T
    try:
        chol = np.linalg.cholesky(joints)
        pivots = np.diagonal(chol, axis1=1, axis2=2)
        bad = np.flatnonzero(np.min(pivots, axis=1) < MIN_PIVOT)
    except np.linalg.LinAlgError:
        bad = None
    if bad is None or len(bad):
        # identify the first offender for the caller
        for i in range(len(arrs)):
            try:
                piv = np.diagonal(np.linalg.cholesky(joints[i]))
                ok = bool(np.min(piv) >= MIN_PIVOT)
            except np.linalg.LinAlgError:
                ok = False
            if not ok:
                err = NotPositiveDefiniteError(
                    f"sample {i}: joint covariance fails the conditioning "
                    f"threshold (Cholesky pivot < {MIN_PIVOT:g})")
                err.sample_index = i
                raise err
    linv = np.linalg.inv(chol)
    q = linv.transpose(0, 2, 1) @ linv
    q = 0.5 * (q + q.transpose(0, 2, 1))
    q.flags.writeable = False
    frozen = []
    for s in arrs:
        c = s.copy()
        c.flags.writeable = False
        frozen.append(c)
    return SampledFusionProblem(p_a=p_a, p_b=p_b, samples=tuple(frozen),
                                joint_inverses=q, d=d)


@dataclass(frozen=True, eq=False)
class SdpSolution:
    gain_a: np.ndarray
    gain_b: np.ndarray
    bound: np.ndarray
    objective: float
    status: SolveStatus
    gap: float
    newton_iterations: int
    min_lmi_eig: float

    def to_dict(self) -> dict:
        return {
            "gain_a": self.gain_a.tolist(),
            "gain_b": self.gain_b.tolist(),
            "bound": self.bound.tolist(),
            "objective": self.objective,
            "status": self.status.value,
            "gap": self.gap,
            "newton_iterations": self.newton_iterations,
            "min_lmi_eig": self.min_lmi_eig,
        }


class _Workspace:
    """Basis tensors and evaluators for one problem instance."""

    def __init__(self, problem: SampledFusionProblem):
        d, n = problem.d, problem.n
        p3 = 3 * d
        iu_r, iu_c = np.triu_indices(d)
        npv = len(iu_r)
        m = npv + d * d
        a = np.zeros((m, p3, p3))
        for k in range(npv):
            i, j = int(iu_r[k]), int(iu_c[k])
            a[k, i, j] = 1.0
            a[k, j, i] = 1.0
        for r in range(d):
            for c in range(d):
                k = npv + r * d + c
                a[k, r, d + c] = 1.0
                a[k, d + c, r] = 1.0
                a[k, r, 2 * d + c] = -1.0
                a[k, 2 * d + c, r] = -1.0
        cvec = np.zeros(m)
        cvec[np.flatnonzero(iu_r == iu_c)] = 1.0
        base = np.zeros((n, p3, p3))
        base[:, d:, d:] = problem.joint_inverses
        self.d, self.n, self.p3, self.npv, self.m = d, n, p3, npv, m
        self.iu = (iu_r, iu_c)
        self.a, self.cvec, self.base = a, cvec, base
        self.eye = np.eye(d)

    def pack(self, pbar: np.ndarray, ka: np.ndarray) -> np.ndarray:
        return np.concatenate([pbar[self.iu], ka.reshape(-1)])

    def unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pbar = np.zeros((self.d, self.d))
        pbar[self.iu] = x[:self.npv]
        pbar[self.iu[1], self.iu[0]] = x[:self.npv]
        return pbar, x[self.npv:].reshape(self.d, self.d)

    def lmis(self, x: np.ndarray) -> np.ndarray:
        d = self.d
        pbar, ka = self.unpack(x)
        g = self.base.copy()
        g[:, :d, :d] = pbar
        g[:, :d, d:2 * d] = ka
        g[:, d:2 * d, :d] = ka.T
        kb = self.eye - ka
        g[:, :d, 2 * d:] = kb
        g[:, 2 * d:, :d] = kb.T
        return g

    def chol_logdet(self, x: np.ndarray):
        """(G, logdet) when x is strictly feasible, else (None, -inf)."""
        g = self.lmis(x)
        if not np.all(np.isfinite(g)):
            return None, -np.inf
        try:
            chol = np.linalg.cholesky(g)
        except np.linalg.LinAlgError:
            return None, -np.inf
        logdet = 2.0 * float(np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2))))
        return g, logdet

    def barrier_grad_hess(self, g: np.ndarray):
        s = np.linalg.inv(g)
        s = 0.5 * (s + s.transpose(0, 2, 1))
        grad = -np.einsum('pq,kpq->k', s.sum(axis=0), self.a)
        m, p3 = self.m, self.p3
        hess = np.zeros((m, m))
        step = max(1, int(_CHUNK_ELEMS // max(m * p3 * p3, 1)))
        for s0 in range(0, self.n, step):
            sc = s[s0:s0 + step]
            u = np.einsum('ipq,kqr->ikpr', sc, self.a, optimize=True)
            hess += np.einsum('ikpq,ilqp->kl', u, u, optimize=True)
        return grad, 0.5 * (hess + hess.T)


def _initial_point(ws: _Workspace, problem: SampledFusionProblem):
    """Strictly feasible start: central gains and an inflated bound.

    K_a = I/2 with Pbar = 2 (P_a + P_b) satisfies every LMI strictly
    because the realized covariance under any PD joint never exceeds
    P_a + P_b for those gains; doubling Pbar is the fallback in case
    conditioning eats the margin.
    """
    ka = 0.5 * ws.eye
    pbar = 2.0 * symmetrize(problem.p_a + problem.p_b)
    for _ in range(64):
        x = ws.pack(pbar, ka)
        g, logdet = ws.chol_logdet(x)
        if g is not None:
            return x
        pbar = 2.0 * pbar
    return None


def solve(problem: SampledFusionProblem, tol: float = DEFAULT_TOL,
          max_iters: int = DEFAULT_MAX_ITERS) -> SdpSolution:
    """Minimize trace(Pbar) over the sampled LMIs by barrier path-following.

    ``max_iters`` caps the total Newton steps across all path stages.
    Status is ``optimal`` only when the certified relative gap reached
    tol and every LMI holds within 1e-7; an exhausted budget returns the
    best iterate with status ``max_iterations``; a start point or linear
    algebra breakdown returns ``infeasible_numerics``.
    """
    if tol <= 0:
        raise DimensionError("tol must be positive")
    if max_iters < 1:
        raise DimensionError("max_iters must be at least 1")
    ws = _Workspace(problem)
    nu = float(3 * problem.d * problem.n)

    x = _initial_point(ws, problem)
    if x is None:
        zero = np.zeros((problem.d, problem.d))
        return SdpSolution(gain_a=0.5 * np.eye(problem.d), gain_b=0.5 * np.eye(problem.d),
                           bound=2.0 * symmetrize(problem.p_a + problem.p_b),
                           objective=float(np.trace(2.0 * (problem.p_a + problem.p_b))),
                           status=SolveStatus.INFEASIBLE_NUMERICS, gap=np.inf,
                           newton_iterations=0, min_lmi_eig=-np.inf)

    obj = float(ws.cvec @ x)
    t = nu / max(obj, 1e-12)
    used = 0
    status = SolveStatus.MAX_ITERATIONS
    gap = np.inf
    broke_down = False

    for _stage in range(80):
        # Newton centering at the current path parameter
        stalled = False
        while used < max_iters:
            g, logdet = ws.chol_logdet(x)
            if g is None:
                broke_down = True
                break
            grad_phi, hess = ws.barrier_grad_hess(g)
            grad = t * ws.cvec + grad_phi
            dx = None
            scale = max(float(np.max(np.abs(np.diag(hess)))), 1.0)
            for reg in (0.0, 1e-12, 1e-8, 1e-4):
                try:
                    cand = np.linalg.solve(hess + reg * scale * np.eye(ws.m), -grad)
                except np.linalg.LinAlgError:
                    continue
                lam2 = float(-grad @ cand)
                if np.isfinite(lam2) and lam2 >= 0.0:
                    dx = cand
                    break
            if dx is None:
                broke_down = True
                break
            if 0.5 * lam2 <= _NEWTON_EPS:
                break
            used += 1
            psi = t * float(ws.cvec @ x) - logdet
            gdx = float(grad @ dx)
            step = 1.0
            moved = False
            while step > 1e-14:
                trial = x + step * dx
                gt, ldt = ws.chol_logdet(trial)
                if gt is not None:
                    psit = t * float(ws.cvec @ trial) - ldt
                    if psit <= psi + 1e-2 * step * gdx:
                        x = trial
                        moved = True
                        break
                step *= 0.5
            if not moved:
                stalled = True
                break
        obj = float(ws.cvec @ x)
        gap = nu / (t * max(abs(obj), 1e-300))
        if broke_down:
            status = SolveStatus.INFEASIBLE_NUMERICS
            break
        if gap <= tol:
            status = SolveStatus.OPTIMAL
            break
        if used >= max_iters or stalled:
            status = SolveStatus.MAX_ITERATIONS
            break
        t *= T_GROWTH

    pbar, ka = ws.unpack(x)
    g_final = ws.lmis(x)
    min_eig = float(np.min(np.linalg.eigvalsh(g_final)))
    if status is SolveStatus.OPTIMAL and min_eig < -1e-7:
        status = SolveStatus.MAX_ITERATIONS
    return SdpSolution(gain_a=ka, gain_b=ws.eye - ka, bound=symmetrize(pbar),
                       objective=obj, status=status, gap=float(gap),
                       newton_iterations=used, min_lmi_eig=min_eig)


def feasibility_margin(problem: SampledFusionProblem, gain_a: np.ndarray,
                       bound: np.ndarray) -> float:
    """Smallest LMI eigenvalue at (gain_a, bound); >= 0 means feasible."""
    ws = _Workspace(problem)
    x = ws.pack(symmetrize(bound), np.asarray(gain_a, dtype=float))
    return float(np.min(np.linalg.eigvalsh(ws.lmis(x))))


def robust_fuse(a: GaussianEstimate, b: GaussianEstimate, pattern: CrossSparsityPattern,
                n: int, seed: int, tol: float = DEFAULT_TOL, *,
                max_iters: int = DEFAULT_MAX_ITERS,
                max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> FusionResult:
    """Sample the admissible cross-covariances and solve for optimal gains.

    Composes the rejection sampler, problem assembly, and the barrier
    solver.  Samples rejected by the conditioning gate at build time are
    redrawn from a dedicated substream (at most 100 redraws).  Raises
    SolverError when the solver reports a numerical breakdown; a budget
    exhaustion is returned with its status in the diagnostics.
    """
    _check_same_labels(a, b)
    if n < 1:
        raise DimensionError("n must be at least 1")
    drawn = sample_set(a.covariance, b.covariance, pattern, n, seed,
                       max_attempts=max_attempts)
    arrs = [s.p_ab for s in drawn]
    redraws = 0
    while True:
        try:
            problem = build_problem(a.covariance, b.covariance, arrs)
            break
        except NotPositiveDefiniteError as exc:
            idx = getattr(exc, "sample_index", None)
            if idx is None or redraws >= 100:
                raise
            redraws += 1
            arrs[idx] = sample_cross(
                a.covariance, b.covariance, pattern,
                make_substream_seed(seed, "redraw", redraws),
                max_attempts=max_attempts).p_ab
    sol = solve(problem, tol=tol, max_iters=max_iters)
    if sol.status is SolveStatus.INFEASIBLE_NUMERICS:
        raise SolverError("semidefinite solve broke down numerically "
                          f"(gap={sol.gap:.3e}); consider rescaling the inputs")
    mean = sol.gain_a @ a.mean + sol.gain_b @ b.mean
    return FusionResult(
        gain_a=sol.gain_a, gain_b=sol.gain_b, fused_mean=mean, bound=sol.bound,
        method=FusionMethod.SDP, omega=None,
        diagnostics={"n_samples": n, "seed": int(seed), "status": sol.status.value,
                     "gap": sol.gap, "objective": sol.objective,
                     "newton_iterations": sol.newton_iterations,
                     "min_lmi_eig": sol.min_lmi_eig, "redraws": redraws,
                     "trace": float(np.trace(sol.bound))})


# ---------------------------------------------------------------------------
# dump format for offline cross-checking against other solvers

def problem_to_dict(problem: SampledFusionProblem) -> dict:
    return {
        "schema": "cofusion-sdp-problem-v1",
        "d": problem.d,
        "p_a": problem.p_a.tolist(),
        "p_b": problem.p_b.tolist(),
        "cross_samples": [s.tolist() for s in problem.samples],
    }


def problem_from_dict(d: dict) -> SampledFusionProblem:
    from .core import ConfigError
    if d.get("schema") != "cofusion-sdp-problem-v1":
        raise ConfigError(f"unsupported problem schema {d.get('schema')!r}")
    return build_problem(np.asarray(d["p_a"], dtype=float),
                         np.asarray(d["p_b"], dtype=float),
                         [np.asarray(s, dtype=float) for s in d["cross_samples"]])


def save_problem(path, problem: SampledFusionProblem) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(problem_to_dict(problem)), fh, indent=2)
        fh.write("\n")


def load_problem(path) -> SampledFusionProblem:
    with open(path, "r", encoding="utf-8") as fh:
        return problem_from_dict(json.load(fh))


def save_solution(path, solution: SdpSolution) -> None:
    payload = {"schema": "cofusion-sdp-solution-v1"}
    payload.update(solution.to_dict())
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2)
        fh.write("\n")
