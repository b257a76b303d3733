"""Rejection sampler over admissible cross-covariances.

Draws the free entries of the cross-correlation uniformly from [-1, 1],
keeps the draw when the assembled joint correlation matrix is positive
definite, and rescales by the marginal standard deviations.  Entries the
sparsity pattern marks as zero are never drawn, so they are exactly zero
in every sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CrossSparsityPattern,
    DimensionError,
    GaussianEstimate,
    SamplingError,
    cov_to_corr,
)

DEFAULT_MAX_ATTEMPTS = 1_000_000
# a proposal is accepted when the joint correlation's smallest eigenvalue
# clears this margin, keeping later Cholesky factorizations safe
PD_MARGIN = 1e-9


@dataclass(frozen=True)
class UncertaintySample:
    """One admissible cross-covariance and the attempts it cost to draw."""

    p_ab: np.ndarray
    attempts: int

    def __post_init__(self):
        p = np.array(self.p_ab, dtype=float)
        p.flags.writeable = False
        object.__setattr__(self, "p_ab", p)
        if self.attempts < 1:
            raise DimensionError("attempts must be at least 1")


def _prepare(p_a, p_b, pattern: CrossSparsityPattern):
    corr_a, std_a = cov_to_corr(p_a)
    corr_b, std_b = cov_to_corr(p_b)
    if (pattern.dim_a, pattern.dim_b) != (corr_a.shape[0], corr_b.shape[0]):
        raise DimensionError(
            f"pattern is {pattern.dim_a}x{pattern.dim_b} but covariances are "
            f"{corr_a.shape[0]} and {corr_b.shape[0]} dimensional")
    free = pattern.free_indices()
    da, db = pattern.dim_a, pattern.dim_b
    joint = np.zeros((da + db, da + db))
    joint[:da, :da] = corr_a
    joint[da:, da:] = corr_b
    return joint, std_a, std_b, free


def _draw(joint, std_a, std_b, free, da, rng, max_attempts) -> UncertaintySample:
    if not free:
        # nothing to draw; the block-diagonal joint is PD by construction
        return UncertaintySample(np.zeros((da, joint.shape[0] - da)), 1)
    rows = np.array([i for i, _ in free])
    cols = np.array([j for _, j in free])
    for attempt in range(1, max_attempts + 1):
        c = rng.uniform(-1.0, 1.0, size=len(free))
        joint[rows, da + cols] = c
        joint[da + cols, rows] = c
        if np.linalg.eigvalsh(joint)[0] > PD_MARGIN:
            c_ab = np.zeros((da, joint.shape[0] - da))
            c_ab[rows, cols] = c
            return UncertaintySample(c_ab * np.outer(std_a, std_b), attempt)
    raise SamplingError(
        f"no admissible cross-covariance found in {max_attempts} attempts; "
        "the marginals may be near-singular or the pattern leaves too many "
        "free entries for this dimension")


def sample_cross(p_a: np.ndarray, p_b: np.ndarray, pattern: CrossSparsityPattern,
                 seed: int, *, max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> UncertaintySample:
    """Draw one admissible cross-covariance for the given marginals.

    Identical (p_a, p_b, pattern, seed) always reproduce the same sample,
    on any platform.
    """
    joint, std_a, std_b, free = _prepare(p_a, p_b, pattern)
    rng = np.random.Generator(np.random.PCG64(seed))
    return _draw(joint, std_a, std_b, free, pattern.dim_a, rng, max_attempts)


def sample_set(p_a: np.ndarray, p_b: np.ndarray, pattern: CrossSparsityPattern,
               n: int, seed: int, *,
               max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> list[UncertaintySample]:
    """Draw n admissible cross-covariances from one seeded stream.

    The stream is consumed sequentially, so for a fixed seed the first k
    samples of sample_set(..., n) and sample_set(..., k) coincide; nested
    sample sets are therefore prefixes of each other.
    """
    if n < 1:
        raise DimensionError("n must be at least 1")
    joint, std_a, std_b, free = _prepare(p_a, p_b, pattern)
    rng = np.random.Generator(np.random.PCG64(seed))
    return [_draw(joint, std_a, std_b, free, pattern.dim_a, rng, max_attempts)
            for _ in range(n)]


def sample_for_estimates(a: GaussianEstimate, b: GaussianEstimate,
                         pattern: CrossSparsityPattern, n: int, seed: int, *,
                         max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> list[UncertaintySample]:
    """Convenience wrapper: sample_set on the covariances of two estimates."""
    return sample_set(a.covariance, b.covariance, pattern, n, seed,
                      max_attempts=max_attempts)
