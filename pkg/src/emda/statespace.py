"""Shared state-space primitives: covariances, ensembles, seeded sampling.

Everything downstream (filters, estimators, harness) funnels its Gaussian
algebra through this module so that symmetrization, factorization and
jitter policy live in exactly one place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = float(np.log(2.0 * np.pi))

# Relative asymmetry above this is a caller bug, below it is float drift.
_ASYMMETRY_TOLERANCE = 1e-8
_JITTER_SCALE = 1e-10


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Matrix failed Cholesky factorization even after one jitter attempt."""


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


class SpdMatrix:
    """Symmetric positive semidefinite matrix with a cached Cholesky factor.

    The constructor symmetrizes float drift away and rejects grossly
    asymmetric input. Factorization is lazy: the zero matrix is legal (its
    factor is zero, for degenerate sampling); anything else gets one jitter
    of 1e-10 * mean diagonal added before failing.
    """

    def __init__(self, entries: np.ndarray):
        entries = np.asarray(entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError(f"covariance must be square, got shape {entries.shape}")
        if not np.isfinite(entries).all():
            raise ValueError("covariance has non-finite entries")
        scale = max(1.0, float(np.abs(entries).max()))
        asym = float(np.abs(entries - entries.T).max())
        if asym > _ASYMMETRY_TOLERANCE * scale:
            raise ValueError(f"matrix is asymmetric beyond tolerance: {asym / scale:.3e} relative")
        self._entries = _symmetrize(entries)
        self._entries.flags.writeable = False
        self._chol = None

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def dim(self) -> int:
        return self._entries.shape[0]

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular factor L with L @ L.T == entries."""
        if self._chol is None:
            a = self._entries
            if not a.any():
                self._chol = np.zeros_like(a)
            else:
                try:
                    self._chol = np.linalg.cholesky(a)
                except np.linalg.LinAlgError:
                    jitter = _JITTER_SCALE * np.trace(a) / a.shape[0]
                    try:
                        self._chol = np.linalg.cholesky(a + jitter * np.eye(a.shape[0]))
                    except np.linalg.LinAlgError:
                        raise NotPositiveDefiniteError(
                            f"matrix of dim {a.shape[0]} is not positive definite "
                            f"(jitter {jitter:.3e} did not help)") from None
            self._chol.flags.writeable = False
        return self._chol

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve entries @ x = b through the cached factor."""
        lower = self.chol
        if not (np.diag(lower) > 0.0).all():
            raise NotPositiveDefiniteError("cannot solve against a singular covariance")
        z = solve_triangular(lower, b, lower=True)
        return solve_triangular(lower.T, z, lower=False)

    def scaled(self, factor: float) -> "SpdMatrix":
        return SpdMatrix(factor * self._entries)

    @classmethod
    def identity(cls, dim: int) -> "SpdMatrix":
        return cls(np.eye(dim))

    @classmethod
    def scaled_identity(cls, variance: float, dim: int) -> "SpdMatrix":
        return cls(variance * np.eye(dim))

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim}, trace={np.trace(self._entries):.4g})"


@dataclass
class Ensemble:
    """A set of equally weighted state vectors, members as rows."""

    members: np.ndarray   # (n_p, n_x)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=float)
        if self.members.ndim != 2:
            raise ValueError(f"ensemble members must be 2-d (n_p, n_x), got {self.members.shape}")
        if not np.isfinite(self.members).all():
            raise ValueError("ensemble has non-finite members")

    @property
    def n_p(self) -> int:
        return self.members.shape[0]

    @property
    def n_x(self) -> int:
        return self.members.shape[1]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def anomalies(self) -> np.ndarray:
        """Mean-centered members, shape (n_p, n_x)."""
        return self.members - self.members.mean(axis=0)

    def cov(self) -> np.ndarray:
        """Sample covariance with the 1/(n_p - 1) normalization, symmetrized."""
        if self.n_p < 2:
            raise ValueError("sample covariance needs at least 2 members")
        a = self.anomalies()
        return _symmetrize(a.T @ a / (self.n_p - 1))


@dataclass(frozen=True)
class SeededRng:
    """Reproducible RNG handle: the (seed, stream) pair names a bit stream.

    generator() always restarts that stream from its beginning, so the same
    pair yields the same draws regardless of interleaving. Independent
    components of one experiment take distinct stream numbers.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(self.stream,)))

    def substream(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, stream)


@dataclass(frozen=True)
class LinearObservationOp:
    """Linear observation map backed by an explicit (n_y, n_x) matrix.

    The object is callable on (..., n_x) state arrays; code paths that only
    need evaluations (the stochastic EnKF) could accept any callable, but
    the mapping filter's likelihood gradient reads .matrix directly.
    """

    matrix: np.ndarray    # (n_y, n_x)

    def __call__(self, state: np.ndarray) -> np.ndarray:
        return np.asarray(state, dtype=float) @ self.matrix.T

    @property
    def n_y(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_x(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def identity(cls, n: int) -> "LinearObservationOp":
        return cls(np.eye(n))

    @classmethod
    def select(cls, indices, n_x: int) -> "LinearObservationOp":
        m = np.zeros((len(indices), n_x))
        m[np.arange(len(indices)), list(indices)] = 1.0
        return cls(m)


def cholesky(m) -> np.ndarray:
    """Lower-triangular factor of an SpdMatrix (or raw symmetric array)."""
    if not isinstance(m, SpdMatrix):
        m = SpdMatrix(m)
    return m.chol


def sample_mvn(mean: np.ndarray, cov: SpdMatrix, rng: np.random.Generator,
               n_samples: int) -> Ensemble:
    """Draw n_samples from N(mean, cov) as an Ensemble."""
    mean = np.asarray(mean, dtype=float)
    z = rng.standard_normal((n_samples, mean.shape[-1]))
    return Ensemble(mean + z @ cov.chol.T)


def forecast_transition(model, state: np.ndarray, q: SpdMatrix,
                        rng: np.random.Generator) -> np.ndarray:
    """One stochastic forecast: propagate state one cycle and add N(0, q) noise.

    state may be a single vector (n_x,) or a batch (..., n_x); one noise draw
    is added per vector.
    """
    prop = model.propagate(state)
    noise = rng.standard_normal(prop.shape) @ q.chol.T
    return prop + noise


def observe(h_op, state: np.ndarray, r: SpdMatrix, rng: np.random.Generator) -> np.ndarray:
    """Noisy observation h_op(state) + N(0, r), batched like forecast_transition."""
    clean = h_op(state)
    noise = rng.standard_normal(clean.shape) @ r.chol.T
    return clean + noise


def gaussian_loglik(y: np.ndarray, mean: np.ndarray, cov: SpdMatrix):
    """Log density of N(mean, cov) at y.

    y may carry leading batch axes (..., d); the result has shape (...) and
    is a plain float for a single vector.
    """
    lower = cov.chol
    diag = np.diag(lower)
    if not (diag > 0.0).all():
        raise NotPositiveDefiniteError("gaussian_loglik needs a strictly positive definite cov")
    resid = np.asarray(y, dtype=float) - np.asarray(mean, dtype=float)
    batch_shape = resid.shape[:-1]
    d = resid.shape[-1]
    z = solve_triangular(lower, resid.reshape(-1, d).T, lower=True)
    quad = (z * z).sum(axis=0).reshape(batch_shape)
    out = -0.5 * quad - np.log(diag).sum() - 0.5 * d * LOG_2PI
    if out.ndim == 0:
        return float(out)
    return out
