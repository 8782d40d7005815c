"""Likelihood of a fixed covariance pair, approximated by one EnKF pass.

Used to diagnose the estimates an online run produced: evaluate the
innovation likelihood along the whole observation record for candidate
(q, r) and compare.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..filters import FilterDivergenceError, enkf_analysis
from ..statespace import (Ensemble, LinearObservationOp, SeededRng, SpdMatrix,
                          gaussian_loglik)
from .config import ExperimentConfig


def enkf_pass(q: SpdMatrix, r: SpdMatrix, obs: np.ndarray, config: ExperimentConfig,
              rng: np.random.Generator, truth: Optional[np.ndarray] = None):
    """Run a plain EnKF with fixed (q, r) over obs; no estimation.

    The ensemble starts on the first observation plus N(0, r) spread (the
    harness observes the full state, so an observation is a state). Each
    later cycle adds the innovation log density under the Gaussian
    N(H xbar_f, H P_f H^T + r) to the total. config only needs to provide
    cycled_model(), dimension and n_particles, so a reduced stand-in works.

    Returns (loglik, rmse): rmse is against truth rows 1..K when truth is
    given (spin-up cycles included by the caller's choice of slice), else nan.
    """
    obs = np.asarray(obs, dtype=float)
    n_cycles, n_y = obs.shape
    model = config.cycled_model()
    if config.dimension != n_y:
        raise ValueError("enkf_pass expects full-state observations")
    h_op = LinearObservationOp.identity(n_y)

    members = obs[0] + rng.standard_normal((config.n_particles, n_y)) @ r.chol.T
    analysis = Ensemble(members)

    loglik = 0.0
    sq_err = []
    for k in range(1, n_cycles):
        try:
            det = model.propagate(analysis.members)
            forecast = Ensemble(det + rng.standard_normal(det.shape) @ q.chol.T)
            pred_mean = h_op(forecast.mean())
            pred_cov = SpdMatrix(h_op.matrix @ forecast.cov() @ h_op.matrix.T + r.entries)
            loglik += gaussian_loglik(obs[k], pred_mean, pred_cov)
            analysis = enkf_analysis(forecast, obs[k], h_op, r, rng)
        except (FloatingPointError, ValueError) as e:
            raise FilterDivergenceError(f"enkf pass diverged at cycle {k + 1}: {e}",
                                        k + 1, float("nan")) from e
        if truth is not None:
            sq_err.append(np.mean((analysis.mean() - truth[k + 1]) ** 2))
    rmse = float(np.sqrt(np.mean(sq_err))) if sq_err else float("nan")
    return float(loglik), rmse


def approx_loglik(q: SpdMatrix, r: SpdMatrix, obs: np.ndarray,
                  config: ExperimentConfig, rng: np.random.Generator) -> float:
    """Innovation log likelihood of fixed (q, r) along obs, one EnKF pass."""
    return enkf_pass(q, r, obs, config, rng)[0]


def loglik_surface(q_values, r_values, obs: np.ndarray, config: ExperimentConfig,
                   seed: int) -> np.ndarray:
    """approx_loglik on a grid of scaled-identity (q, r) candidates.

    Every node reruns with the same seed (common random numbers), so the
    surface shape is not blurred by sampling noise. A node whose pass fails
    becomes nan. Returns shape (len(q_values), len(r_values)).
    """
    n = config.dimension
    out = np.full((len(q_values), len(r_values)), np.nan)
    for i, qv in enumerate(q_values):
        for j, rv in enumerate(r_values):
            try:
                out[i, j] = approx_loglik(SpdMatrix.scaled_identity(float(qv), n),
                                          SpdMatrix.scaled_identity(float(rv), n),
                                          obs, config, SeededRng(seed).generator())
            except Exception:
                pass
    return out
