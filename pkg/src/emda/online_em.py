"""Online EM for the transition and observation error covariances.

One assimilation cycle contributes one Monte Carlo estimate of the
per-transition sufficient statistics; a stochastic-approximation step blends
it into the running average, and the M-step is the identity map from the
averaged statistics to the covariance estimates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .filters import FilterCycleState, VmpfSpec, enkf_analysis, enks_one_step, vmpf_step
from .statespace import Ensemble, SpdMatrix, gaussian_loglik


class DegenerateWeightsError(RuntimeError):
    """All importance weights underflowed; carries the max log weight seen."""

    def __init__(self, max_log_weight: float):
        super().__init__(f"importance weights degenerate, max log weight {max_log_weight}")
        self.max_log_weight = max_log_weight


# Below this effective sample size the weighted statistic is one particle's
# opinion; the cycle keeps the previous estimate instead.
ESS_FLOOR = 2.0


@dataclass
class SufficientStats:
    """Running averages of the two per-transition outer-product statistics."""

    s_q: np.ndarray                    # (n_x, n_x)
    s_r: Optional[np.ndarray] = None   # (n_y, n_y), None when r is not estimated

    @property
    def includes_r(self) -> bool:
        return self.s_r is not None


@dataclass(frozen=True)
class StepSchedule:
    """Polynomially decaying stochastic-approximation step gamma_k = (k + offset)^-alpha."""

    alpha: float = 0.6
    offset: int = 0

    def __post_init__(self):
        if not 0.5 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0.5, 1), got {self.alpha}")
        if self.offset < 0:
            raise ValueError(f"offset must be non-negative, got {self.offset}")


def step_size(k: int, schedule: StepSchedule) -> float:
    """Step size for cycle k >= 1."""
    if k < 1:
        raise ValueError(f"cycles are counted from 1, got {k}")
    return float(k + schedule.offset) ** (-schedule.alpha)


@dataclass(frozen=True)
class EstimatorKind:
    """Which statistic estimator a cycle runs: importance sampling or one-step smoothing."""

    kind: str        # "is" or "oss"
    m_p: int = 1     # forecasts per analysis particle (is only)

    def __post_init__(self):
        if self.kind not in ("is", "oss"):
            raise ValueError(f"estimator kind must be 'is' or 'oss', got {self.kind!r}")
        if self.m_p < 1:
            raise ValueError(f"m_p must be at least 1, got {self.m_p}")


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def is_stats(analysis_prev: Ensemble, model, q: SpdMatrix, y: np.ndarray, h_op,
             r: SpdMatrix, m_p: int, rng: np.random.Generator,
             estimate_r: bool = False,
             propagated_prev: Optional[np.ndarray] = None):
    """Importance-sampling estimate of the transition statistics at this cycle.

    Each analysis particle from the previous cycle is propagated once and
    perturbed m_p times with N(0, q) noise; the perturbed forecasts are
    weighted by their likelihood under y. Because the forecasts are built as
    M(x) + eta, the transition residual of each draw is its own eta, so no
    extra model integrations are spent on m_p.

    Parameters
    ----------
    propagated_prev : ndarray, optional
        M(analysis_prev.members) if the caller already computed it.

    Returns
    -------
    (SufficientStats, float)
        The weighted statistics and the effective sample size of the
        normalized weights (between 1 and n_p * m_p).
    """
    members = analysis_prev.members
    det = model.propagate(members) if propagated_prev is None else propagated_prev
    n_p, n_x = members.shape

    eta = rng.standard_normal((n_p, m_p, n_x)) @ q.chol.T
    forecasts = det[:, None, :] + eta
    log_w = gaussian_loglik(y, h_op(forecasts), r).ravel()

    max_lw = float(log_w.max())
    if not np.isfinite(max_lw):
        raise DegenerateWeightsError(max_lw)
    w = np.exp(log_w - max_lw)
    w /= w.sum()
    ess = 1.0 / float((w * w).sum())

    eta_flat = eta.reshape(-1, n_x)
    s_q = _sym(np.einsum("n,ni,nj->ij", w, eta_flat, eta_flat))
    s_r = None
    if estimate_r:
        resid = (y - h_op(forecasts)).reshape(-1, h_op.n_y)
        s_r = _sym(np.einsum("n,ni,nj->ij", w, resid, resid))
    return SufficientStats(s_q, s_r), ess


def oss_stats(smoothed_prev: Ensemble, analysis: Ensemble, y: np.ndarray,
              model, h_op, estimate_r: bool = False) -> SufficientStats:
    """One-step-smoother estimate of the transition statistics.

    Takes the smoothed ensemble at the previous cycle and the analysis at
    the current one (member pairing preserved) and averages the outer
    products of the transition residuals x_a_j - M(x_s_j). Costs one model
    propagation of the smoothed ensemble.
    """
    if smoothed_prev.n_p != analysis.n_p:
        raise ValueError("smoothed and analysis ensembles must have the same member count")
    det = model.propagate(smoothed_prev.members)
    dq = analysis.members - det
    s_q = _sym(dq.T @ dq / analysis.n_p)
    s_r = None
    if estimate_r:
        dr = y - h_op(analysis.members)
        s_r = _sym(dr.T @ dr / analysis.n_p)
    return SufficientStats(s_q, s_r)


def update_stats(prev: SufficientStats, new: SufficientStats,
                 gamma: float) -> SufficientStats:
    """Stochastic-approximation blend (1 - gamma) * prev + gamma * new.

    The cycle loop always passes gamma in (0, 1]; gamma = 0 is accepted as
    the degenerate no-op for testing.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if prev.includes_r != new.includes_r:
        raise ValueError("cannot blend statistics with and without an r block")
    if prev.s_q.shape != new.s_q.shape:
        raise ValueError(f"shape mismatch: {prev.s_q.shape} vs {new.s_q.shape}")
    s_q = _sym((1.0 - gamma) * prev.s_q + gamma * new.s_q)
    s_r = None
    if prev.includes_r:
        s_r = _sym((1.0 - gamma) * prev.s_r + gamma * new.s_r)
    return SufficientStats(s_q, s_r)


def m_step(stats: SufficientStats):
    """Identity M-step: the averaged statistics are the covariance estimates.

    Factorization is forced here so a non-positive-definite estimate fails
    loudly at the cycle that produced it.
    """
    q = SpdMatrix(stats.s_q)
    _ = q.chol
    r = None
    if stats.includes_r:
        r = SpdMatrix(stats.s_r)
        _ = r.chol
    return q, r


@dataclass(frozen=True)
class OnlineEmProblem:
    """Everything about an online EM run that does not change between cycles."""

    model: object                      # one-cycle propagator with .propagate
    h_op: object                       # observation operator
    estimator: EstimatorKind
    filter_kind: str = "enkf"          # "enkf" or "vmpf"
    schedule: StepSchedule = StepSchedule()
    estimate_r: bool = False
    vmpf: VmpfSpec = VmpfSpec()

    def __post_init__(self):
        if self.filter_kind not in ("enkf", "vmpf"):
            raise ValueError(f"filter kind must be 'enkf' or 'vmpf', got {self.filter_kind!r}")


@dataclass
class OnlineEmState:
    """Mutable between-cycle state: the analysis ensemble and current estimates."""

    analysis: Ensemble
    stats: SufficientStats      # running averaged statistics
    q: SpdMatrix                # current transition noise estimate
    r: SpdMatrix                # current observation noise (estimate or fixed)
    k: int = 0                  # cycles completed

    @classmethod
    def initial(cls, analysis: Ensemble, q0: SpdMatrix, r0: SpdMatrix,
                estimate_r: bool = False) -> "OnlineEmState":
        stats = SufficientStats(q0.entries.copy(),
                                r0.entries.copy() if estimate_r else None)
        return cls(analysis, stats, q0, r0, 0)


@dataclass
class CycleDiagnostics:
    gamma: float
    ess: float          # nan for the oss estimator
    skipped: bool       # statistic update skipped (degenerate or ESS floor)


def run_online_em_cycle(problem: OnlineEmProblem, state: OnlineEmState,
                        y: np.ndarray, rng: np.random.Generator):
    """Advance one assimilation cycle and blend its statistic.

    Order within the cycle: the forecast and the analysis both use the
    estimates from the previous cycle; the statistic is computed with those
    same estimates; the blended result only takes effect from the next
    forecast on.

    Returns (new_state, CycleDiagnostics). Raises FilterDivergenceError and
    NotPositiveDefiniteError through; degenerate importance weights or an
    effective sample size below ESS_FLOOR skip the update but complete the
    cycle.
    """
    k = state.k + 1
    gamma = step_size(k, problem.schedule)

    det = problem.model.propagate(state.analysis.members)
    noise = rng.standard_normal(det.shape) @ state.q.chol.T
    forecast = Ensemble(det + noise)

    if problem.filter_kind == "enkf":
        analysis = enkf_analysis(forecast, y, problem.h_op, state.r, rng)
    else:
        analysis = vmpf_step(forecast, y, problem.h_op, state.r, state.q,
                             problem.vmpf, prior_centers=det)

    ess = float("nan")
    skipped = False
    new_stats = None
    if problem.estimator.kind == "is":
        try:
            new_stats, ess = is_stats(state.analysis, problem.model, state.q, y,
                                      problem.h_op, state.r, problem.estimator.m_p,
                                      rng, problem.estimate_r, propagated_prev=det)
        except DegenerateWeightsError:
            skipped = True
        if not skipped and ess < ESS_FLOOR:
            skipped = True
    else:
        smoothed = enks_one_step(FilterCycleState(state.analysis, forecast, analysis, y))
        new_stats = oss_stats(smoothed, analysis, y, problem.model, problem.h_op,
                              problem.estimate_r)

    if skipped:
        stats, q, r = state.stats, state.q, state.r
    else:
        stats = update_stats(state.stats, new_stats, gamma)
        q, r_est = m_step(stats)
        r = r_est if problem.estimate_r else state.r

    return OnlineEmState(analysis, stats, q, r, k), CycleDiagnostics(gamma, ess, skipped)
