"""Ensemble analysis steps: stochastic EnKF, one-step EnKS, mapping filter.

All three consume a forecast Ensemble and an observation and produce a new
Ensemble; none of them touches the running covariance estimates, which are
the online estimator's business.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .statespace import LOG_2PI, Ensemble, SpdMatrix


class FilterDivergenceError(RuntimeError):
    """Mapping iteration diverged; carries iteration count and last objective."""

    def __init__(self, message: str, iterations: int, last_kl: float):
        super().__init__(f"{message} (iteration {iterations}, kl {last_kl:.6g})")
        self.iterations = iterations
        self.last_kl = last_kl


@dataclass
class FilterCycleState:
    """The ensembles one assimilation cycle produces, member pairing preserved."""

    analysis_prev: Ensemble   # analysis at cycle k-1
    forecast: Ensemble        # stochastic forecast at cycle k
    analysis: Ensemble        # analysis at cycle k
    obs: np.ndarray           # observation y_k


def enkf_gain(forecast: Ensemble, h_op, r: SpdMatrix) -> np.ndarray:
    """Kalman gain from forecast ensemble statistics, explicit r.

    Uses the sample covariances of the members and of their observation
    images, so h_op only needs to be callable on (..., n_x) arrays.
    """
    if forecast.n_p < 2:
        raise ValueError("EnKF needs at least 2 members for a sample covariance")
    x_anom = forecast.anomalies()                       # (n_p, n_x)
    y_anom = h_op(forecast.members)
    y_anom = y_anom - y_anom.mean(axis=0)               # (n_p, n_y)
    denom = forecast.n_p - 1
    cov_xy = x_anom.T @ y_anom / denom                  # (n_x, n_y)
    cov_yy = y_anom.T @ y_anom / denom                  # (n_y, n_y)
    s = 0.5 * (cov_yy + cov_yy.T) + r.entries
    return np.linalg.solve(s, cov_xy.T).T               # (n_x, n_y)


def enkf_analysis(forecast: Ensemble, y: np.ndarray, h_op, r: SpdMatrix,
                  rng: np.random.Generator) -> Ensemble:
    """Stochastic (perturbed-observation) EnKF analysis, no inflation.

    Each member is updated against its own perturbed predicted observation
    H(x_f_j) + nu_j with nu_j ~ N(0, r), which keeps the analysis spread
    consistent with the Kalman posterior in the linear limit.
    """
    y = np.asarray(y, dtype=float)
    gain = enkf_gain(forecast, h_op, r)
    y_pred = h_op(forecast.members)                     # (n_p, n_y)
    y_pred = y_pred + rng.standard_normal(y_pred.shape) @ r.chol.T
    return Ensemble(forecast.members + (y - y_pred) @ gain.T)


def enks_one_step(cycle: FilterCycleState) -> Ensemble:
    """One-step backward ensemble smoother: smooth cycle k-1 with cycle k.

    The smoother gain is K_s = A_a pinv(A_f) built from the mean-centered
    analysis anomalies at k-1 and forecast anomalies at k (members as
    columns); the pseudoinverse keeps the formula defined when the anomaly
    matrix is rank deficient. Member j of every ensemble must descend from
    the same member j, since the gain acts on paired member differences:

        x_s_j(k-1) = x_a_j(k-1) + K_s (x_a_j(k) - x_f_j(k))

    The smoothed ensemble at cycle k itself is the analysis unchanged.
    """
    prev, fore, ana = cycle.analysis_prev, cycle.forecast, cycle.analysis
    if not (prev.members.shape == fore.members.shape == ana.members.shape):
        raise ValueError("ensembles in one cycle must have identical shapes")
    gain = prev.anomalies().T @ np.linalg.pinv(fore.anomalies()).T   # (n_x, n_x)
    return Ensemble(prev.members + (ana.members - fore.members) @ gain.T)


# ---------------------------------------------------------------------------
# Variational mapping particle filter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VmpfSpec:
    """Knobs of the mapping iteration.

    bandwidth_rule names the kernel bandwidth as a multiple of the model
    error covariance: "q" for B = Q, "<float>*q" for B = c Q, "scott*q"
    for the dimension-scaled c = n_p ** (-2 / (dim + 4)). The default is
    "scott*q": with c = 1 the kernel repulsion is too diffuse to hold the
    particles apart against the posterior attraction and the ensemble
    collapses well below the posterior spread (measured on conjugate
    cases), which an error covariance estimator downstream then absorbs
    as spurious model error.
    """

    step_size: float = 0.05
    max_iterations: int = 200
    gradient_tolerance: float = 1e-3
    bandwidth_rule: str = "scott*q"


# Consecutive rejected (halved) steps before the mapping gives up. Halving
# must be able to cross several orders of magnitude: when the estimated q
# develops small eigenvalues the objective curvature scales like their
# inverse, and the stable step can sit far below the configured one.
_DIVERGENCE_PATIENCE = 40


def _bandwidth_factor(rule: str, n_p: int, dim: int) -> float:
    if rule == "q":
        return 1.0
    if rule == "scott*q":
        return float(n_p) ** (-2.0 / (dim + 4.0))
    if rule.endswith("*q"):
        try:
            c = float(rule[:-2])
        except ValueError:
            raise ValueError(f"cannot parse bandwidth rule {rule!r}") from None
        if c <= 0:
            raise ValueError(f"bandwidth factor must be positive, got {c}")
        return c
    raise ValueError(f"cannot parse bandwidth rule {rule!r}")


def _apply_inverse(lower: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Rows of M @ inv(L L^T) for row-stacked M, via two triangular solves."""
    z = solve_triangular(lower, rows.T, lower=True)
    return solve_triangular(lower.T, z, lower=False).T


class _MappingTarget:
    """Precomputed pieces of the KL objective for fixed centers and y."""

    def __init__(self, centers: np.ndarray, y: np.ndarray, h_op, r: SpdMatrix,
                 q: SpdMatrix, bandwidth_factor: float):
        self.centers = np.asarray(centers, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.h = h_op.matrix
        self.r = r
        self.q = q
        dim = self.centers.shape[1]
        self.lq = q.chol
        self.lb = np.sqrt(bandwidth_factor) * self.lq
        self.log_norm_q = np.log(np.diag(self.lq)).sum() + 0.5 * dim * LOG_2PI
        self.log_norm_b = np.log(np.diag(self.lb)).sum() + 0.5 * dim * LOG_2PI
        self.log_norm_r = np.log(np.diag(r.chol)).sum() + 0.5 * r.dim * LOG_2PI
        # whitened centers for mixture distances
        self.centers_white = solve_triangular(self.lq, self.centers.T, lower=True).T
        self.rinv_h = r.solve(self.h)                    # (n_y, n_x)

    def _pairwise_sq(self, white_a: np.ndarray, white_b: np.ndarray) -> np.ndarray:
        ra = (white_a * white_a).sum(axis=1)
        rb = (white_b * white_b).sum(axis=1)
        sq = ra[:, None] + rb[None, :] - 2.0 * white_a @ white_b.T
        return np.maximum(sq, 0.0)

    def kl_and_gradient(self, positions: np.ndarray):
        """KL estimate and its per-particle gradient (n_p times the mean gradient).

        The density term is the kernel estimate with the self term kept,
        q_hat(x_j) = (1/n_p) sum_l N(x_j; x_l, B). The self term puts a floor
        under the density, so the entropy reward for spreading saturates once
        particles sit about one bandwidth apart; a leave-one-out estimate has
        no such floor and its objective is unbounded below (particles fly
        apart whenever B is small against their spacing, taking the estimated
        Q with them).
        """
        x = positions
        n_p = x.shape[0]
        if n_p < 2:
            raise ValueError("mapping step needs at least 2 particles")

        # kernel density term; the zero-distance diagonal stays in the sum
        x_white_b = solve_triangular(self.lb, x.T, lower=True).T
        logk = -0.5 * self._pairwise_sq(x_white_b, x_white_b) - self.log_norm_b
        row_lse = logsumexp(logk, axis=1)                # (n_p,)
        alpha = np.exp(logk - row_lse[:, None])          # row-softmax
        np.fill_diagonal(alpha, 0.0)                     # self term exerts no force
        log_kde = row_lse - np.log(n_p)

        # prior mixture term
        x_white_q = solve_triangular(self.lq, x.T, lower=True).T
        logp_comp = -0.5 * self._pairwise_sq(x_white_q, self.centers_white) - self.log_norm_q
        prior_lse = logsumexp(logp_comp, axis=1)
        log_prior = prior_lse - np.log(self.centers.shape[0])
        pi = np.exp(logp_comp - prior_lse[:, None])       # (n_p, n_c) responsibilities

        # likelihood term
        resid = self.y - x @ self.h.T                     # (n_p, n_y)
        z = solve_triangular(self.r.chol, resid.T, lower=True)
        log_lik = -0.5 * (z * z).sum(axis=0) - self.log_norm_r

        kl = float(np.mean(log_kde - log_prior - log_lik))

        # gradient, all N particles at once
        row_sums = alpha.sum(axis=1)                      # 1 - self weight, (n_p,)
        col_sums = alpha.sum(axis=0)                      # (n_p,)
        kde_rows = (alpha + alpha.T) @ x - (row_sums + col_sums)[:, None] * x
        grad = _apply_inverse(self.lb, kde_rows)
        grad += _apply_inverse(self.lq, x - pi @ self.centers)
        grad -= resid @ self.rinv_h
        return kl, grad


def vmpf_kl(positions: np.ndarray, centers: np.ndarray, y: np.ndarray, h_op,
            r: SpdMatrix, q: SpdMatrix, bandwidth_factor: float = 1.0) -> float:
    """Kernel density KL estimate of the particle set against the posterior."""
    target = _MappingTarget(centers, y, h_op, r, q, bandwidth_factor)
    return target.kl_and_gradient(np.asarray(positions, dtype=float))[0]


def vmpf_kl_gradient(positions: np.ndarray, centers: np.ndarray, y: np.ndarray,
                     h_op, r: SpdMatrix, q: SpdMatrix,
                     bandwidth_factor: float = 1.0) -> np.ndarray:
    """Per-particle gradient of the KL estimate, scaled by n_p."""
    target = _MappingTarget(centers, y, h_op, r, q, bandwidth_factor)
    return target.kl_and_gradient(np.asarray(positions, dtype=float))[1]


def vmpf_step(forecast: Ensemble, y: np.ndarray, h_op, r: SpdMatrix,
              q: SpdMatrix, spec: VmpfSpec,
              prior_centers: Optional[np.ndarray] = None) -> Ensemble:
    """Deterministically map forecast particles toward the filtering posterior.

    The prior is the Gaussian mixture with covariance q centered on
    prior_centers (the deterministic propagations; defaults to the forecast
    positions themselves, which is only correct if those were not already
    perturbed with q). Particles descend the kernel density KL estimate with
    fixed step size; a step that raises the objective is rejected and
    retried at half length, and a long streak of consecutive rejections
    raises FilterDivergenceError. No randomness is consumed.

    The descent matches the kernel-smoothed cloud, not the points
    themselves, to the posterior, so the converged points carry roughly the
    posterior covariance minus the bandwidth. A final affine inflation adds
    the bandwidth back onto the sample covariance, leaving the mean exact.
    With max_iterations == 0 the forecast is returned unchanged.
    """
    centers = forecast.members if prior_centers is None else np.asarray(prior_centers, dtype=float)
    factor = _bandwidth_factor(spec.bandwidth_rule, forecast.n_p, forecast.n_x)
    target = _MappingTarget(centers, y, h_op, r, q, factor)

    positions = forecast.members.copy()
    kl, grad = target.kl_and_gradient(positions)
    step = spec.step_size
    streak = 0
    size = forecast.n_p * forecast.n_x
    for iteration in range(1, spec.max_iterations + 1):
        if not np.isfinite(kl):
            raise FilterDivergenceError("mapping objective is not finite", iteration, kl)
        if np.linalg.norm(grad) / size < spec.gradient_tolerance:
            break
        candidate = positions - step * grad
        kl_new, grad_new = target.kl_and_gradient(candidate)
        if kl_new <= kl + 1e-12 * max(1.0, abs(kl)):
            positions, kl, grad = candidate, kl_new, grad_new
            streak = 0
            step = min(spec.step_size, step * 2.0)
        else:
            streak += 1
            step *= 0.5
            if streak >= _DIVERGENCE_PATIENCE:
                raise FilterDivergenceError(
                    f"KL increased for {_DIVERGENCE_PATIENCE} consecutive steps",
                    iteration, kl_new)
    if spec.max_iterations > 0:
        positions = _bandwidth_corrected(positions, factor * q.entries)
    return Ensemble(positions)


def _bandwidth_corrected(positions: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inflate the cloud so its sample covariance gains the bandwidth b.

    Anomalies are mapped through (s + b)^{1/2} s^{-1/2}, which sets the
    covariance to s + b exactly when s has full rank and preserves the mean.
    The inverse square root is taken on the spanned subspace only, so a
    degenerate cloud is left where it is instead of being blown up.
    """
    n_p = positions.shape[0]
    if n_p < 2:
        return positions
    mean = positions.mean(axis=0)
    anomalies = positions - mean
    s = anomalies.T @ anomalies / (n_p - 1)
    evals, vecs = np.linalg.eigh(0.5 * (s + s.T))
    spanned = evals > 1e-12 * max(float(evals[-1]), 1e-300)
    inv_root = np.zeros_like(evals)
    inv_root[spanned] = 1.0 / np.sqrt(evals[spanned])
    s_inv_half = (vecs * inv_root) @ vecs.T
    t = s + b
    t_evals, t_vecs = np.linalg.eigh(0.5 * (t + t.T))
    t_half = (t_vecs * np.sqrt(np.maximum(t_evals, 0.0))) @ t_vecs.T
    return mean + anomalies @ (t_half @ s_inv_half).T
