"""Exact linear-Gaussian machinery: Kalman filter, RTS smoother, batch EM.

This module is the closed-form yardstick the ensemble and online code is
checked against, so it deliberately shares nothing with the rest of the
package: plain arrays in, plain arrays out.

Time indexing: x_0 ~ N(m0, p0) is unobserved; observations y_1..y_K attach
to x_1..x_K. Filter and smoother arrays have length K + 1 with index k
meaning time k; per-observation arrays have length K with index k - 1.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

_LOG_2PI = float(np.log(2.0 * np.pi))


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class LinearGaussianModel:
    a: np.ndarray     # (n, n) state transition
    h: np.ndarray     # (m, n) observation map
    q: np.ndarray     # (n, n) transition noise covariance
    r: np.ndarray     # (m, m) observation noise covariance
    m0: np.ndarray    # (n,) initial mean
    p0: np.ndarray    # (n, n) initial covariance

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_y(self) -> int:
        return self.h.shape[0]

    def replace(self, **changes) -> "LinearGaussianModel":
        return dataclasses.replace(self, **changes)


def simulate(model: LinearGaussianModel, n_cycles: int,
             rng: np.random.Generator):
    """Draw a trajectory and its observations.

    Returns (states, obs) with states (n_cycles + 1, n_x) including x_0 and
    obs (n_cycles, n_y) for y_1..y_K.
    """
    lq = np.linalg.cholesky(model.q) if model.q.any() else np.zeros_like(model.q)
    lr = np.linalg.cholesky(model.r)
    l0 = np.linalg.cholesky(model.p0) if model.p0.any() else np.zeros_like(model.p0)
    states = np.empty((n_cycles + 1, model.n_x))
    obs = np.empty((n_cycles, model.n_y))
    states[0] = model.m0 + l0 @ rng.standard_normal(model.n_x)
    for k in range(1, n_cycles + 1):
        states[k] = model.a @ states[k - 1] + lq @ rng.standard_normal(model.n_x)
        obs[k - 1] = model.h @ states[k] + lr @ rng.standard_normal(model.n_y)
    return states, obs


@dataclass
class KalmanResult:
    predicted_means: np.ndarray   # (K+1, n), index 0 holds the prior mean
    predicted_covs: np.ndarray    # (K+1, n, n)
    filtered_means: np.ndarray    # (K+1, n)
    filtered_covs: np.ndarray     # (K+1, n, n)
    logliks: np.ndarray           # (K,) innovation log density per observation

    @property
    def loglik(self) -> float:
        return float(self.logliks.sum())


def kalman_filter(model: LinearGaussianModel, obs: np.ndarray) -> KalmanResult:
    """Exact filter over obs (K, n_y), Joseph-form covariance update."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n_cycles = obs.shape[0]
    n = model.n_x
    a, h, q, r = model.a, model.h, model.q, model.r
    eye = np.eye(n)

    pm = np.empty((n_cycles + 1, n))
    pc = np.empty((n_cycles + 1, n, n))
    fm = np.empty((n_cycles + 1, n))
    fc = np.empty((n_cycles + 1, n, n))
    logliks = np.empty(n_cycles)

    pm[0], pc[0] = model.m0, _sym(model.p0)
    fm[0], fc[0] = model.m0, _sym(model.p0)
    for k in range(1, n_cycles + 1):
        pm[k] = a @ fm[k - 1]
        pc[k] = _sym(a @ fc[k - 1] @ a.T + q)

        innov = obs[k - 1] - h @ pm[k]
        s = _sym(h @ pc[k] @ h.T + r)
        gain = np.linalg.solve(s, h @ pc[k]).T
        fm[k] = pm[k] + gain @ innov
        imkh = eye - gain @ h
        fc[k] = _sym(imkh @ pc[k] @ imkh.T + gain @ r @ gain.T)

        sign, logdet = np.linalg.slogdet(s)
        if sign <= 0:
            raise np.linalg.LinAlgError("innovation covariance is not positive definite")
        logliks[k - 1] = -0.5 * (innov @ np.linalg.solve(s, innov)
                                 + logdet + model.n_y * _LOG_2PI)
    return KalmanResult(pm, pc, fm, fc, logliks)


@dataclass
class SmootherResult:
    smoothed_means: np.ndarray    # (K+1, n)
    smoothed_covs: np.ndarray     # (K+1, n, n)
    gains: np.ndarray             # (K, n, n), gains[k] maps time k -> k+1
    lag_one_covs: np.ndarray      # (K, n, n), lag_one_covs[k] = Cov(x_k, x_{k+1} | y_{1:K})


def rts_smoother(model: LinearGaussianModel, kf: KalmanResult) -> SmootherResult:
    """Backward RTS pass with the lag-one cross covariances EM needs."""
    n_cycles = kf.logliks.shape[0]
    n = model.n_x
    sm = np.empty((n_cycles + 1, n))
    sc = np.empty((n_cycles + 1, n, n))
    gains = np.empty((n_cycles, n, n))
    lag_one = np.empty((n_cycles, n, n))

    sm[n_cycles] = kf.filtered_means[n_cycles]
    sc[n_cycles] = kf.filtered_covs[n_cycles]
    for k in range(n_cycles - 1, -1, -1):
        # gains[k] = P^a_k A^T (P^f_{k+1})^{-1}
        gains[k] = np.linalg.solve(kf.predicted_covs[k + 1], model.a @ kf.filtered_covs[k]).T
        sm[k] = kf.filtered_means[k] + gains[k] @ (sm[k + 1] - kf.predicted_means[k + 1])
        sc[k] = _sym(kf.filtered_covs[k]
                     + gains[k] @ (sc[k + 1] - kf.predicted_covs[k + 1]) @ gains[k].T)
        lag_one[k] = gains[k] @ sc[k + 1]
    return SmootherResult(sm, sc, gains, lag_one)


def pairwise_smoothed_moments(sm: SmootherResult, k: int):
    """Joint smoothing distribution of (x_{k-1}, x_k): mean (2n,), cov (2n, 2n)."""
    n = sm.smoothed_means.shape[1]
    mean = np.concatenate([sm.smoothed_means[k - 1], sm.smoothed_means[k]])
    cov = np.empty((2 * n, 2 * n))
    cov[:n, :n] = sm.smoothed_covs[k - 1]
    cov[n:, n:] = sm.smoothed_covs[k]
    cov[:n, n:] = sm.lag_one_covs[k - 1]
    cov[n:, :n] = sm.lag_one_covs[k - 1].T
    return mean, _sym(cov)


def smoothed_sufficient_stats(model: LinearGaussianModel, obs: np.ndarray):
    """Exact E-step: (s_q, s_r, loglik) averaged over the K transitions.

    s_q = (1/K) sum_k E[(x_k - A x_{k-1})(x_k - A x_{k-1})^T | y_{1:K}]
    s_r = (1/K) sum_k E[(y_k - H x_k)(y_k - H x_k)^T | y_{1:K}]
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n_cycles = obs.shape[0]
    a, h = model.a, model.h
    kf = kalman_filter(model, obs)
    sm = rts_smoother(model, kf)

    s_q = np.zeros((model.n_x, model.n_x))
    s_r = np.zeros((model.n_y, model.n_y))
    for k in range(1, n_cycles + 1):
        mk = sm.smoothed_means[k]
        mkm1 = sm.smoothed_means[k - 1]
        # second moments: E[x_k x_k^T], E[x_{k-1} x_k^T], E[x_{k-1} x_{k-1}^T]
        ekk = sm.smoothed_covs[k] + np.outer(mk, mk)
        ekm1k = sm.lag_one_covs[k - 1] + np.outer(mkm1, mk)
        ekm1 = sm.smoothed_covs[k - 1] + np.outer(mkm1, mkm1)
        s_q += ekk - a @ ekm1k - ekm1k.T @ a.T + a @ ekm1 @ a.T

        resid = obs[k - 1] - h @ mk
        s_r += np.outer(resid, resid) + h @ sm.smoothed_covs[k] @ h.T
    return _sym(s_q / n_cycles), _sym(s_r / n_cycles), kf.loglik


@dataclass
class BatchEmResult:
    qs: list              # q iterates, qs[0] is the first guess
    rs: list              # r iterates (constant when estimate_r is False)
    logliks: np.ndarray   # (n_iterations,), loglik at the start of each iteration


def batch_em(model: LinearGaussianModel, obs: np.ndarray, q0: np.ndarray,
             r0: np.ndarray, n_iterations: int,
             estimate_r: bool = True) -> BatchEmResult:
    """Fixed-interval EM for (q, r) with the identity M-step q <- s_q, r <- s_r.

    Transition, observation map and initial moments stay fixed. logliks[i]
    is the data log likelihood under the iterate in force at the start of
    iteration i, so the sequence must be non-decreasing.
    """
    q, r = np.asarray(q0, dtype=float), np.asarray(r0, dtype=float)
    qs, rs = [q], [r]
    logliks = np.empty(n_iterations)
    for i in range(n_iterations):
        current = model.replace(q=q, r=r)
        s_q, s_r, logliks[i] = smoothed_sufficient_stats(current, obs)
        q = s_q
        if estimate_r:
            r = s_r
        qs.append(q)
        rs.append(r)
    return BatchEmResult(qs, rs, logliks)
