"""Linear-Gaussian validation battery.

Every check pits the ensemble/online machinery against the exact reference
module on problems where the answer is computable in closed form. The CLI's
oracle-check command and the acceptance suite both run this battery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import reference as ref
from ..filters import FilterCycleState, enkf_analysis, enks_one_step
from ..models import LinearModel
from ..online_em import (EstimatorKind, OnlineEmProblem, OnlineEmState,
                         StepSchedule, is_stats, oss_stats, run_online_em_cycle)
from ..statespace import Ensemble, LinearObservationOp, SeededRng, SpdMatrix


@dataclass
class OracleCheck:
    name: str
    passed: bool
    detail: str


def _model_2d() -> ref.LinearGaussianModel:
    return ref.LinearGaussianModel(
        a=np.array([[0.90, 0.05], [-0.05, 0.85]]),
        h=np.eye(2),
        q=np.array([[0.30, 0.09], [0.09, 0.25]]),
        r=0.5 * np.eye(2),
        m0=np.zeros(2),
        p0=np.eye(2),
    )


def _model_1d(q: float = 0.3, r: float = 0.5) -> ref.LinearGaussianModel:
    return ref.LinearGaussianModel(
        a=np.array([[0.9]]), h=np.array([[1.0]]),
        q=np.array([[q]]), r=np.array([[r]]),
        m0=np.zeros(1), p0=np.eye(1),
    )


def check_batch_em_monotone(seed: int = 7) -> OracleCheck:
    """(a) batch EM log likelihood never decreases over 30 iterations, 2-D model."""
    model = _model_2d()
    _, obs = ref.simulate(model, 400, SeededRng(seed).generator())
    out = ref.batch_em(model, obs, q0=np.eye(2), r0=1.5 * np.eye(2), n_iterations=30)
    diffs = np.diff(out.logliks)
    ok = bool((diffs >= -1e-9).all())
    return OracleCheck("batch EM loglik monotone (30 iters, 2-d)", ok,
                       f"min increment {diffs.min():.3e}")


def check_online_vs_batch(seed: int = 11, n_cycles: int = 6000,
                          n_particles: int = 500) -> OracleCheck:
    """(b) online OSS-EnKF terminal q within 10% relative of the batch fixed point."""
    model = _model_2d()
    rng = SeededRng(seed)
    states, obs = ref.simulate(model, n_cycles, rng.substream(0).generator())

    batch = ref.batch_em(model, obs, q0=np.eye(2), r0=model.r, n_iterations=60,
                         estimate_r=False)
    q_batch = batch.qs[-1]

    problem = OnlineEmProblem(model=LinearModel(model.a),
                              h_op=LinearObservationOp(model.h),
                              estimator=EstimatorKind("oss"),
                              filter_kind="enkf",
                              schedule=StepSchedule(alpha=0.6))
    init_rng = rng.substream(1).generator()
    members = states[0] + init_rng.standard_normal((n_particles, 2))
    state = OnlineEmState.initial(Ensemble(members), SpdMatrix(np.eye(2)),
                                  SpdMatrix(model.r))
    cycle_rng = rng.substream(2).generator()
    for k in range(n_cycles):
        state, _ = run_online_em_cycle(problem, state, obs[k], cycle_rng)

    rel = np.linalg.norm(state.q.entries - q_batch) / np.linalg.norm(q_batch)
    return OracleCheck("online OSS-EnKF vs batch EM fixed point (10%)", bool(rel <= 0.10),
                       f"relative difference {rel:.3f} "
                       f"(online diag {np.diag(state.q.entries).round(4)}, "
                       f"batch diag {np.diag(q_batch).round(4)})")


def check_enkf_enks_vs_exact(seed: int = 3, n_particles: int = 100_000):
    """(c) one scalar cycle at n_p=1e5: EnKF and EnKS means within 3 SE of KF/RTS."""
    model = _model_1d()
    rng = SeededRng(seed)
    y = np.array([1.3])
    kf = ref.kalman_filter(model, y[None, :])
    sm = ref.rts_smoother(model, kf)

    gen = rng.substream(0).generator()
    prior = Ensemble(model.m0 + gen.standard_normal((n_particles, 1)))
    det = prior.members @ model.a.T
    forecast = Ensemble(det + np.sqrt(model.q[0, 0]) * gen.standard_normal((n_particles, 1)))
    h_op = LinearObservationOp(model.h)
    r = SpdMatrix(model.r)
    analysis = enkf_analysis(forecast, y, h_op, r, gen)

    se_a = 3.0 * np.sqrt(kf.filtered_covs[1][0, 0] / n_particles)
    err_a = abs(analysis.mean()[0] - kf.filtered_means[1][0])
    yield OracleCheck("EnKF analysis mean vs Kalman (3 SE, n_p=1e5)", bool(err_a <= se_a),
                      f"|error| {err_a:.5f} vs bound {se_a:.5f}")

    smoothed = enks_one_step(FilterCycleState(prior, forecast, analysis, y))
    se_s = 3.0 * np.sqrt(sm.smoothed_covs[0][0, 0] / n_particles)
    err_s = abs(smoothed.mean()[0] - sm.smoothed_means[0][0])
    yield OracleCheck("EnKS smoothed mean vs RTS (3 SE, n_p=1e5)", bool(err_s <= se_s),
                      f"|error| {err_s:.5f} vs bound {se_s:.5f}")


def check_is_oss_agreement(seed: int = 5, n_replicates: int = 40,
                           n_particles: int = 2000) -> OracleCheck:
    """(d) IS and OSS statistics agree within a paired Monte Carlo CI, scalar model."""
    model = _model_1d()
    h_op = LinearObservationOp(model.h)
    q, r = SpdMatrix(model.q), SpdMatrix(model.r)
    lin = LinearModel(model.a)
    diffs = np.empty(n_replicates)
    for i in range(n_replicates):
        gen = SeededRng(seed, stream=100 + i).generator()
        _, obs = ref.simulate(model, 2, gen)

        prior = Ensemble(model.m0 + gen.standard_normal((n_particles, 1)))
        fc1 = Ensemble(lin.propagate(prior.members)
                       + gen.standard_normal((n_particles, 1)) @ q.chol.T)
        an1 = enkf_analysis(fc1, obs[0], h_op, r, gen)
        det2 = lin.propagate(an1.members)
        fc2 = Ensemble(det2 + gen.standard_normal((n_particles, 1)) @ q.chol.T)
        an2 = enkf_analysis(fc2, obs[1], h_op, r, gen)

        stats_is, _ = is_stats(an1, lin, q, obs[1], h_op, r, 20, gen,
                               propagated_prev=det2)
        smoothed = enks_one_step(FilterCycleState(an1, fc2, an2, obs[1]))
        stats_oss = oss_stats(smoothed, an2, obs[1], lin, h_op)
        diffs[i] = stats_is.s_q[0, 0] - stats_oss.s_q[0, 0]

    bound = 3.0 * diffs.std(ddof=1) / np.sqrt(n_replicates)
    ok = bool(abs(diffs.mean()) <= bound)
    return OracleCheck("IS vs OSS statistic agreement (paired 3 SE)", ok,
                       f"mean difference {diffs.mean():.5f} vs bound {bound:.5f}")


def run_battery() -> list:
    """All criterion checks in order; each entry reports independently."""
    checks = [check_batch_em_monotone(), check_online_vs_batch()]
    checks.extend(check_enkf_enks_vs_exact())
    checks.append(check_is_oss_agreement())
    return checks
