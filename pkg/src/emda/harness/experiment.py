"""Running configured experiments: truth generation, cycle loop, records."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..models import TwoScaleLorenz96
from ..online_em import OnlineEmProblem, OnlineEmState, run_online_em_cycle
from ..statespace import Ensemble, LinearObservationOp, SeededRng, SpdMatrix
from .config import ExperimentConfig

# rng stream allocation within one repetition
_STREAM_TRUTH = 0
_STREAM_INIT = 1
_STREAM_CYCLE = 2

# deterministic cycles run before the experiment starts, to land on the attractor
_ATTRACTOR_SPIN_CYCLES = 200


@dataclass
class CycleRecord:
    """One row of the per-repetition log."""

    k: int
    gamma: float
    qdiag_mean: float
    qneigh_mean: float
    qfar_mean: float
    rdiag_mean: float
    rmse: float
    ess: float          # nan when the estimator has no weights
    ms: float           # wall-clock for this cycle

    FIELDS = ("k", "gamma", "qdiag_mean", "qneigh_mean", "qfar_mean",
              "rdiag_mean", "rmse", "ess", "ms")


def covariance_band_summary(m: np.ndarray):
    """(diagonal mean, ring-distance-1 mean, ring-distance>=2 mean) of a matrix.

    Distance between indices is periodic ring distance min(|i-j|, n-|i-j|).
    A band with no entries (distance >= 2 needs n >= 4) yields nan.
    """
    n = m.shape[0]
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :])
    dist = np.minimum(dist, n - dist)
    diag_mean = float(m[dist == 0].mean())
    neigh = m[dist == 1]
    far = m[dist >= 2]
    neigh_mean = float(neigh.mean()) if neigh.size else float("nan")
    far_mean = float(far.mean()) if far.size else float("nan")
    return diag_mean, neigh_mean, far_mean


def metrics_rmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Root of the squared error averaged over every axis (time and component)."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((estimate - truth) ** 2)))


def _initial_truth_state(config: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    """Perturbed rest state integrated deterministically onto the attractor."""
    model = config.cycled_truth_model()
    system = model.system
    if isinstance(system, TwoScaleLorenz96):
        base = np.concatenate([np.full(system.n, system.forcing),
                               np.full(system.n_s, 0.1)])
    elif config.model_kind == "lorenz96":
        base = np.full(system.dimension, system.forcing)
    else:
        base = np.ones(system.dimension)
    state = base + 0.1 * rng.standard_normal(system.dimension)
    for _ in range(_ATTRACTOR_SPIN_CYCLES):
        state = model.propagate(state)
    return state


def generate_truth_and_obs(config: ExperimentConfig, rng: np.random.Generator):
    """Simulate the true trajectory and its observations.

    Returns (truth, obs): truth has shape (n_cycles + 1, n_x) in the filter
    model's coordinates, truth[0] being the initial state; obs has shape
    (n_cycles, n_x), obs[k - 1] observing truth[k]. In two-scale truth mode
    the latent trajectory carries the small scale too, the transition noise
    is zero, and only the large-scale block is returned and observed.
    """
    model = config.cycled_truth_model()
    two_scale = isinstance(model.system, TwoScaleLorenz96)
    n_x = config.dimension
    r_mat = config.truth_r.build(n_x)
    r_true = np.linalg.cholesky(r_mat) if r_mat.any() else np.zeros_like(r_mat)

    state = _initial_truth_state(config, rng)
    truth = np.empty((config.n_cycles + 1, n_x))
    obs = np.empty((config.n_cycles, n_x))
    truth[0] = state[:n_x] if two_scale else state

    for k in range(1, config.n_cycles + 1):
        state = model.propagate(state)
        if not two_scale:
            q_k = config.truth_q.q_at(k, n_x)
            if q_k.any():
                state = state + np.linalg.cholesky(q_k) @ rng.standard_normal(n_x)
        truth[k] = state[:n_x] if two_scale else state
        obs[k - 1] = truth[k] + r_true @ rng.standard_normal(n_x)
    return truth, obs


@dataclass
class RepetitionResult:
    rep: int
    records: list = field(default_factory=list)            # [CycleRecord]
    snapshots: dict = field(default_factory=dict)          # {k: q matrix copy}
    q_final: Optional[np.ndarray] = None
    r_final: Optional[np.ndarray] = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def summary_rmse(self, spin_up: int) -> float:
        vals = [rec.rmse for rec in self.records if rec.k > spin_up]
        if not vals:
            return float("nan")
        return float(np.sqrt(np.mean(np.square(vals))))


def _build_problem(config: ExperimentConfig) -> OnlineEmProblem:
    return OnlineEmProblem(
        model=config.cycled_model(),
        h_op=LinearObservationOp.identity(config.dimension),
        estimator=config.estimator,
        filter_kind=config.filter_kind,
        schedule=config.schedule,
        estimate_r=config.estimate_r,
        vmpf=config.vmpf,
    )


def run_repetition(config: ExperimentConfig, rep: int) -> RepetitionResult:
    """Run one seeded repetition; failures are captured, not raised."""
    n_x = config.dimension
    base = SeededRng(config.seed + rep)
    result = RepetitionResult(rep)
    try:
        truth, obs = generate_truth_and_obs(config, base.substream(_STREAM_TRUTH).generator())

        q0 = SpdMatrix(config.first_guess_q.build(n_x))
        r0 = SpdMatrix(config.first_guess_r.build(n_x)) if config.estimate_r \
            else SpdMatrix(config.truth_r.build(n_x))
        init_rng = base.substream(_STREAM_INIT).generator()
        members = truth[0] + init_rng.standard_normal((config.n_particles, n_x)) @ q0.chol.T
        state = OnlineEmState.initial(Ensemble(members), q0, r0, config.estimate_r)

        problem = _build_problem(config)
        cycle_rng = base.substream(_STREAM_CYCLE).generator()
        snapshot_at = set(config.snapshot_cycles)
        for k in range(1, config.n_cycles + 1):
            t0 = time.perf_counter()
            state, diag = run_online_em_cycle(problem, state, obs[k - 1], cycle_rng)
            ms = 1e3 * (time.perf_counter() - t0)

            qdiag, qneigh, qfar = covariance_band_summary(state.q.entries)
            rdiag = float(np.diag(state.r.entries).mean())
            rmse = metrics_rmse(state.analysis.mean(), truth[k])
            result.records.append(CycleRecord(k, diag.gamma, qdiag, qneigh, qfar,
                                              rdiag, rmse, diag.ess, ms))
            if k in snapshot_at or k % config.matrix_stride == 0 or k == config.n_cycles:
                result.snapshots[k] = state.q.entries.copy()
        result.q_final = state.q.entries.copy()
        result.r_final = state.r.entries.copy()
    except Exception as e:  # a failed repetition is recorded, not fatal
        result.error = f"{type(e).__name__}: {e}"
    return result


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    repetitions: list                 # [RepetitionResult]

    @property
    def succeeded(self) -> list:
        return [r for r in self.repetitions if not r.failed]


def run_experiment(config: ExperimentConfig, out_dir=None,
                   repetitions: Optional[int] = None,
                   seed: Optional[int] = None) -> ExperimentResult:
    """Run all repetitions of a configured experiment.

    repetitions / seed override the config (command-line convenience). When
    out_dir is given, per-repetition CSVs and matrix sidecars are written
    there.
    """
    if seed is not None or repetitions is not None:
        import dataclasses
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if repetitions is not None:
            changes["repetitions"] = int(repetitions)
        config = dataclasses.replace(config, **changes)

    results = [run_repetition(config, rep) for rep in range(config.repetitions)]
    out = ExperimentResult(config, results)
    if out_dir is not None:
        from .io import write_experiment
        write_experiment(out, out_dir)
    return out
