import dataclasses
import json
import math

import numpy as np
import pytest

from emda.harness.config import ConfigError, CovSpec, ExperimentConfig, TruthQSpec
from emda.harness.experiment import (CycleRecord, covariance_band_summary,
                                     generate_truth_and_obs, metrics_rmse,
                                     run_experiment, run_repetition)
from emda.harness.io import (read_cycle_csv, read_matrices_json,
                             write_cycle_csv, write_matrices_json)
from emda.harness.loglik import approx_loglik, enkf_pass, loglik_surface
from emda.harness import twoscale
from emda.models import LinearModel, Lorenz63, TwoScaleLorenz96
from emda.reference import LinearGaussianModel, kalman_filter, simulate
from emda.statespace import SeededRng, SpdMatrix


def minimal_dict(**overrides):
    d = {
        "model": {"kind": "lorenz96", "n": 8, "forcing": 8.0},
        "time_step": 0.05,
        "cycle_length": 0.05,
        "n_cycles": 10,
        "n_particles": 20,
        "truth": {"q": {"kind": "scaled_identity", "variance": 0.3},
                  "r": {"kind": "scaled_identity", "variance": 0.5}},
        "filter": {"kind": "enkf"},
        "estimator": {"kind": "oss"},
        "first_guess": {"q": {"kind": "scaled_identity", "variance": 1.0}},
        "seed": 1,
    }
    d.update(overrides)
    return d


TOML_EQUIVALENT = """\
time_step = 0.05
cycle_length = 0.05
n_cycles = 10
n_particles = 20
seed = 1

[model]
kind = "lorenz96"
n = 8
forcing = 8.0

[truth.q]
kind = "scaled_identity"
variance = 0.3

[truth.r]
kind = "scaled_identity"
variance = 0.5

[filter]
kind = "enkf"

[estimator]
kind = "oss"

[first_guess.q]
kind = "scaled_identity"
variance = 1.0
"""


def test_config_json_and_toml_parse_identically(tmp_path):
    jpath = tmp_path / "c.json"
    jpath.write_text(json.dumps(minimal_dict()))
    tpath = tmp_path / "c.toml"
    tpath.write_text(TOML_EQUIVALENT)
    assert ExperimentConfig.from_file(jpath) == ExperimentConfig.from_file(tpath)


def test_config_rejects_other_suffixes(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("x: 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(p)


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(bogus=1),
    lambda d: d["model"].update(sigma=10.0),            # lorenz96 has no sigma
    lambda d: d["truth"]["q"].update(spread=2.0),
    lambda d: d["estimator"].update(m_p=5),             # oss takes no m_p
    lambda d: d["filter"].update(inflation=1.1),
])
def test_config_unknown_keys_are_hard_errors(mutate):
    d = minimal_dict()
    mutate(d)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d)


def test_config_estimate_r_needs_first_guess_r():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(minimal_dict(estimate_r=True))
    d = minimal_dict(estimate_r=True)
    d["first_guess"]["r"] = {"kind": "scaled_identity", "variance": 1.0}
    cfg = ExperimentConfig.from_dict(d)
    assert cfg.estimate_r and cfg.first_guess_r is not None


def test_config_cycle_must_be_multiple_of_step():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(minimal_dict(time_step=0.02))
    cfg = ExperimentConfig.from_dict(minimal_dict(time_step=0.01))
    assert cfg.n_steps_per_cycle() == 5


def test_config_bounds():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(minimal_dict(n_particles=1))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(minimal_dict(n_cycles=0))


def test_config_lorenz63_defaults():
    d = minimal_dict()
    d["model"] = {"kind": "lorenz63"}
    cfg = ExperimentConfig.from_dict(d)
    assert isinstance(cfg.build_system(), Lorenz63)
    assert cfg.dimension == 3


def test_config_vmpf_filter_block():
    d = minimal_dict()
    d["filter"] = {"kind": "vmpf", "step_size": 0.02, "max_iterations": 80}
    cfg = ExperimentConfig.from_dict(d)
    assert cfg.vmpf.step_size == 0.02
    assert cfg.vmpf.max_iterations == 80
    assert cfg.vmpf.bandwidth_rule == "scott*q"


def test_config_snapshot_cycles_to_ints():
    cfg = ExperimentConfig.from_dict(minimal_dict(snapshot_cycles=[1, 10.0, 50]))
    assert cfg.snapshot_cycles == (1, 10, 50)


def test_covspec_banded_build():
    m = CovSpec("banded", diagonal=0.23, neighbor=0.08).build(8)
    idx = np.arange(8)
    assert np.allclose(np.diag(m), 0.23)
    assert np.allclose(m[idx, (idx + 1) % 8], 0.08)
    assert np.allclose(m[idx, (idx - 1) % 8], 0.08)
    dist = np.minimum(np.abs(idx[:, None] - idx[None, :]),
                      8 - np.abs(idx[:, None] - idx[None, :]))
    assert np.all(m[dist >= 2] == 0.0)
    np.testing.assert_array_equal(m, m.T)


def test_covspec_full_shape_check():
    spec = CovSpec.from_dict({"kind": "full", "entries": [[1.0, 0.0], [0.0, 1.0]]},
                             "test")
    np.testing.assert_array_equal(spec.build(2), np.eye(2))
    with pytest.raises(ConfigError):
        spec.build(3)


def test_truth_q_sigmoid_closed_form():
    spec = TruthQSpec.from_dict(
        {"kind": "sigmoid", "base": {"kind": "scaled_identity", "variance": 0.3},
         "amplitude": 3.0, "center": 100.0, "width": 20.0}, "t")
    base = 0.3 * np.eye(2)
    np.testing.assert_allclose(spec.q_at(100, 2), 2.0 * base, rtol=1e-12)
    ramp = 1.0 / (1.0 + math.exp(5.0))
    np.testing.assert_allclose(spec.q_at(0, 2), base * (1.0 + 2.0 * ramp), rtol=1e-12)
    np.testing.assert_allclose(spec.q_at(100000, 2), 3.0 * base, rtol=1e-9)


def test_truth_q_two_scale_has_no_explicit_matrix():
    spec = TruthQSpec.from_dict({"kind": "two_scale", "n_s": 8}, "t")
    with pytest.raises(ConfigError):
        spec.q_at(1, 4)


def two_scale_dict(h=1.0, **overrides):
    d = minimal_dict(time_step=0.002, cycle_length=0.01, n_cycles=3,
                     n_particles=8)
    d["model"] = {"kind": "lorenz96", "n": 4, "forcing": 20.0}
    d["truth"]["q"] = {"kind": "two_scale", "n_s": 8, "h": h}
    d.update(overrides)
    return d


def test_two_scale_truth_system_inherits_forcing():
    cfg = ExperimentConfig.from_dict(two_scale_dict())
    system = cfg.build_truth_system()
    assert isinstance(system, TwoScaleLorenz96)
    assert system.forcing == 20.0 and system.n == 4 and system.n_s == 8


def test_two_scale_truth_requires_lorenz96_filter():
    d = two_scale_dict()
    d["model"] = {"kind": "lorenz63"}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(d).build_truth_system()


def test_generate_truth_noiseless_obs_equal_truth():
    d = minimal_dict(n_cycles=5)
    d["truth"]["q"] = {"kind": "scaled_identity", "variance": 0.0}
    d["truth"]["r"] = {"kind": "scaled_identity", "variance": 0.0}
    cfg = ExperimentConfig.from_dict(d)
    truth, obs = generate_truth_and_obs(cfg, np.random.default_rng(0))
    assert truth.shape == (6, 8) and obs.shape == (5, 8)
    np.testing.assert_array_equal(obs, truth[1:])


def test_generate_truth_objection_noise_variance():
    d = minimal_dict(n_cycles=500)
    d["model"] = {"kind": "lorenz63"}
    d["truth"]["q"] = {"kind": "scaled_identity", "variance": 0.0}
    cfg = ExperimentConfig.from_dict(d)
    truth, obs = generate_truth_and_obs(cfg, np.random.default_rng(1))
    resid = (obs - truth[1:]).ravel()
    se = 0.5 * np.sqrt(2.0 / resid.size)
    assert abs(resid.var() - 0.5) < 3 * se
    assert abs(resid.mean()) < 3 * np.sqrt(0.5 / resid.size)


def test_generate_truth_deterministic_under_seed():
    cfg = ExperimentConfig.from_dict(minimal_dict(n_cycles=4))
    t1, o1 = generate_truth_and_obs(cfg, np.random.default_rng(7))
    t2, o2 = generate_truth_and_obs(cfg, np.random.default_rng(7))
    np.testing.assert_array_equal(t1, t2)
    np.testing.assert_array_equal(o1, o2)


def test_generate_truth_two_scale_returns_large_scale_only():
    cfg = ExperimentConfig.from_dict(two_scale_dict())
    truth, obs = generate_truth_and_obs(cfg, np.random.default_rng(2))
    assert truth.shape == (4, 4) and obs.shape == (3, 4)
    assert np.isfinite(truth).all() and np.isfinite(obs).all()


def test_metrics_rmse_hand_value_and_offset():
    assert metrics_rmse(np.array([3.0, 4.0]), np.zeros(2)) == pytest.approx(
        np.sqrt(12.5), rel=1e-15)
    x = np.random.default_rng(3).standard_normal((10, 4))
    assert metrics_rmse(x + 0.7, x) == pytest.approx(0.7, rel=1e-12)
    with pytest.raises(ValueError):
        metrics_rmse(np.zeros(3), np.zeros(4))


def test_band_summary_on_banded_matrix():
    m = CovSpec("banded", diagonal=0.3, neighbor=0.1).build(5)
    diag, neigh, far = covariance_band_summary(m)
    assert diag == pytest.approx(0.3) and neigh == pytest.approx(0.1)
    assert far == pytest.approx(0.0)


def test_band_summary_small_matrix_far_band_empty():
    diag, neigh, far = covariance_band_summary(np.eye(3))
    assert diag == 1.0 and neigh == 0.0 and math.isnan(far)


def test_band_summary_matches_direct_loop():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((8, 8))
    diag, neigh, far = covariance_band_summary(m)
    groups = {0: [], 1: [], 2: []}
    for i in range(8):
        for j in range(8):
            d = min(abs(i - j), 8 - abs(i - j))
            groups[min(d, 2)].append(m[i, j])
    assert diag == pytest.approx(np.mean(groups[0]))
    assert neigh == pytest.approx(np.mean(groups[1]))
    assert far == pytest.approx(np.mean(groups[2]))


def smoke_config(**overrides):
    d = minimal_dict(n_cycles=3, n_particles=15)
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


def test_run_repetition_records_and_snapshots():
    rep = run_repetition(smoke_config(), 0)
    assert not rep.failed
    assert [r.k for r in rep.records] == [1, 2, 3]
    assert rep.records[0].gamma == 1.0
    assert rep.records[1].gamma == pytest.approx(2.0 ** -0.6)
    assert 3 in rep.snapshots            # final cycle always snapshotted
    np.testing.assert_array_equal(rep.snapshots[3], rep.q_final)
    np.testing.assert_array_equal(rep.q_final, rep.q_final.T)


def test_run_experiment_is_reproducible():
    cfg = smoke_config()
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    for ra, rb in zip(a.repetitions, b.repetitions):
        assert not ra.failed and not rb.failed
        for x, y in zip(ra.records, rb.records):
            for name in CycleRecord.FIELDS:
                if name == "ms":
                    continue
                vx, vy = getattr(x, name), getattr(y, name)
                assert vx == vy or (math.isnan(vx) and math.isnan(vy))
        np.testing.assert_array_equal(ra.q_final, rb.q_final)


def test_run_experiment_overrides_seed_and_reps():
    cfg = smoke_config()
    out = run_experiment(cfg, repetitions=2, seed=123)
    assert len(out.repetitions) == 2
    assert out.config.seed == 123 and out.config.repetitions == 2


def test_run_experiment_writes_outputs(tmp_path):
    out = run_experiment(smoke_config(), out_dir=tmp_path)
    assert (tmp_path / "rep000.csv").exists()
    assert (tmp_path / "rep000_matrices.json").exists()
    back = read_cycle_csv(tmp_path / "rep000.csv")
    assert [r.k for r in back] == [1, 2, 3]
    snaps, q_final, r_final = read_matrices_json(tmp_path / "rep000_matrices.json")
    np.testing.assert_array_equal(q_final, out.repetitions[0].q_final)
    assert 3 in snaps


def test_cycle_csv_round_trip(tmp_path):
    recs = [CycleRecord(1, 1.0, 0.3, 0.08, -0.001, 0.5, 1.25, float("nan"), 3.5),
            CycleRecord(2, 0.659753955386447, 0.31, 0.07, 0.002, 0.5, 1.5, 42.0, 2.5)]
    path = tmp_path / "r.csv"
    write_cycle_csv(path, recs)
    back = read_cycle_csv(path)
    assert len(back) == 2
    for orig, rt in zip(recs, back):
        for name in CycleRecord.FIELDS:
            vo, vr = getattr(orig, name), getattr(rt, name)
            assert vo == vr or (math.isnan(vo) and math.isnan(vr))


def test_matrices_json_round_trip(tmp_path):
    snaps = {5: np.arange(4.0).reshape(2, 2), 10: np.eye(2) * 0.3}
    path = tmp_path / "m.json"
    write_matrices_json(path, snaps, q_final=np.eye(2), r_final=0.5 * np.eye(2))
    back, q_final, r_final = read_matrices_json(path)
    np.testing.assert_array_equal(back[5], snaps[5])
    np.testing.assert_array_equal(back[10], snaps[10])
    np.testing.assert_array_equal(q_final, np.eye(2))
    np.testing.assert_array_equal(r_final, 0.5 * np.eye(2))


class StubConfig:
    """Duck-typed stand-in for enkf_pass: a scalar linear cycle map."""

    def __init__(self, a=0.9, n_particles=100):
        self.a = a
        self.n_particles = n_particles

    def cycled_model(self):
        return LinearModel(np.array([[self.a]]))

    @property
    def dimension(self):
        return 1


def test_enkf_pass_loglik_matches_exact_kalman():
    model = LinearGaussianModel(a=np.array([[0.9]]), h=np.array([[1.0]]),
                                q=np.array([[0.3]]), r=np.array([[0.5]]),
                                m0=np.zeros(1), p0=np.eye(1))
    _, obs = simulate(model, 21, np.random.default_rng(5))

    # the pass anchors the ensemble on obs[0] with spread r, then scores the
    # remaining innovations; the exact counterpart is a filter started there
    anchored = model.replace(m0=obs[0], p0=model.r)
    exact = kalman_filter(anchored, obs[1:]).loglik

    got = approx_loglik(SpdMatrix(model.q), SpdMatrix(model.r), obs,
                        StubConfig(n_particles=100_000),
                        np.random.default_rng(6))
    assert abs(got - exact) < 0.02


def test_enkf_pass_returns_rmse_against_truth():
    cfg = smoke_config(n_cycles=6)
    rng = SeededRng(cfg.seed).substream(0).generator()
    truth, obs = generate_truth_and_obs(cfg, rng)
    q = SpdMatrix.scaled_identity(0.3, 8)
    r = SpdMatrix.scaled_identity(0.5, 8)
    loglik, rmse = enkf_pass(q, r, obs, cfg, SeededRng(99).generator(), truth)
    assert np.isfinite(loglik)
    assert 0 < rmse < 10


def test_loglik_surface_common_random_numbers():
    cfg = smoke_config(n_cycles=5)
    _, obs = generate_truth_and_obs(cfg, SeededRng(cfg.seed).substream(0).generator())
    surface = loglik_surface([0.3, 0.3], [0.5], obs, cfg, seed=11)
    assert surface.shape == (2, 1)
    assert surface[0, 0] == surface[1, 0]
    assert np.isfinite(surface).all()


def test_coupling_covariance_vanishes_without_coupling():
    cfg = ExperimentConfig.from_dict(two_scale_dict(h=0.0))
    cov = twoscale.coupling_covariance(cfg, np.random.default_rng(8))
    np.testing.assert_array_equal(cov, np.zeros((4, 4)))


def test_reference_covariance_single_candidate(monkeypatch):
    monkeypatch.setattr(twoscale, "MULTIPLE_GRID", (0.7,))
    cfg = ExperimentConfig.from_dict(two_scale_dict(n_cycles=5))
    out = twoscale.reference_covariance_two_scale(cfg)
    assert out.multiple == 0.7
    np.testing.assert_allclose(out.q.entries, 0.7 * out.base, atol=1e-15)
    np.testing.assert_allclose(out.base, cfg.cycle_length * out.s_f, atol=1e-15)
    assert out.logliks.shape == (1,) and np.isfinite(out.logliks[0])
