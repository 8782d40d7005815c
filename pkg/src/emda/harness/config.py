"""Experiment configuration: one JSON or TOML file, strictly validated.

Every key maps 1:1 onto a field below; unknown keys anywhere in the tree
are a hard error so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..filters import VmpfSpec
from ..models import CycledModel, Lorenz63, Lorenz96, TwoScaleLorenz96
from ..online_em import EstimatorKind, StepSchedule


class ConfigError(ValueError):
    """Malformed experiment configuration."""


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"config: missing key '{key}' in '{where}'")
    return mapping[key]


def _check_keys(mapping: dict, allowed, where: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"config: '{where}' must be a table/object")
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"config: unknown key '{sorted(unknown)[0]}' in '{where}'")


@dataclass(frozen=True)
class CovSpec:
    """A covariance matrix recipe: scaled identity, banded ring, or full."""

    kind: str
    variance: float = 1.0          # scaled_identity
    diagonal: float = 1.0          # banded
    neighbor: float = 0.0          # banded, ring distance 1
    entries: Optional[tuple] = None  # full, row tuples

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "CovSpec":
        kind = _require(d, "kind", where)
        if kind == "scaled_identity":
            _check_keys(d, {"kind", "variance"}, where)
            return cls(kind, variance=float(_require(d, "variance", where)))
        if kind == "banded":
            _check_keys(d, {"kind", "diagonal", "neighbor"}, where)
            return cls(kind, diagonal=float(_require(d, "diagonal", where)),
                       neighbor=float(_require(d, "neighbor", where)))
        if kind == "full":
            _check_keys(d, {"kind", "entries"}, where)
            rows = _require(d, "entries", where)
            return cls(kind, entries=tuple(tuple(float(v) for v in row) for row in rows))
        raise ConfigError(f"config: unknown covariance kind {kind!r} in '{where}'")

    def build(self, dim: int) -> np.ndarray:
        if self.kind == "scaled_identity":
            return self.variance * np.eye(dim)
        if self.kind == "banded":
            m = self.diagonal * np.eye(dim)
            idx = np.arange(dim)
            m[idx, (idx + 1) % dim] = self.neighbor
            m[idx, (idx - 1) % dim] = self.neighbor
            return 0.5 * (m + m.T)
        m = np.asarray(self.entries, dtype=float)
        if m.shape != (dim, dim):
            raise ConfigError(f"config: full covariance has shape {m.shape}, expected ({dim}, {dim})")
        return m


@dataclass(frozen=True)
class TruthQSpec:
    """True transition noise: a static recipe, a sigmoid ramp of one, or none
    because the truth runs a two-scale model the filter does not have."""

    kind: str                       # "static" | "sigmoid" | "two_scale"
    base: Optional[CovSpec] = None
    amplitude: float = 2.0          # sigmoid multiplier approached for k >> center
    center: float = 1000.0
    width: float = 200.0
    n_s: int = 256                  # two_scale small-scale count
    h: float = 1.0
    b: float = 10.0
    c: float = 10.0

    @classmethod
    def from_dict(cls, d: dict, where: str) -> "TruthQSpec":
        kind = _require(d, "kind", where)
        if kind in ("scaled_identity", "banded", "full"):
            return cls("static", base=CovSpec.from_dict(d, where))
        if kind == "sigmoid":
            _check_keys(d, {"kind", "base", "amplitude", "center", "width"}, where)
            return cls("sigmoid",
                       base=CovSpec.from_dict(_require(d, "base", where), where + ".base"),
                       amplitude=float(d.get("amplitude", 2.0)),
                       center=float(d.get("center", 1000.0)),
                       width=float(d.get("width", 200.0)))
        if kind == "two_scale":
            _check_keys(d, {"kind", "n_s", "h", "b", "c"}, where)
            return cls("two_scale", n_s=int(d.get("n_s", 256)),
                       h=float(d.get("h", 1.0)), b=float(d.get("b", 10.0)),
                       c=float(d.get("c", 10.0)))
        raise ConfigError(f"config: unknown truth q kind {kind!r} in '{where}'")

    def q_at(self, k: int, dim: int) -> np.ndarray:
        """True Q in force for the transition into cycle k (static/sigmoid only)."""
        if self.kind == "two_scale":
            raise ConfigError("two-scale truth has no explicit q")
        base = self.base.build(dim)
        if self.kind == "static":
            return base
        ramp = 1.0 / (1.0 + np.exp(-(k - self.center) / self.width))
        return base * (1.0 + (self.amplitude - 1.0) * ramp)


_MODEL_KEYS = {
    "lorenz63": {"kind", "sigma", "rho", "beta"},
    "lorenz96": {"kind", "n", "forcing"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    model_kind: str
    model_params: dict
    time_step: float
    cycle_length: float
    n_cycles: int
    n_particles: int
    truth_q: TruthQSpec
    truth_r: CovSpec
    filter_kind: str
    vmpf: VmpfSpec
    estimator: EstimatorKind
    schedule: StepSchedule
    first_guess_q: CovSpec
    first_guess_r: Optional[CovSpec]
    estimate_r: bool
    seed: int
    repetitions: int
    spin_up: int = 20
    matrix_stride: int = 50
    snapshot_cycles: tuple = ()

    TOP_KEYS = {"model", "time_step", "cycle_length", "n_cycles", "n_particles",
                "truth", "filter", "estimator", "schedule", "first_guess",
                "estimate_r", "seed", "repetitions", "spin_up", "matrix_stride",
                "snapshot_cycles"}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys(d, cls.TOP_KEYS, "top level")

        model = _require(d, "model", "top level")
        model_kind = _require(model, "kind", "model")
        if model_kind not in _MODEL_KEYS:
            raise ConfigError(f"config: unknown model kind {model_kind!r}")
        _check_keys(model, _MODEL_KEYS[model_kind], "model")
        model_params = {k: v for k, v in model.items() if k != "kind"}

        truth = _require(d, "truth", "top level")
        _check_keys(truth, {"q", "r"}, "truth")
        truth_q = TruthQSpec.from_dict(_require(truth, "q", "truth"), "truth.q")
        truth_r = CovSpec.from_dict(_require(truth, "r", "truth"), "truth.r")

        filt = _require(d, "filter", "top level")
        filter_kind = _require(filt, "kind", "filter")
        if filter_kind == "enkf":
            _check_keys(filt, {"kind"}, "filter")
            vmpf = VmpfSpec()
        elif filter_kind == "vmpf":
            _check_keys(filt, {"kind", "step_size", "max_iterations",
                               "gradient_tolerance", "bandwidth_rule"}, "filter")
            defaults = VmpfSpec()
            vmpf = VmpfSpec(
                step_size=float(filt.get("step_size", defaults.step_size)),
                max_iterations=int(filt.get("max_iterations", defaults.max_iterations)),
                gradient_tolerance=float(filt.get("gradient_tolerance",
                                                  defaults.gradient_tolerance)),
                bandwidth_rule=str(filt.get("bandwidth_rule", defaults.bandwidth_rule)))
        else:
            raise ConfigError(f"config: unknown filter kind {filter_kind!r}")

        est = _require(d, "estimator", "top level")
        est_kind = _require(est, "kind", "estimator")
        if est_kind == "is":
            _check_keys(est, {"kind", "m_p"}, "estimator")
            estimator = EstimatorKind("is", m_p=int(est.get("m_p", 1)))
        elif est_kind == "oss":
            _check_keys(est, {"kind"}, "estimator")
            estimator = EstimatorKind("oss")
        else:
            raise ConfigError(f"config: unknown estimator kind {est_kind!r}")

        sched = d.get("schedule", {})
        _check_keys(sched, {"alpha", "offset"}, "schedule")
        try:
            schedule = StepSchedule(alpha=float(sched.get("alpha", 0.6)),
                                    offset=int(sched.get("offset", 0)))
        except ValueError as e:
            raise ConfigError(f"config: {e}") from None

        first = _require(d, "first_guess", "top level")
        _check_keys(first, {"q", "r"}, "first_guess")
        first_q = CovSpec.from_dict(_require(first, "q", "first_guess"), "first_guess.q")
        estimate_r = bool(d.get("estimate_r", False))
        first_r = None
        if "r" in first:
            first_r = CovSpec.from_dict(first["r"], "first_guess.r")
        if estimate_r and first_r is None:
            raise ConfigError("config: estimate_r requires 'first_guess.r'")

        cfg = cls(
            model_kind=model_kind,
            model_params=model_params,
            time_step=float(_require(d, "time_step", "top level")),
            cycle_length=float(_require(d, "cycle_length", "top level")),
            n_cycles=int(_require(d, "n_cycles", "top level")),
            n_particles=int(_require(d, "n_particles", "top level")),
            truth_q=truth_q,
            truth_r=truth_r,
            filter_kind=filter_kind,
            vmpf=vmpf,
            estimator=estimator,
            schedule=schedule,
            first_guess_q=first_q,
            first_guess_r=first_r,
            estimate_r=estimate_r,
            seed=int(_require(d, "seed", "top level")),
            repetitions=int(d.get("repetitions", 1)),
            spin_up=int(d.get("spin_up", 20)),
            matrix_stride=int(d.get("matrix_stride", 50)),
            snapshot_cycles=tuple(int(k) for k in d.get("snapshot_cycles", ())),
        )
        cfg.n_steps_per_cycle()   # validate divisibility early
        if cfg.n_cycles < 1 or cfg.n_particles < 2:
            raise ConfigError("config: n_cycles must be >= 1 and n_particles >= 2")
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            return cls.from_dict(json.loads(text))
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            return cls.from_dict(tomllib.loads(text))
        raise ConfigError(f"config: unsupported file type {path.suffix!r} (use .json or .toml)")

    # -- derived builders ---------------------------------------------------

    def n_steps_per_cycle(self) -> int:
        steps = self.cycle_length / self.time_step
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ConfigError(
                f"config: cycle_length {self.cycle_length} is not a positive multiple "
                f"of time_step {self.time_step}")
        return int(round(steps))

    def build_system(self):
        """The system the filter integrates."""
        if self.model_kind == "lorenz63":
            return Lorenz63(**self.model_params)
        return Lorenz96(**self.model_params)

    def build_truth_system(self):
        """The system the truth integrates (two-scale in imperfect-model mode)."""
        if self.truth_q.kind == "two_scale":
            filt = self.build_system()
            if not isinstance(filt, Lorenz96):
                raise ConfigError("config: two-scale truth requires a lorenz96 filter model")
            return TwoScaleLorenz96(n=filt.n, n_s=self.truth_q.n_s, forcing=filt.forcing,
                                    h=self.truth_q.h, b=self.truth_q.b, c=self.truth_q.c)
        return self.build_system()

    def cycled_model(self) -> CycledModel:
        return CycledModel(self.build_system(), self.time_step, self.n_steps_per_cycle())

    def cycled_truth_model(self) -> CycledModel:
        return CycledModel(self.build_truth_system(), self.time_step, self.n_steps_per_cycle())

    @property
    def dimension(self) -> int:
        return self.build_system().dimension
