"""Command-line driver: twin experiments, likelihood surfaces, validation checks."""

from __future__ import annotations

import argparse
import json
import os
import sys

# Honor an optional thread-count variable before any BLAS gets loaded.
_threads = os.environ.get("EMDA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import numpy as np  # noqa: E402

from ..statespace import SeededRng  # noqa: E402
from .config import ExperimentConfig  # noqa: E402
from .experiment import _STREAM_TRUTH, generate_truth_and_obs, run_experiment  # noqa: E402
from .loglik import loglik_surface  # noqa: E402
from .oracles import run_battery  # noqa: E402
from .twoscale import reference_covariance_two_scale  # noqa: E402


def _parse_grid(text):
    """Parse 'a:b:n' into np.linspace(a, b, n)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid {text!r} is not of the form a:b:n")
    lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    if n < 1:
        raise ValueError(f"grid {text!r} needs at least one point")
    return np.linspace(lo, hi, n)


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    result = run_experiment(config, out_dir=args.out,
                            repetitions=args.reps, seed=args.seed)
    spin = result.config.spin_up
    for rep in result.repetitions:
        if rep.failed:
            print(f"rep {rep.rep}: failed: {rep.error}")
        else:
            qdiag = float(np.diag(rep.q_final).mean())
            print(f"rep {rep.rep}: qdiag_mean={qdiag:.4f} "
                  f"rmse={rep.summary_rmse(spin):.4f}")
    if args.out:
        print(f"wrote {len(result.repetitions)} repetition(s) under {args.out}")
    if not result.succeeded:
        raise RuntimeError("every repetition failed")
    return 0


def _cmd_loglik_surface(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    q_values = _parse_grid(args.qgrid)
    r_values = _parse_grid(args.rgrid)
    truth_rng = SeededRng(config.seed).substream(_STREAM_TRUTH).generator()
    _, obs = generate_truth_and_obs(config, truth_rng)
    surface = loglik_surface(q_values, r_values, obs, config, config.seed)

    lines = ["q,r,loglik"]
    for i, qv in enumerate(q_values):
        for j, rv in enumerate(r_values):
            lines.append(f"{qv:.17g},{rv:.17g},{surface[i, j]:.17g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"wrote {surface.size} grid nodes to {args.out}")
    else:
        sys.stdout.write(text)
    if np.isfinite(surface).any():
        i, j = np.unravel_index(np.nanargmax(surface), surface.shape)
        print(f"argmax: q={q_values[i]:.6g} r={r_values[j]:.6g} "
              f"loglik={surface[i, j]:.6g}")
    return 0


def _cmd_oracle_check(_args) -> int:
    checks = run_battery()
    failures = 0
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"{status} {check.name}: {check.detail}")
        failures += not check.passed
    if failures:
        raise RuntimeError(f"{failures} of {len(checks)} oracle checks failed")
    return 0


def _cmd_reference_q(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    out = reference_covariance_two_scale(config)
    payload = {
        "multiple": out.multiple,
        "base_diag_mean": float(np.diag(out.base).mean()),
        "q": out.q.entries.tolist(),
        "logliks": [float(v) for v in out.logliks],
        "rmses": [float(v) for v in out.rmses],
    }
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emda",
        description="Online EM estimation of model-error covariance "
                    "in ensemble data assimilation twin experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured twin experiment")
    p_run.add_argument("--config", required=True, help="JSON or TOML config file")
    p_run.add_argument("--out", default=None, help="directory for CSV/JSON output")
    p_run.add_argument("--reps", type=int, default=None,
                       help="override the configured repetition count")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the configured base seed")
    p_run.set_defaults(func=_cmd_run)

    p_surf = sub.add_parser("loglik-surface",
                            help="EnKF log-likelihood over a (q, r) grid")
    p_surf.add_argument("--config", required=True)
    p_surf.add_argument("--qgrid", required=True, metavar="a:b:n",
                        help="model-error variance grid, linspace endpoints and count")
    p_surf.add_argument("--rgrid", required=True, metavar="a:b:n",
                        help="observation-error variance grid")
    p_surf.add_argument("--out", default=None, help="CSV output path (default stdout)")
    p_surf.set_defaults(func=_cmd_loglik_surface)

    p_oracle = sub.add_parser("oracle-check",
                              help="run the linear-Gaussian validation battery")
    p_oracle.set_defaults(func=_cmd_oracle_check)

    p_ref = sub.add_parser("reference-q",
                           help="reference model-error covariance for the "
                                "truncated two-scale model")
    p_ref.add_argument("--config", required=True)
    p_ref.set_defaults(func=_cmd_reference_q)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one machine-readable line, nonzero exit
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
