"""Output files: one CSV of cycle records per repetition plus a matrix sidecar.

Floats are written with repr-level precision so identical runs produce
identical bytes (wall-clock ms is the one column that cannot honor that).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .experiment import CycleRecord, ExperimentResult


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_cycle_csv(path, records) -> None:
    """Write CycleRecords with the fixed column schema."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CycleRecord.FIELDS)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, name)) for name in CycleRecord.FIELDS])


def read_cycle_csv(path):
    """Read a cycle CSV back into CycleRecords."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(CycleRecord(k=int(row["k"]),
                                       **{name: float(row[name])
                                          for name in CycleRecord.FIELDS if name != "k"}))
    return records


def write_matrices_json(path, snapshots, q_final=None, r_final=None) -> None:
    """Sidecar with the full matrices kept at the snapshot cycles."""
    payload = {
        "cycles": {str(k): np.asarray(m).tolist() for k, m in sorted(snapshots.items())},
    }
    if q_final is not None:
        payload["q_final"] = np.asarray(q_final).tolist()
    if r_final is not None:
        payload["r_final"] = np.asarray(r_final).tolist()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_matrices_json(path):
    with open(path) as fh:
        payload = json.load(fh)
    snapshots = {int(k): np.asarray(m) for k, m in payload["cycles"].items()}
    q_final = np.asarray(payload["q_final"]) if "q_final" in payload else None
    r_final = np.asarray(payload["r_final"]) if "r_final" in payload else None
    return snapshots, q_final, r_final


def write_experiment(result: ExperimentResult, out_dir) -> None:
    """Write every repetition of an experiment under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rep_result in result.repetitions:
        stem = f"rep{rep_result.rep:03d}"
        write_cycle_csv(out / f"{stem}.csv", rep_result.records)
        write_matrices_json(out / f"{stem}_matrices.json", rep_result.snapshots,
                            rep_result.q_final, rep_result.r_final)
        if rep_result.failed:
            (out / f"{stem}_error.txt").write_text(rep_result.error + "\n")
