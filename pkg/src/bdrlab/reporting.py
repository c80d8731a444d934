"""Machine-readable run outputs: hashed JSON reports and CSV traces.

The JSON body is canonicalised (sorted keys, no whitespace) before hashing
so two runs of the same config produce byte-identical hashed bodies; wall
time lives outside the body. All files are written atomically.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

STEP_COLUMNS = (
    "phase",
    "epoch",
    "step",
    "loss_new",
    "loss_old",
    "grad_new_norm",
    "grad_old_norm",
    "grad_total_sq",
    "contrib_inner",
)

BALANCE_COLUMNS = ("step", "class", "psi", "omega", "pi_hat")

BOXPLOT_COLUMNS = ("phase", "min", "q1", "median", "q3", "max", "outlier_count")


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    # allow_nan=False enforces the every-number-finite contract
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def body_hash(body) -> str:
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def write_report(path, body, wall_time_s):
    """Write the run report; returns the body hash."""
    digest = body_hash(body)
    document = {"body": body, "body_sha256": digest, "wall_time_s": wall_time_s}
    atomic_write_text(path, json.dumps(document, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return digest


def read_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _csv_text(columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def write_step_csv(path, records):
    rows = [
        (
            r.phase,
            r.epoch,
            r.step,
            r.loss_new,
            r.loss_old,
            r.grad_new_norm,
            r.grad_old_norm,
            r.grad_total_sq,
            r.contrib_inner,
        )
        for r in records
    ]
    atomic_write_text(path, _csv_text(STEP_COLUMNS, rows))


def write_balance_csv(path, rows):
    atomic_write_text(path, _csv_text(BALANCE_COLUMNS, rows))


def write_boxplot_csv(path, per_phase_boxes):
    """per_phase_boxes: iterable of (phase, BoxplotStats-like dict)."""
    rows = [
        (phase, box["min"], box["q1"], box["median"], box["q3"], box["max"], box["outlier_count"])
        for phase, box in per_phase_boxes
    ]
    atomic_write_text(path, _csv_text(BOXPLOT_COLUMNS, rows))
