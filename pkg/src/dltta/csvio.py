"""Versioned CSV tables written by the CLI.

Each file starts with a ``# schema: <name>/<version>`` line followed by the
header row. Readers check both and refuse files whose columns drifted.
"""

import csv

from .errors import FormatError

TELEMETRY_SCHEMA = ("telemetry", 1, ("step", "method", "severity", "discrepancy", "applied_lr",
                                     "tta_loss", "correct_count", "bank_size"))
TRAIN_LOG_SCHEMA = ("train_log", 1, ("epoch", "loss", "accuracy"))
SWEEP_LR_SCHEMA = ("sweep_lr", 1, ("method", "alpha", "seed", "final_accuracy", "loss_smoothness"))
SWEEP_SUMMARY_SCHEMA = ("sweep_lr_summary", 1, ("method", "alpha", "mean_final_accuracy", "std_across_grid"))
ORDER_SCHEMA = ("order_study", 1, ("order_seed", "method", "final_accuracy", "streaming_accuracy",
                                   "batch_checksum"))
RETRIEVAL_SCHEMA = ("retrieval_sweep", 1, ("retrieval_size", "mean_final_accuracy",
                                           "std_final_accuracy", "n_seeds"))
COMPARE_SCHEMA = ("compare", 1, ("method", "seed", "final_accuracy", "streaming_accuracy",
                                 "loss_smoothness", "mean_lr"))

SCHEMAS = {s[0]: s for s in (TELEMETRY_SCHEMA, TRAIN_LOG_SCHEMA, SWEEP_LR_SCHEMA, SWEEP_SUMMARY_SCHEMA,
                             ORDER_SCHEMA, RETRIEVAL_SCHEMA, COMPARE_SCHEMA)}


class ColumnError(FormatError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(path, schema, rows):
    name, version, columns = schema
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {name}/{version}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_table(path, schema=None):
    """Rows as dicts of strings; ``schema`` (or the embedded one) is enforced."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# schema:"):
            raise FormatError(f"{path}: missing schema line")
        tag = first.split(":", 1)[1].strip()
        name, _, version = tag.partition("/")
        expected = schema or SCHEMAS.get(name)
        if expected is None:
            raise FormatError(f"{path}: unknown schema {tag!r}")
        if (name, version) != (expected[0], str(expected[1])):
            raise FormatError(f"{path}: schema {tag!r} but expected {expected[0]}/{expected[1]}")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: missing header row")
        missing = [c for c in expected[2] if c not in header]
        if missing:
            raise ColumnError(f"{path}: missing column {missing[0]!r}", missing[0])
        extra = [c for c in header if c not in expected[2]]
        if extra:
            raise ColumnError(f"{path}: unexpected column {extra[0]!r}", extra[0])
        return [dict(zip(header, row)) for row in reader]


def telemetry_rows(telemetry, correct, method):
    for rec, c in zip(telemetry, correct):
        yield dict(step=rec.step_index, method=method, severity=rec.severity_label,
                   discrepancy=float(rec.discrepancy), applied_lr=float(rec.applied_lr),
                   tta_loss=float(rec.tta_loss_before), correct_count=int(c), bank_size=rec.bank_size)
