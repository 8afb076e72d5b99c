"""Generate standalone matplotlib scripts from result CSVs.

Nothing is plotted here: the engine only writes text scripts that read the
CSVs when someone runs them.
"""

import os

from .csvio import RETRIEVAL_SCHEMA, TELEMETRY_SCHEMA, read_table

_HEADER = '''"""Generated by dltta emit-plots. Run with: python {name}"""
import csv

import matplotlib.pyplot as plt


def read(path):
    with open(path, newline="") as fh:
        fh.readline()  # schema line
        return list(csv.DictReader(fh))

'''

_LOSS_BODY = '''
CSVS = {paths!r}

fig, (ax_loss, ax_lr) = plt.subplots(2, 1, sharex=True, figsize=(9, 6))
for path in CSVS:
    rows = read(path)
    label = rows[0]["method"] if rows else path
    steps = [int(r["step"]) for r in rows]
    ax_loss.plot(steps, [float(r["tta_loss"]) for r in rows], lw=0.8, label=label)
    ax_lr.plot(steps, [float(r["applied_lr"]) for r in rows], lw=0.8, label=label)
ax_loss.set_ylabel("test-time loss (entropy)")
ax_lr.set_ylabel("applied learning rate")
ax_lr.set_xlabel("adaptation step")
ax_loss.legend()
fig.tight_layout()
fig.savefig("loss_curves.png", dpi=150)
'''

_RETRIEVAL_BODY = '''
CSVS = {paths!r}

fig, ax = plt.subplots(figsize=(6, 4))
for path in CSVS:
    rows = read(path)
    d = [int(r["retrieval_size"]) for r in rows]
    acc = [100 * float(r["mean_final_accuracy"]) for r in rows]
    err = [100 * float(r["std_final_accuracy"]) for r in rows]
    ax.errorbar(d, acc, yerr=err, marker="o", capsize=3, label=path)
ax.set_xlabel("retrieval size D")
ax.set_ylabel("final accuracy (%)")
ax.legend()
fig.tight_layout()
fig.savefig("retrieval_sweep.png", dpi=150)
'''


def _schema_name(path):
    with open(path) as fh:
        first = fh.readline().strip()
    return first.split(":", 1)[1].strip().split("/")[0] if first.startswith("# schema:") else None


def emit_plots(csv_paths, out_dir):
    """Write ``loss_curves.py`` for telemetry CSVs and ``retrieval_sweep.py``
    for retrieval-sweep CSVs; returns the script paths written."""
    groups = {"telemetry": [], "retrieval_sweep": []}
    for path in csv_paths:
        name = _schema_name(path)
        schema = RETRIEVAL_SCHEMA if name == "retrieval_sweep" else TELEMETRY_SCHEMA
        read_table(path, schema)  # raises ColumnError naming the missing column
        groups[schema[0]].append(str(path))
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for key, filename, body in (("telemetry", "loss_curves.py", _LOSS_BODY),
                                ("retrieval_sweep", "retrieval_sweep.py", _RETRIEVAL_BODY)):
        if not groups[key]:
            continue
        path = os.path.join(out_dir, filename)
        with open(path, "w") as fh:
            fh.write(_HEADER.format(name=filename) + body.format(paths=groups[key]))
        written.append(path)
    return written
