"""Command line interface.

    dltta init-config --out run.cfg
    dltta train   --config run.cfg --out runs/src
    dltta adapt   --config run.cfg --model runs/src/model.bin --method dltta --out runs/adapt
    dltta compare | sweep-lr | order-study | retrieval-sweep  (same flags)
    dltta emit-plots runs/adapt/telemetry.csv --out runs/plots
    dltta replay runs/adapt/manifest.json --out runs/adapt-again

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
Every run writes ``manifest.json`` (resolved config, seeds, input and
output hashes); ``replay`` re-executes a manifest.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .config import REQUIRED_KEYS, RunConfig, from_mapping, load_config
from .csvio import (COMPARE_SCHEMA, ORDER_SCHEMA, RETRIEVAL_SCHEMA, SWEEP_LR_SCHEMA,
                    SWEEP_SUMMARY_SCHEMA, TELEMETRY_SCHEMA, TRAIN_LOG_SCHEMA, telemetry_rows,
                    write_table)
from .engine import METHODS
from .errors import ConfigError, DlttaError
from .experiments import (compare_methods, grid_std, order_study, retrieval_sweep, run_one,
                          sweep_lr, train_from_config)
from .metrics import correct_counts
from .model import load_model, model_to_bytes, save_model
from .plots import emit_plots

log = logging.getLogger("dltta")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def sha256_file(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    """Collects what one command needs to be replayed exactly."""

    def __init__(self, command, cfg, out_dir, options):
        self.command = command
        self.cfg = cfg
        self.out_dir = out_dir
        self.options = options
        self.inputs = {}
        self.outputs = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        self.outputs.append(name)
        return os.path.join(self.out_dir, name)

    def load_model(self, model_path):
        if model_path:
            self.inputs["model"] = {"path": os.path.abspath(model_path), "sha256": sha256_file(model_path)}
            return load_model(model_path)
        model, _ = train_from_config(self.cfg)
        self.inputs["model"] = {"path": None, "sha256": hashlib.sha256(model_to_bytes(model)).hexdigest()}
        return model

    def finish(self, extra=None):
        manifest = {
            "tool": "dltta",
            "version": __version__,
            "command": self.command,
            "options": self.options,
            "config": self.cfg.to_dict(),
            "seeds": {"stream": self.cfg.seed, "model": self.cfg.model_seed, "data": self.cfg.data_seed,
                      "means": self.cfg.means_seed, "sweep": list(self.cfg.seeds)},
            "inputs": self.inputs,
            "outputs": {name: sha256_file(os.path.join(self.out_dir, name)) for name in sorted(self.outputs)},
        }
        if extra:
            manifest.update(extra)
        _write_json(os.path.join(self.out_dir, "manifest.json"), manifest)


# -- commands ---------------------------------------------------------------

def cmd_train(run, opts):
    rows = []
    model, val_acc = train_from_config(run.cfg, log=lambda e, l, a: rows.append(
        dict(epoch=e, loss=float(l), accuracy=float(a))))
    save_model(model, run.path("model.bin"))
    write_table(run.path("train_log.csv"), TRAIN_LOG_SCHEMA, rows)
    _write_json(run.path("train_metrics.json"), {"validation_accuracy": val_acc})
    print(f"validation accuracy {val_acc:.4f}")
    return 0


def cmd_adapt(run, opts):
    method = opts["method"] or run.cfg.method
    model = run.load_model(opts["model"])
    stream = run.cfg.make_stream()
    labels = stream.release_labels()
    result = run_one(model, run.cfg, method=method)
    write_table(run.path("telemetry.csv"), TELEMETRY_SCHEMA,
                telemetry_rows(result.telemetry, correct_counts(result.telemetry, labels), method))
    metrics = result.metrics.to_dict()
    metrics["flagged"] = result.flagged
    metrics["method"] = method
    _write_json(run.path("metrics.json"), metrics)
    print(f"{method}: final accuracy {result.metrics.final_accuracy:.4f}, "
          f"streaming accuracy {result.metrics.streaming_accuracy:.4f}")
    return EXIT_RUNTIME if result.flagged else 0


def cmd_compare(run, opts):
    model = run.load_model(opts["model"])
    labels = run.cfg.make_stream().release_labels()
    for method in METHODS:
        result = run_one(model, run.cfg, method=method)
        write_table(run.path(f"telemetry_{method}.csv"), TELEMETRY_SCHEMA,
                    telemetry_rows(result.telemetry, correct_counts(result.telemetry, labels), method))
    rows = compare_methods(model, run.cfg, jobs=opts["jobs"])
    write_table(run.path("compare.csv"), COMPARE_SCHEMA, rows)
    for method in METHODS:
        vals = [r["final_accuracy"] for r in rows if r["method"] == method]
        print(f"{method:6s} final accuracy {sum(vals) / len(vals):.4f} +- {grid_std(vals):.4f}")
    return 0


def cmd_sweep_lr(run, opts):
    model = run.load_model(opts["model"])
    methods = tuple(opts["methods"].split(",")) if opts["methods"] else None
    for m in methods or ():
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}", key="methods")
    rows, summary = sweep_lr(model, run.cfg, methods=methods, jobs=opts["jobs"])
    write_table(run.path("sweep_lr.csv"), SWEEP_LR_SCHEMA, rows)
    write_table(run.path("sweep_lr_summary.csv"), SWEEP_SUMMARY_SCHEMA, summary)
    for row in summary:
        print(f"{row['method']:6s} alpha={row['alpha']:<10g} final={row['mean_final_accuracy']:.4f} "
              f"std_across_grid={row['std_across_grid']:.4f}")
    return 0


def cmd_order_study(run, opts):
    if run.cfg.n_orders < 2:
        raise ConfigError("n_orders must be >= 2 for an order study", key="n_orders")
    model = run.load_model(opts["model"])
    method = opts["method"] or run.cfg.method
    rows = order_study(model, run.cfg, method=method, jobs=opts["jobs"])
    write_table(run.path("order_study.csv"), ORDER_SCHEMA, rows)
    accs = [r["final_accuracy"] for r in rows]
    _write_json(run.path("order_summary.json"),
                {"method": method, "mean_final_accuracy": sum(accs) / len(accs), "std_final_accuracy": grid_std(accs)})
    print(f"{method}: final accuracy std across {len(rows)} orders {grid_std(accs):.4f}")
    return 0


def cmd_retrieval_sweep(run, opts):
    model = run.load_model(opts["model"])
    rows = retrieval_sweep(model, run.cfg, jobs=opts["jobs"])
    write_table(run.path("retrieval_sweep.csv"), RETRIEVAL_SCHEMA, rows)
    for row in rows:
        print(f"D={row['retrieval_size']:<3d} final={row['mean_final_accuracy']:.4f}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "adapt": cmd_adapt,
    "compare": cmd_compare,
    "sweep-lr": cmd_sweep_lr,
    "order-study": cmd_order_study,
    "retrieval-sweep": cmd_retrieval_sweep,
}


def resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["model_seed" if args.command == "train" else "seed"] = args.seed
    if getattr(args, "method", None):
        if args.method not in METHODS:
            raise ConfigError(f"unknown method {args.method!r}; valid methods: {', '.join(METHODS)}",
                              key="method")
        changes["method"] = args.method
    if getattr(args, "n_orders", None) is not None:
        changes["n_orders"] = args.n_orders
    if getattr(args, "d_values", None):
        changes["d_values"] = tuple(int(v) for v in args.d_values.split(","))
    return cfg.replace(**changes) if changes else cfg


def execute(command, cfg, out_dir, options):
    run = Run(command, cfg, out_dir, options)
    code = COMMANDS[command](run, options)
    run.finish()
    return code


def cmd_replay(args):
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    cfg = from_mapping(manifest["config"], required=())
    options = manifest["options"]
    model_info = manifest.get("inputs", {}).get("model")
    if model_info and model_info.get("path"):
        if sha256_file(model_info["path"]) != model_info["sha256"]:
            raise ConfigError(f"model file {model_info['path']} changed since the manifest was written",
                              key="model")
    return execute(manifest["command"], cfg, args.out, options)


def build_parser():
    parser = argparse.ArgumentParser(prog="dltta", description=__doc__.split("\n\n")[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
        if model:
            p.add_argument("--model", help="source model file (trained from the config if omitted)")

    init = sub.add_parser("init-config", help="write the default config file")
    init.add_argument("--out", required=True)

    common(sub.add_parser("train", help="train the source model"), model=False)
    p = sub.add_parser("adapt", help="adapt over one test stream")
    common(p)
    p.add_argument("--method")
    common(sub.add_parser("compare", help="run every method on the same stream"))
    p = sub.add_parser("sweep-lr", help="initial learning rate sweep")
    common(p)
    p.add_argument("--methods", help="comma separated methods (default from config)")
    p = sub.add_parser("order-study", help="shuffled stream orders")
    common(p)
    p.add_argument("--method")
    p.add_argument("--n-orders", type=int, dest="n_orders")
    p = sub.add_parser("retrieval-sweep", help="retrieval size sweep")
    common(p)
    p.add_argument("--d-values", dest="d_values", help="comma separated retrieval sizes")

    p = sub.add_parser("emit-plots", help="write plotting scripts for result CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "init-config":
            with open(args.out, "w") as fh:
                fh.write("# dltta run configuration; required keys: " + ", ".join(REQUIRED_KEYS) + "\n")
                fh.write(RunConfig().dumps())
            return 0
        if args.command == "emit-plots":
            for path in emit_plots(args.csv, args.out):
                print(path)
            return 0
        if args.command == "replay":
            return cmd_replay(args)
        cfg = resolve_config(args)
        options = {"model": getattr(args, "model", None), "method": getattr(args, "method", None),
                   "methods": getattr(args, "methods", None), "jobs": args.jobs}
        return execute(args.command, cfg, args.out, options)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DlttaError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
