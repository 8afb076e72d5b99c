"""Experiment drivers: source training, method comparison and ablation sweeps.

Every driver takes a trained source model and a ``RunConfig`` and returns
plain rows (lists of dicts) so the CLI can write them straight to CSV.
Independent runs can be spread over worker processes with ``jobs > 1``.
"""

import hashlib
import statistics
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .engine import run_stream
from .model import build_model, predict, train_source
from .stream import make_source


def train_from_config(cfg, log=None):
    """Train the source model described by ``cfg``; returns ``(model, val_accuracy)``."""
    data = make_source(cfg.source_spec(cfg.train_samples))
    model = build_model(cfg.dim, cfg.hidden, cfg.n_classes, cfg.model_seed, cfg.adapt_subset)
    model = train_source(model, data, cfg.train_epochs, cfg.train_lr, cfg.model_seed,
                         batch_size=cfg.train_batch_size, optimizer=cfg.train_optimizer,
                         momentum=cfg.train_momentum, log=log)
    return model, validation_accuracy(model, cfg)


def validation_accuracy(model, cfg):
    # fresh draw, disjoint seed from the training set
    val = make_source(cfg.source_spec(cfg.val_samples, seed=cfg.data_seed + 7919))
    return float(np.mean(predict(model, val.features) == val.labels))


def run_one(model, cfg, seed=None, order_seed=None, sink=None, **overrides):
    """One adaptation run over the configured stream."""
    stream = cfg.make_stream(seed)
    if order_seed is not None:
        stream = stream.shuffled(order_seed)
    return run_stream(model, stream, cfg.adapt_config(**overrides), cfg.stream_length, sink=sink)


def _cell(args):
    model, cfg, seed, order_seed, overrides = args
    return run_one(model, cfg, seed, order_seed, **overrides).metrics


def run_cells(model, cfg, cells, jobs=1):
    """Metrics for each ``(seed, order_seed, overrides)`` cell, in input order."""
    tasks = [(model, cfg, seed, order_seed, overrides) for seed, order_seed, overrides in cells]
    if jobs <= 1:
        return [_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_cell, tasks))


def grid_std(values):
    """Sample standard deviation (n - 1 denominator); 0 for a single value."""
    return statistics.stdev(values) if len(values) > 1 else 0.0


def compare_methods(model, cfg, methods=("none", "ptbn", "fixed", "dltta"), seeds=None, jobs=1):
    seeds = cfg.seeds if seeds is None else seeds
    cells = [(s, None, {"method": m}) for m in methods for s in seeds]
    metrics = run_cells(model, cfg, cells, jobs)
    return [dict(method=c[2]["method"], seed=c[0], final_accuracy=m.final_accuracy,
                 streaming_accuracy=m.streaming_accuracy, loss_smoothness=m.loss_smoothness,
                 mean_lr=m.lr_trace_summary["mean"])
            for c, m in zip(cells, metrics)]


def sweep_lr(model, cfg, methods=None, multipliers=None, seeds=None, jobs=1):
    """Final accuracy for every (method, alpha, seed); alphas are multiples of the base rate.

    Returns ``(rows, summary)`` where ``summary`` holds, per method and alpha,
    the seed-mean final accuracy and, per method, the sample std of those
    means across the grid.
    """
    methods = cfg.sweep_methods if methods is None else methods
    multipliers = cfg.lr_multipliers if multipliers is None else multipliers
    seeds = cfg.seeds if seeds is None else seeds
    cells = [(s, None, {"method": m, "alpha": cfg.base_alpha * k})
             for m in methods for k in multipliers for s in seeds]
    metrics = run_cells(model, cfg, cells, jobs)
    rows = [dict(method=c[2]["method"], alpha=c[2]["alpha"], seed=c[0],
                 final_accuracy=m.final_accuracy, loss_smoothness=m.loss_smoothness)
            for c, m in zip(cells, metrics)]
    summary = []
    for method in methods:
        means = []
        for k in multipliers:
            alpha = cfg.base_alpha * k
            vals = [r["final_accuracy"] for r in rows if r["method"] == method and r["alpha"] == alpha]
            means.append(float(np.mean(vals)))
            summary.append(dict(method=method, alpha=alpha, mean_final_accuracy=means[-1]))
        std = grid_std(means)
        for row in summary:
            if row["method"] == method:
                row["std_across_grid"] = std
    return rows, summary


def order_study(model, cfg, method="dltta", order_seeds=None, seed=None, jobs=1):
    """Same stream replayed in shuffled batch orders."""
    order_seeds = range(cfg.n_orders) if order_seeds is None else order_seeds
    cells = [(seed, o, {"method": method}) for o in order_seeds]
    metrics = run_cells(model, cfg, cells, jobs)
    rows = []
    for (_, order, _), m in zip(cells, metrics):
        stream = cfg.make_stream(seed).shuffled(order)
        rows.append(dict(order_seed=order, method=method, final_accuracy=m.final_accuracy,
                         streaming_accuracy=m.streaming_accuracy,
                         batch_checksum=batch_checksum(stream)))
    return rows


def batch_checksum(stream):
    """Order-independent digest of the multiset of batches in a stream."""
    return hashlib.sha256("".join(sorted(stream.batch_hashes())).encode()).hexdigest()


def retrieval_sweep(model, cfg, d_values=None, seeds=None, jobs=1):
    d_values = cfg.d_values if d_values is None else d_values
    seeds = cfg.seeds if seeds is None else seeds
    cells = [(s, None, {"method": "dltta", "retrieval_size": d}) for d in d_values for s in seeds]
    metrics = run_cells(model, cfg, cells, jobs)
    rows = []
    for d in d_values:
        vals = [m.final_accuracy for c, m in zip(cells, metrics) if c[2]["retrieval_size"] == d]
        rows.append(dict(retrieval_size=d, mean_final_accuracy=float(np.mean(vals)),
                         std_final_accuracy=grid_std(vals), n_seeds=len(vals)))
    return rows


def steps_study(model, cfg, steps=(1, 4, 8), seeds=None, method="dltta", jobs=1):
    """Final accuracy and wall time per number of update steps per batch."""
    seeds = cfg.seeds if seeds is None else seeds
    rows = []
    for k in steps:
        t0 = time.perf_counter()
        metrics = run_cells(model, cfg, [(s, None, {"method": method, "steps_per_batch": k}) for s in seeds], jobs)
        rows.append(dict(steps_per_batch=k, mean_final_accuracy=float(np.mean([m.final_accuracy for m in metrics])),
                         seconds=time.perf_counter() - t0))
    return rows
