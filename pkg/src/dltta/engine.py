"""Test-time adaptation loop with a discrepancy-driven learning rate.

Each step runs a forward pass with the current parameters, estimates how
far the batch's predictions are from what the memory bank remembers for
similar features, scales the base rate ``alpha`` by that discrepancy, takes
a gradient step on the test-time objective, and then predicts (and fills
the bank) with the updated parameters. The ``fixed``, ``ptbn`` and ``none``
baselines share the same loop and differ only in the rate they apply.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, DimensionError
from .memory import MemoryBank, batch_discrepancy, sample_discrepancy
from .metrics import compute_metrics
from .model import NormPolicy, backward, commit_running_stats, forward, sgd_step
from .objective import get_objective

log = logging.getLogger(__name__)

METHODS = ("none", "ptbn", "fixed", "dltta")
WARMUP = -1.0


@dataclass(frozen=True)
class AdaptConfig:
    method: str = "dltta"
    alpha: float = 0.05
    batch_size: int = 16
    retrieval_size: int = 12
    capacity_steps: int = 4
    steps_per_batch: int = 1
    objective: str = "entropy"
    norm_policy: NormPolicy = NormPolicy("test_batch")
    similarity: str = "l2"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise DomainError("alpha must be finite and > 0")
        for name in ("batch_size", "retrieval_size", "capacity_steps", "steps_per_batch"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        get_objective(self.objective)

    @property
    def capacity(self):
        return self.capacity_steps * self.batch_size


@dataclass
class StepTelemetry:
    step_index: int
    discrepancy: float
    applied_lr: float
    tta_loss_before: float
    predicted: np.ndarray = field(repr=False)
    probs: np.ndarray = field(repr=False)
    bank_size: int
    severity_label: str = ""
    error: Optional[str] = None


def dynamic_lr(discrepancy, alpha):
    """Learning rate ``alpha * discrepancy``."""
    if not (np.isfinite(discrepancy) and np.isfinite(alpha)):
        raise DomainError("dynamic_lr inputs must be finite")
    if discrepancy < 0:
        raise DomainError(f"discrepancy must be >= 0, got {discrepancy}")
    return alpha * discrepancy


def estimate_discrepancy(bank, fwd, retrieval_size):
    """Batch-mean symmetric KL between each sample's prediction and its bank reference."""
    refs = bank.reference_predictions(fwd.features, retrieval_size)
    return batch_discrepancy(sample_discrepancy(refs, fwd.probs))


def _policy_for(cfg):
    return NormPolicy("train_running") if cfg.method == "none" else cfg.norm_policy


def adapt_step(model, bank, batch, cfg, step_index=0):
    """Advance one test step in place; returns ``(model, bank, telemetry)``."""
    if hasattr(batch, "features"):
        x, tag = batch.features, batch.severity_label
    else:
        x, tag = batch, ""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise DimensionError(f"batch shape {x.shape} does not match model input {model.n_inputs}")
    objective = get_objective(cfg.objective)
    policy = _policy_for(cfg)
    fwd = forward(model, x, policy)
    loss_before = objective.loss(fwd.probs)
    bank_size = len(bank)

    discrepancy = WARMUP
    if cfg.method != "none" and bank_size >= cfg.retrieval_size:
        discrepancy = estimate_discrepancy(bank, fwd, cfg.retrieval_size)
    if cfg.method == "dltta":
        eta = cfg.alpha if discrepancy == WARMUP else dynamic_lr(discrepancy, cfg.alpha)
    elif cfg.method == "fixed":
        eta = cfg.alpha
    else:
        eta = 0.0

    def record(out, err=None):
        return StepTelemetry(step_index, discrepancy, eta, loss_before, out.probs.argmax(axis=1),
                             out.probs, bank_size, tag, err)

    if eta > 0.0:
        snapshot = {n: p.copy() for n, p in model.parameters().items() if model.adapt_mask[n]}
        err = None
        step_fwd = fwd
        for k in range(cfg.steps_per_batch):
            if k:
                step_fwd = forward(model, x, policy)
            grads = backward(model, step_fwd, objective.grad(step_fwd.logits))
            if not np.isfinite(loss_before) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                err = f"non-finite gradient at step {step_index}"
                break
            sgd_step(model, grads, eta)
        if err is not None:
            for n, p in snapshot.items():
                model.set_parameter(n, p)
            log.warning("aborted adaptation step: %s", err)
            return model, bank, record(fwd, err)
        out = forward(model, x, policy)
    else:
        out = fwd

    if out.policy.mode == "test_ema":
        commit_running_stats(model, out, out.policy.ema_momentum)
    if cfg.method != "none":
        bank.push_many(out.features, out.probs)
    return model, bank, record(out)


@dataclass
class RunResult:
    telemetry: list
    metrics: object
    model: object
    bank: MemoryBank

    @property
    def flagged(self):
        return any(rec.error is not None for rec in self.telemetry)


def run_stream(model, stream, cfg, horizon=None, sink=None):
    """Adapt a copy of ``model`` over ``horizon`` batches of ``stream``.

    State carries forward between batches. ``sink(telemetry)`` is called after
    every step. Metrics are scored with the stream's hidden labels once the
    run is over.
    """
    horizon = len(stream) - stream.position if horizon is None else horizon
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    start = stream.position
    model = model.copy()
    bank = MemoryBank(cfg.capacity, cfg.similarity)
    telemetry = []
    for t in range(horizon):
        model, bank, rec = adapt_step(model, bank, stream.next_batch(), cfg, step_index=t)
        telemetry.append(rec)
        if sink is not None:
            sink(rec)
    labels = stream.release_labels()[start:start + horizon]
    return RunResult(telemetry, compute_metrics(telemetry, labels), model, bank)
