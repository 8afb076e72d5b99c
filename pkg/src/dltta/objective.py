"""Test-time objectives: a loss on predictions plus its gradient on the logits."""

import numpy as np

from .errors import ConfigError
from .numeric import KL_EPS, as_array, check_distribution, log_softmax


def entropy_loss(probs):
    """Mean Shannon entropy (nats) of the rows of ``probs``."""
    p = check_distribution(np.atleast_2d(probs), "probs")
    return float(np.mean(-np.sum(p * np.log(np.clip(p, KL_EPS, 1.0)), axis=1)))


def entropy_loss_grad(logits):
    """Gradient of ``entropy_loss(softmax(logits))`` with respect to the logits.

    For one row, dH/dz_k = -p_k (log p_k + H); the batch mean divides by B.
    """
    z = as_array(np.atleast_2d(logits), 2, "logits")
    logp = log_softmax(z)
    p = np.exp(logp)
    h = -np.sum(p * logp, axis=1, keepdims=True)
    return -p * (logp + h) / z.shape[0]


class EntropyObjective:
    """Entropy minimisation of model predictions (Tent)."""

    tag = "entropy"

    def loss(self, probs):
        return entropy_loss(probs)

    def grad(self, logits):
        return entropy_loss_grad(logits)


OBJECTIVES = {"entropy": EntropyObjective}


def get_objective(tag):
    try:
        return OBJECTIVES[tag]()
    except KeyError:
        raise ConfigError(f"unknown objective {tag!r}; valid: {sorted(OBJECTIVES)}", key="objective") from None
