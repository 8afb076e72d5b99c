"""Dense float64 array helpers.

Arrays are plain ``numpy.ndarray`` objects of dtype float64 and rank <= 2.
Every function here is pure: inputs are never modified.
"""

import numpy as np

from .errors import DimensionError, DomainError

KL_EPS = 1e-7
DIST_TOL = 1e-6


def as_array(x, ndim=None, name="array"):
    """Coerce ``x`` to a finite float64 array of rank <= 2."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 2:
        raise DimensionError(f"{name}: rank {arr.ndim} > 2 is not supported")
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name}: expected rank {ndim}, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: contains NaN or Inf")
    return arr


def matmul(a, b):
    a = as_array(a, 2, "a")
    b = as_array(b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ ({a.shape} x {b.shape})")
    return a @ b


def softmax(logits):
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise DimensionError("softmax: empty row")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise DimensionError("log_softmax: empty row")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def check_distribution(p, name="p", tol=DIST_TOL):
    """Validate that every row of ``p`` is a probability vector."""
    p = as_array(p, name=name)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise DimensionError(f"{name}: empty distribution")
    if np.any(p < -tol):
        raise DomainError(f"{name}: negative probability")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise DomainError(f"{name}: entries do not sum to 1")
    return p


def _clamp_renorm(p):
    p = np.clip(p, KL_EPS, 1.0)
    return p / p.sum(axis=-1, keepdims=True)


def kl_div(p, q):
    """KL(p || q) in nats.

    Both arguments are clamped to ``[1e-7, 1]`` and renormalised first, so
    zero entries never produce infinities. Accepts single vectors or
    matching stacks of row vectors (returns one value per row).
    """
    p = check_distribution(p, "p")
    q = check_distribution(q, "q")
    if p.shape != q.shape:
        raise DimensionError(f"kl_div: shapes differ ({p.shape} vs {q.shape})")
    p = _clamp_renorm(p)
    q = _clamp_renorm(q)
    out = np.sum(p * np.log(p / q), axis=-1)
    if out.ndim == 0:
        return float(out)
    return out


def l2_distance(a, b):
    a = as_array(a, 1, "a")
    b = as_array(b, 1, "b")
    if a.shape != b.shape:
        raise DimensionError(f"l2_distance: lengths differ ({a.size} vs {b.size})")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def pairwise_l2(queries, keys):
    """Euclidean distance from every query row to every key row."""
    diff = queries[:, None, :] - keys[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def pairwise_cosine(queries, keys):
    """Cosine distance (1 - cosine similarity); zero vectors count as orthogonal."""
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    kn = np.linalg.norm(keys, axis=1, keepdims=True)
    qn = np.where(qn == 0.0, 1.0, qn)
    kn = np.where(kn == 0.0, 1.0, kn)
    return 1.0 - (queries / qn) @ (keys / kn).T
