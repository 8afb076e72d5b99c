"""FIFO memory bank of (feature key, prediction value) pairs.

The bank answers "what did the recently adapted model predict for inputs
whose features look like this one?": ``retrieve`` finds the nearest stored
keys, ``reference_prediction`` averages their stored predictions and
``sample_discrepancy`` compares that reference with a fresh prediction.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, StateError
from .numeric import as_array, check_distribution, kl_div, pairwise_cosine, pairwise_l2

SIMILARITIES = {"l2": pairwise_l2, "cosine": pairwise_cosine}


@dataclass(frozen=True)
class BankEntry:
    key: np.ndarray
    value: np.ndarray
    insert_index: int


@dataclass(frozen=True)
class SupportSet:
    members: tuple

    def __len__(self):
        return len(self.members)

    @property
    def empty(self):
        return not self.members


class MemoryBank:
    """Fixed-capacity FIFO; pushing into a full bank evicts the oldest entry.

    Keys, values and insertion indices are held as stacked arrays ordered
    oldest first.
    """

    def __init__(self, capacity, similarity="l2"):
        if capacity < 1:
            raise DomainError("bank capacity must be at least 1")
        if similarity not in SIMILARITIES:
            raise DomainError(f"unknown similarity {similarity!r}; valid: {sorted(SIMILARITIES)}")
        self.capacity = int(capacity)
        self.similarity = similarity
        self.keys = None
        self.values = None
        self.index = np.empty(0, dtype=np.int64)
        self._next_index = 0

    def __len__(self):
        return self.index.size

    @property
    def entries(self):
        """Entries from oldest to newest."""
        return [BankEntry(self.keys[i].copy(), self.values[i].copy(), int(self.index[i]))
                for i in range(len(self))]

    def push(self, key, value):
        return self.push_many(as_array(key, 1, "key")[None, :], as_array(value, 1, "value")[None, :])

    def push_many(self, keys, values):
        """Append rows in order; only the newest ``capacity`` entries survive."""
        keys = as_array(keys, 2, "keys")
        values = check_distribution(as_array(values, 2, "values"), "values")
        if keys.shape[0] != values.shape[0]:
            raise DimensionError("keys and values differ in count")
        if self.keys is not None and (keys.shape[1] != self.keys.shape[1]
                                      or values.shape[1] != self.values.shape[1]):
            raise DimensionError(
                f"entry extents ({keys.shape[1]}, {values.shape[1]}) differ from bank "
                f"({self.keys.shape[1]}, {self.values.shape[1]})")
        n = keys.shape[0]
        new_index = np.arange(self._next_index, self._next_index + n, dtype=np.int64)
        self._next_index += n
        if self.keys is None:
            self.keys, self.values = keys[-self.capacity:].copy(), values[-self.capacity:].copy()
            self.index = new_index[-self.capacity:]
        else:
            self.keys = np.concatenate([self.keys, keys])[-self.capacity:]
            self.values = np.concatenate([self.values, values])[-self.capacity:]
            self.index = np.concatenate([self.index, new_index])[-self.capacity:]
        return self

    def nearest(self, queries, d):
        """Indices (into ``entries``) of the ``min(d, len)`` nearest keys per query.

        Ties in distance go to the more recently inserted entry.
        """
        if d < 1:
            raise DomainError("retrieval size must be at least 1")
        queries = as_array(np.atleast_2d(queries), 2, "queries")
        if not len(self):
            return np.empty((queries.shape[0], 0), dtype=np.int64)
        if queries.shape[1] != self.keys.shape[1]:
            raise DimensionError(f"query length {queries.shape[1]} != key length {self.keys.shape[1]}")
        dist = SIMILARITIES[self.similarity](queries, self.keys)
        order = np.lexsort((np.broadcast_to(-self.index, dist.shape), dist), axis=-1)
        return order[:, :min(d, len(self))]

    def retrieve(self, query_key, d):
        """Support set for one query; empty while the bank is still empty."""
        idx = self.nearest(as_array(query_key, 1, "query_key")[None, :], d)[0]
        return SupportSet(tuple(BankEntry(self.keys[i].copy(), self.values[i].copy(), int(self.index[i]))
                                for i in idx))

    def reference_predictions(self, queries, d):
        """Mean stored prediction over each query's support set, one row per query."""
        idx = self.nearest(queries, d)
        if idx.shape[1] == 0:
            raise StateError("memory bank is empty")
        return self.values[idx].mean(axis=1)

    def copy(self):
        other = MemoryBank(self.capacity, self.similarity)
        if self.keys is not None:
            other.keys, other.values = self.keys.copy(), self.values.copy()
        other.index = self.index.copy()
        other._next_index = self._next_index
        return other


def reference_prediction(support):
    if len(support) == 0:
        raise StateError("reference prediction needs a non-empty support set")
    return np.mean([m.value for m in support.members], axis=0)


def sample_discrepancy(reference, prediction):
    """Symmetric KL between reference and prediction (row-wise for stacks).

    The exact value is never negative; rounding residue below zero is clipped.
    """
    value = np.maximum(0.5 * (kl_div(reference, prediction) + kl_div(prediction, reference)), 0.0)
    return float(value) if np.ndim(value) == 0 else value


def batch_discrepancy(per_sample):
    values = np.asarray(per_sample, dtype=np.float64).ravel()
    if values.size == 0:
        raise DomainError("batch discrepancy of an empty batch")
    return float(np.mean(values))


_BANK_MAGIC = b"DLTTABNK"
_BANK_VERSION = 1


def dump_bank(bank, path):
    """Debug snapshot: magic, version, capacity, count, dims, then per entry
    u64 insert_index, key f8[H], value f8[C]; trailing crc32. Little-endian."""
    entries = bank.entries
    h = entries[0].key.size if entries else 0
    c = entries[0].value.size if entries else 0
    parts = [_BANK_MAGIC, struct.pack("<IIIII", _BANK_VERSION, bank.capacity, len(entries), h, c)]
    for e in entries:
        parts.append(struct.pack("<Q", e.insert_index))
        parts.append(e.key.astype("<f8").tobytes())
        parts.append(e.value.astype("<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))
