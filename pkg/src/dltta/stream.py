"""Synthetic source data and test streams with time-varying distribution shift.

Source data are C isotropic Gaussian clusters in F dimensions. A test stream
is a sequence of segments; each segment pushes fresh source draws through
an affine transform (a blend toward a random rotation plus a mean offset)
and adds Gaussian noise, all scaled by the segment's severity.
"""

import csv
import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DomainError, EndOfStream

SCHEDULE_PATTERNS = ("alternating", "ramp", "constant")


@dataclass(frozen=True)
class SourceSpec:
    cluster_means: np.ndarray = field(repr=False)
    cluster_std: float = 1.0
    n_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.cluster_means, dtype=np.float64)
        object.__setattr__(self, "cluster_means", means)
        if means.ndim != 2 or means.shape[0] < 2:
            raise ConfigError("cluster_means must be a C x F matrix with C >= 2", key="n_classes")
        if self.cluster_std <= 0:
            raise ConfigError("cluster_std must be positive", key="cluster_std")
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))[np.triu_indices(means.shape[0], 1)]
        if dist.min() < 6.0 * self.cluster_std:
            raise ConfigError(
                f"cluster means {dist.min():.3f} apart, need >= 6 x cluster_std "
                f"({6 * self.cluster_std:.3f})", key="cluster_std")

    @classmethod
    def default(cls, n_classes=4, dim=8, radius=5.0, cluster_std=1.0,
                n_samples=0, seed=0, means_seed=0):
        """Cluster means on ``radius`` x orthonormal directions (pairwise ``radius * sqrt 2``)."""
        if n_classes > dim:
            raise ConfigError("n_classes must not exceed dim", key="n_classes")
        rng = np.random.default_rng(means_seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return cls(radius * q[:, :n_classes].T, cluster_std, n_samples, seed)

    @property
    def n_classes(self):
        return self.cluster_means.shape[0]

    @property
    def dim(self):
        return self.cluster_means.shape[1]

    def draw(self, rng, n):
        labels = rng.integers(0, self.n_classes, size=n)
        x = self.cluster_means[labels] + self.cluster_std * rng.standard_normal((n, self.dim))
        return x, labels


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def make_source(spec):
    """``n_samples`` balanced draws from the source clusters."""
    rng = np.random.default_rng(spec.seed)
    n, c = spec.n_samples, spec.n_classes
    labels = np.tile(np.arange(c), n // c + 1)[:n]
    labels = rng.permutation(labels)
    x = spec.cluster_means[labels] + spec.cluster_std * rng.standard_normal((n, spec.dim))
    return LabeledSet(x.reshape(n, spec.dim), labels.astype(np.int64))


def _derive_seed(*parts):
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ShiftFamily:
    """Scales mapping a severity to transform strength."""

    rotation_mix: float = 1.0
    offset_scale: float = 4.0
    noise_scale: float = 1.0


@dataclass(frozen=True)
class ShiftSegment:
    length: int
    severity: float
    seed: int
    family: ShiftFamily = ShiftFamily()

    def __post_init__(self):
        if self.severity < 0:
            raise DomainError("severity must be >= 0")
        if self.length < 1:
            raise DomainError("segment length must be >= 1")

    @property
    def tag(self):
        return f"{self.severity:g}"

    def transform(self, dim):
        """``(matrix, offset, noise_std)``; severity 0 gives the exact identity."""
        rng = np.random.default_rng(self.seed)
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        rot = q * np.sign(np.diag(r))
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        t = self.severity * self.family.rotation_mix
        matrix = np.eye(dim) + t * (rot - np.eye(dim))
        offset = self.severity * self.family.offset_scale * direction
        return matrix, offset, self.severity * self.family.noise_scale

    def apply(self, x, rng):
        matrix, offset, noise = self.transform(x.shape[1])
        out = x @ matrix.T + offset
        if noise > 0:
            out = out + noise * rng.standard_normal(x.shape)
        return out


def make_schedule(pattern, n_segments, mild_severity, severe_severity, segment_length,
                  seed, family=ShiftFamily()):
    """Segment list: ``alternating`` interleaves mild/severe starting mild,
    ``ramp`` spaces severities linearly from mild to severe, ``constant``
    repeats the mild severity."""
    if pattern not in SCHEDULE_PATTERNS:
        raise ConfigError(f"unknown schedule pattern {pattern!r}; valid: {SCHEDULE_PATTERNS}",
                          key="schedule")
    if mild_severity < 0 or severe_severity < 0:
        raise DomainError("severities must be >= 0")
    if pattern == "alternating":
        sev = [mild_severity if i % 2 == 0 else severe_severity for i in range(n_segments)]
    elif pattern == "ramp":
        sev = list(np.linspace(mild_severity, severe_severity, n_segments)) if n_segments > 1 else [mild_severity]
    else:
        sev = [mild_severity] * n_segments
    return [ShiftSegment(segment_length, float(s), _derive_seed(seed, "segment", i), family)
            for i, s in enumerate(sev)]


class Batch(NamedTuple):
    """What the adaptation engine sees of one step: no labels."""

    features: np.ndarray
    severity_label: str


class ShiftStream:
    """Single-consumer iterator over test batches; labels stay internal."""

    def __init__(self, source, schedule, batch_size, seed):
        if batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        self.schedule = list(schedule)
        self.batch_size = int(batch_size)
        self.seed = seed
        feats, labels, tags = [], [], []
        for i, seg in enumerate(self.schedule):
            rng = np.random.default_rng(_derive_seed(seed, "draws", i))
            x, y = source.draw(rng, seg.length * batch_size)
            x = seg.apply(x, rng)
            feats.append(x.reshape(seg.length, batch_size, source.dim))
            labels.append(y.reshape(seg.length, batch_size))
            tags += [seg.tag] * seg.length
        self._features = np.concatenate(feats)
        self._labels = np.concatenate(labels)
        self._tags = tags
        self._cursor = 0

    @classmethod
    def _from_arrays(cls, features, labels, tags, schedule, batch_size, seed):
        obj = cls.__new__(cls)
        obj.schedule, obj.batch_size, obj.seed = schedule, batch_size, seed
        obj._features, obj._labels, obj._tags = features, labels, list(tags)
        obj._cursor = 0
        return obj

    def __len__(self):
        return self._features.shape[0]

    @property
    def position(self):
        return self._cursor

    def __iter__(self):
        while self._cursor < len(self):
            yield self.next_batch()

    def next_batch(self):
        if self._cursor >= len(self):
            raise EndOfStream("stream exhausted")
        t = self._cursor
        self._cursor += 1
        return Batch(self._features[t].copy(), self._tags[t])

    def reset(self):
        self._cursor = 0

    def release_labels(self):
        """Hidden labels, one row per step, for scoring after a run."""
        return self._labels.copy()

    def shuffled(self, order_seed):
        """Same batches in a seeded random order."""
        perm = np.random.default_rng(_derive_seed(self.seed, "order", order_seed)).permutation(len(self))
        return ShiftStream._from_arrays(self._features[perm], self._labels[perm],
                                        [self._tags[i] for i in perm], self.schedule,
                                        self.batch_size, self.seed)

    def batch_hashes(self):
        return [hashlib.sha256(self._features[t].tobytes() + self._labels[t].tobytes()).hexdigest()
                for t in range(len(self))]


def make_stream(source, schedule, batch_size, seed):
    return ShiftStream(source, schedule, batch_size, seed)


def dump_stream_csv(stream, path):
    """One row per sample: step, severity, f0..f{F-1}, label."""
    dim = stream._features.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "severity"] + [f"f{i}" for i in range(dim)] + ["label"])
        for t in range(len(stream)):
            for x, y in zip(stream._features[t], stream._labels[t]):
                w.writerow([t, stream._tags[t]] + [repr(float(v)) for v in x] + [int(y)])
