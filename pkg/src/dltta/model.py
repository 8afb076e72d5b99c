"""Small Dense-BatchNorm-ReLU classifier with hand-written reverse mode.

The network is split into a feature extractor ``h`` (``feature_layers``) and
a prediction head ``g`` (``head_layers``). Parameters are addressed by
dotted names such as ``"h.1.gamma"`` or ``"g.0.weight"``; the boolean
``adapt_mask`` marks which of them a test-time update may touch.
"""

import copy
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, FormatError, StateError, VersionError
from .numeric import as_array, log_softmax, softmax

NORM_MODES = ("train_running", "test_batch", "test_ema")
BN_EPS = 1e-5
TRAIN_BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NormPolicy:
    """How batchnorm layers pick their normalisation statistics.

    ``train_running`` uses the stored running statistics unchanged,
    ``test_batch`` uses the statistics of the current batch and
    ``test_ema`` blends the running statistics with the batch statistics
    using ``ema_momentum``.
    """

    mode: str = "test_batch"
    ema_momentum: float = 0.1

    def __post_init__(self):
        if self.mode not in NORM_MODES:
            raise DomainError(f"unknown norm mode {self.mode!r}; expected one of {NORM_MODES}")
        if not 0.0 < self.ema_momentum < 1.0:
            raise DomainError("ema_momentum must lie in (0, 1)")

    def for_batch(self, batch_size):
        # batch statistics are degenerate for a single sample
        if self.mode == "test_batch" and batch_size == 1:
            return NormPolicy("test_ema", 0.1)
        return self


class Dense:
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, weight, bias):
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError("dense: weight must be out x in and bias length out")

    @classmethod
    def init(cls, n_in, n_out, rng):
        limit = np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out))

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def forward(self, x, policy):
        return x @ self.weight.T + self.bias, x, None

    def backward(self, cache, dy, want):
        x = cache
        grads = {}
        if "weight" in want:
            grads["weight"] = dy.T @ x
        if "bias" in want:
            grads["bias"] = dy.sum(axis=0)
        return dy @ self.weight, grads


class BatchNorm:
    kind = "batchnorm"
    param_names = ("gamma", "beta")

    def __init__(self, gamma, beta, running_mean=None, running_var=None,
                 momentum=TRAIN_BN_MOMENTUM, eps=BN_EPS):
        self.gamma = np.array(gamma, dtype=np.float64)
        self.beta = np.array(beta, dtype=np.float64)
        n = self.gamma.shape[0]
        self.running_mean = np.zeros(n) if running_mean is None else np.array(running_mean, dtype=np.float64)
        self.running_var = np.ones(n) if running_var is None else np.array(running_var, dtype=np.float64)
        self.momentum = float(momentum)
        self.eps = float(eps)
        if np.any(self.running_var <= 0):
            raise DomainError("batchnorm running variance must be positive")

    @classmethod
    def init(cls, n):
        return cls(np.ones(n), np.zeros(n))

    @property
    def n_in(self):
        return self.gamma.shape[0]

    n_out = n_in

    def forward(self, x, policy):
        n = x.shape[0]
        batch_mean = x.mean(axis=0)
        batch_var = x.var(axis=0)
        if policy.mode == "train_running":
            c = 0.0
            mean, var = self.running_mean, self.running_var
        elif policy.mode == "test_batch":
            if n < 2:
                raise DimensionError("test_batch normalisation needs at least two samples")
            c = 1.0
            mean, var = batch_mean, batch_var
        else:
            c = policy.ema_momentum
            mean = (1.0 - c) * self.running_mean + c * batch_mean
            var = (1.0 - c) * self.running_var + c * batch_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        cache = (x, xhat, mean, inv_std, c, batch_mean)
        return self.gamma * xhat + self.beta, cache, (batch_mean, batch_var)

    def backward(self, cache, dy, want):
        x, xhat, mean, inv_std, c, batch_mean = cache
        n = x.shape[0]
        grads = {}
        if "gamma" in want:
            grads["gamma"] = np.sum(dy * xhat, axis=0)
        if "beta" in want:
            grads["beta"] = dy.sum(axis=0)
        g = dy * self.gamma
        dx = g * inv_std
        if c:
            # normalisation statistics depend on the batch itself
            d_mean = -np.sum(g, axis=0) * inv_std
            d_var = -0.5 * np.sum(g * (x - mean), axis=0) * inv_std ** 3
            dx = dx + c * d_mean / n + c * d_var * 2.0 * (x - batch_mean) / n
        return dx, grads


class ReLU:
    kind = "relu"
    param_names = ()

    def forward(self, x, policy):
        return np.maximum(x, 0.0), x > 0.0, None

    def backward(self, cache, dy, want):
        return dy * cache, {}


LAYER_KINDS = {"dense": Dense, "batchnorm": BatchNorm, "relu": ReLU}


class Model:
    """Classifier ``f = g o h`` with an adaptable-parameter mask."""

    version_tag = 1

    def __init__(self, feature_layers, head_layers, adapt_mask=None):
        self.feature_layers = list(feature_layers)
        self.head_layers = list(head_layers)
        names = self.param_names()
        if adapt_mask is None:
            adapt_mask = bn_affine_mask(self)
        unknown = set(adapt_mask) - set(names)
        if unknown:
            raise DomainError(f"adapt_mask names unknown parameters: {sorted(unknown)}")
        self.adapt_mask = {name: bool(adapt_mask.get(name, False)) for name in names}
        self.revision = 0
        self._check_extents()

    def _check_extents(self):
        width = None
        for _, layer in self.layers():
            if isinstance(layer, ReLU):
                continue
            if width is not None and layer.n_in != width:
                raise DimensionError(f"layer expects {layer.n_in} inputs, previous layer gives {width}")
            width = layer.n_out

    def layers(self):
        """Yield ``(prefix, layer)`` pairs in forward order."""
        for i, layer in enumerate(self.feature_layers):
            yield f"h.{i}", layer
        for i, layer in enumerate(self.head_layers):
            yield f"g.{i}", layer

    def named_parameters(self):
        for prefix, layer in self.layers():
            for pname in layer.param_names:
                yield f"{prefix}.{pname}", getattr(layer, pname)

    def param_names(self):
        return [name for name, _ in self.named_parameters()]

    def parameters(self):
        return dict(self.named_parameters())

    def adaptable(self):
        return [name for name, on in self.adapt_mask.items() if on]

    def batchnorms(self):
        return [layer for _, layer in self.layers() if isinstance(layer, BatchNorm)]

    @property
    def n_inputs(self):
        return self.feature_layers[0].n_in

    @property
    def n_features(self):
        widths = [layer.n_out for layer in self.feature_layers if not isinstance(layer, ReLU)]
        return widths[-1]

    @property
    def n_classes(self):
        return [layer.n_out for layer in self.head_layers if not isinstance(layer, ReLU)][-1]

    def set_parameter(self, name, value):
        prefix, pname = name.rsplit(".", 1)
        layer = dict(self.layers())[prefix]
        current = getattr(layer, pname)
        value = np.array(value, dtype=np.float64)
        if value.shape != current.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {current.shape}")
        setattr(layer, pname, value)
        self.revision += 1

    def copy(self):
        return copy.deepcopy(self)


def bn_affine_mask(model):
    return {name: name.rsplit(".", 1)[1] in ("gamma", "beta") for name in model.param_names()}


def extractor_mask(model):
    return {name: name.startswith("h.") for name in model.param_names()}


ADAPT_SUBSETS = {"bn_affine": bn_affine_mask, "extractor": extractor_mask}


def build_model(n_inputs=8, hidden=(32, 32), n_classes=4, seed=0, adapt="bn_affine"):
    """Dense+BN+ReLU blocks for ``h`` followed by a single dense head ``g``."""
    if adapt not in ADAPT_SUBSETS:
        raise DomainError(f"unknown adapt subset {adapt!r}")
    rng = np.random.default_rng(seed)
    feature_layers = []
    width = n_inputs
    for h in hidden:
        feature_layers += [Dense.init(width, h, rng), BatchNorm.init(h), ReLU()]
        width = h
    head_layers = [Dense.init(width, n_classes, rng)]
    model = Model(feature_layers, head_layers, adapt_mask={})
    model.adapt_mask = ADAPT_SUBSETS[adapt](model)
    return model


@dataclass
class ForwardPass:
    """Activations and caches of one forward pass, consumed by ``backward``."""

    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    policy: NormPolicy
    revision: int
    model_id: int
    caches: list = field(repr=False, default_factory=list)
    batch_stats: list = field(repr=False, default_factory=list)


def forward(model, batch, policy=NormPolicy()):
    """Run ``g(h(x))``; the features returned are the output of ``h``.

    Running statistics are never modified here; see ``commit_running_stats``.
    """
    x = as_array(batch, 2, "batch")
    if x.shape[0] < 1:
        raise DimensionError("batch must hold at least one sample")
    if x.shape[1] != model.n_inputs:
        raise DimensionError(f"batch has {x.shape[1]} features, model expects {model.n_inputs}")
    policy = policy.for_batch(x.shape[0])
    caches, stats = [], []
    for layer in model.feature_layers:
        x, cache, st = layer.forward(x, policy)
        caches.append(cache)
        if st is not None:
            stats.append(st)
    features = x
    for layer in model.head_layers:
        x, cache, st = layer.forward(x, policy)
        caches.append(cache)
        if st is not None:
            stats.append(st)
    return ForwardPass(features, x, softmax(x), policy, model.revision, id(model), caches, stats)


def backward(model, fwd, dlogits, names=None):
    """Reverse-mode gradients of a scalar loss given its gradient on the logits.

    Only the parameters selected by ``model.adapt_mask`` (or ``names`` when
    given) appear in the result.
    """
    if fwd is None or fwd.model_id != id(model) or fwd.revision != model.revision:
        raise StateError("backward needs a forward pass of the current model parameters")
    dy = as_array(dlogits, 2, "dlogits")
    if dy.shape != fwd.logits.shape:
        raise DimensionError(f"dlogits shape {dy.shape} != logits shape {fwd.logits.shape}")
    selected = set(model.adaptable() if names is None else names)
    grads = {}
    layers = list(model.layers())
    for (prefix, layer), cache in zip(reversed(layers), reversed(fwd.caches)):
        want = {p for p in layer.param_names if f"{prefix}.{p}" in selected}
        dy, layer_grads = layer.backward(cache, dy, want)
        for pname, g in layer_grads.items():
            grads[f"{prefix}.{pname}"] = g
    return {name: grads[name] for name in model.param_names() if name in grads}


def sgd_step(model, grads, eta):
    """In-place ``theta <- theta - eta * grad`` on the masked parameters."""
    eta = float(eta)
    if not np.isfinite(eta) or eta <= 0.0:
        raise DomainError(f"learning rate must be finite and positive, got {eta}")
    selected = set(model.adaptable())
    extra = set(grads) - selected
    if extra:
        raise DomainError(f"gradients given for frozen parameters: {sorted(extra)}")
    params = model.parameters()
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        params[name] -= eta * g
    model.revision += 1
    return model


def commit_running_stats(model, fwd, momentum):
    """Blend batch statistics recorded in ``fwd`` into the running statistics."""
    for bn, (mean, var) in zip(model.batchnorms(), fwd.batch_stats):
        bn.running_mean = (1.0 - momentum) * bn.running_mean + momentum * mean
        bn.running_var = (1.0 - momentum) * bn.running_var + momentum * var
    model.revision += 1


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient on the logits."""
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


TRAIN_OPTIMIZERS = ("adam", "momentum")


def train_source(model, dataset, epochs, lr, seed, batch_size=64, optimizer="adam",
                 betas=(0.9, 0.999), adam_eps=1e-8, momentum=0.9, log=None):
    """Fit all parameters on mean cross-entropy with mini-batch Adam or
    heavy-ball momentum SGD.

    Batchnorm layers normalise with batch statistics and update their running
    statistics with momentum 0.1. Returns a trained copy; ``model`` itself is
    left untouched. ``log(epoch, loss, accuracy)`` is called after each epoch.
    """
    x = as_array(dataset.features, 2, "features")
    y = np.asarray(dataset.labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise DomainError("cannot train on an empty dataset")
    if np.any(y < 0) or np.any(y >= model.n_classes):
        raise DomainError("labels out of range")
    if lr <= 0:
        raise DomainError("lr must be positive")
    if optimizer not in TRAIN_OPTIMIZERS:
        raise DomainError(f"unknown optimizer {optimizer!r}; valid: {TRAIN_OPTIMIZERS}")
    model = model.copy()
    if epochs == 0:
        return model
    rng = np.random.default_rng(seed)
    names = model.param_names()
    m = {n: np.zeros_like(p) for n, p in model.named_parameters()}
    v = {n: np.zeros_like(p) for n, p in model.named_parameters()}
    b1, b2 = betas
    t = 0
    policy = NormPolicy("test_batch")
    for epoch in range(epochs):
        order = rng.permutation(x.shape[0])
        total, correct = 0.0, 0
        for start in range(0, x.shape[0], batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            fwd = forward(model, x[idx], policy)
            loss, dlogits = cross_entropy(fwd.logits, y[idx])
            grads = backward(model, fwd, dlogits, names=names)
            commit_running_stats(model, fwd, TRAIN_BN_MOMENTUM)
            t += 1
            params = model.parameters()
            for n, g in grads.items():
                if optimizer == "momentum":
                    m[n] = momentum * m[n] + g
                    params[n] -= lr * m[n]
                    continue
                m[n] = b1 * m[n] + (1 - b1) * g
                v[n] = b2 * v[n] + (1 - b2) * g * g
                mhat = m[n] / (1 - b1 ** t)
                vhat = v[n] / (1 - b2 ** t)
                params[n] -= lr * mhat / (np.sqrt(vhat) + adam_eps)
            total += loss * idx.size
            correct += int(np.sum(fwd.logits.argmax(axis=1) == y[idx]))
        if log is not None:
            log(epoch, total / x.shape[0], correct / x.shape[0])
    model.revision += 1
    return model


def predict(model, features, policy=NormPolicy("train_running")):
    return forward(model, features, policy).probs.argmax(axis=1)


# -- serialization ---------------------------------------------------------
#
# Little-endian layout:
#   magic "DLTTAMDL" | u32 version | u32 n_layers
#   manifest: n_layers x (u8 section, u8 kind, u32 n_in, u32 n_out)
#   parameter blobs: f8 arrays in named_parameters() order
#   u32 n_params | adapt_mask bitmap (LSB first, ceil(n/8) bytes)
#   running statistics: per batchnorm f8 mean[n], var[n], momentum, eps
#   u32 crc32 of all preceding bytes

MAGIC = b"DLTTAMDL"
_KIND_CODES = {"dense": 0, "batchnorm": 1, "relu": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def model_to_bytes(model):
    out = [MAGIC, struct.pack("<II", Model.version_tag, len(model.feature_layers) + len(model.head_layers))]
    for prefix, layer in model.layers():
        dims = (0, 0) if isinstance(layer, ReLU) else (layer.n_in, layer.n_out)
        out.append(struct.pack("<BBII", 0 if prefix.startswith("h") else 1, _KIND_CODES[layer.kind], *dims))
    for _, p in model.named_parameters():
        out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    bits = [model.adapt_mask[n] for n in model.param_names()]
    out.append(struct.pack("<I", len(bits)))
    out.append(np.packbits(np.array(bits, dtype=np.uint8), bitorder="little").tobytes())
    for bn in model.batchnorms():
        out.append(bn.running_mean.astype("<f8").tobytes())
        out.append(bn.running_var.astype("<f8").tobytes())
        out.append(struct.pack("<dd", bn.momentum, bn.eps))
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("model file is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def model_from_bytes(data):
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a model file (bad magic)")
    version, n_layers = r.unpack("<II")
    if version != Model.version_tag:
        raise VersionError(f"model file version {version} is not supported (expected {Model.version_tag})")
    if len(data) < 4 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise FormatError("model file checksum mismatch (corrupt or truncated)")
    manifest = [r.unpack("<BBII") for _ in range(n_layers)]
    layers = {0: [], 1: []}
    for section, kind, n_in, n_out in manifest:
        if section not in layers or kind not in _KIND_NAMES:
            raise FormatError("bad layer manifest entry")
        name = _KIND_NAMES[kind]
        if name == "dense":
            layer = Dense(r.floats(n_out * n_in).reshape(n_out, n_in), r.floats(n_out))
        elif name == "batchnorm":
            layer = BatchNorm(r.floats(n_in), r.floats(n_in))
        else:
            layer = ReLU()
        layers[section].append(layer)
    (n_params,) = r.unpack("<I")
    bits = np.unpackbits(np.frombuffer(r.take((n_params + 7) // 8), dtype=np.uint8),
                         bitorder="little")[:n_params]
    model = Model(layers[0], layers[1], adapt_mask={})
    names = model.param_names()
    if len(names) != n_params:
        raise FormatError("mask length does not match parameter count")
    model.adapt_mask = {n: bool(b) for n, b in zip(names, bits)}
    for bn in model.batchnorms():
        bn.running_mean = r.floats(bn.n_in)
        bn.running_var = r.floats(bn.n_in)
        bn.momentum, bn.eps = r.unpack("<dd")
    if r.pos != len(data) - 4:
        raise FormatError("trailing bytes in model file")
    return model


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
