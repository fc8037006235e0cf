"""Frame-wise 1-D convolutional embedder with temporal statistics pooling.

The network maps a ``T x F`` sequence to a ``d``-dimensional embedding::

    h_0 = x
    h_l = relu(conv_l(h_{l-1}))          same-length zero padding, stride 1
    stats = [mean_t(h_L), std_t(h_L)]    population std, eps inside the sqrt
    e = W_proj @ stats + b_proj

Gradients are derived by hand; :func:`backward` consumes the activations that
:func:`embed` retains when ``keep_trace`` is set.
"""
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import FormatError, UsageError
from .numerics import DTYPE

CHECKPOINT_MAGIC = "FDGW"


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 8
    layers: tuple = ((16, 3), (16, 3))  # (out_channels, kernel_width) per conv layer
    embed_dim: int = 32
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple((int(c), int(k)) for c, k in self.layers))
        if self.input_channels < 1:
            raise UsageError("input_channels must be >= 1")
        if not self.layers:
            raise UsageError("at least one conv layer is required")
        for out_channels, width in self.layers:
            if out_channels < 1 or width < 1 or width % 2 == 0:
                raise UsageError(f"bad conv layer ({out_channels}, {width}); width must be odd")
        if self.embed_dim < 2:
            raise UsageError("embed_dim must be >= 2")

    @property
    def channels(self):
        return [c for c, _ in self.layers]

    @property
    def pooled_dim(self):
        return 2 * self.layers[-1][0]

    def shapes(self):
        """Ordered parameter names and shapes."""
        out = OrderedDict()
        cin = self.input_channels
        for i, (cout, width) in enumerate(self.layers):
            out[f"conv{i}.weight"] = (cout, cin, width)
            out[f"conv{i}.bias"] = (cout,)
            cin = cout
        out["proj.weight"] = (self.embed_dim, self.pooled_dim)
        out["proj.bias"] = (self.embed_dim,)
        return out

    def to_dict(self):
        return {
            "input_channels": self.input_channels,
            "layers": [list(layer) for layer in self.layers],
            "embed_dim": self.embed_dim,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_channels=int(d["input_channels"]),
            layers=tuple(tuple(layer) for layer in d["layers"]),
            embed_dim=int(d["embed_dim"]),
            eps=float(d["eps"]),
        )


@dataclass
class EncoderParams:
    """Named parameter tensors in the order given by ``config.shapes()``."""

    config: EncoderConfig
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def names(self):
        return list(self.tensors)

    def copy(self):
        return EncoderParams(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def zeros_like(self):
        return EncoderParams(self.config, OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items()))

    @property
    def size(self):
        return sum(v.size for v in self.tensors.values())

    def to_vector(self):
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def from_vector(self, vec):
        """New params with the same layout, filled from a flat vector."""
        vec = np.asarray(vec, dtype=DTYPE)
        if vec.size != self.size:
            raise UsageError(f"vector has {vec.size} entries, params need {self.size}")
        out, pos = OrderedDict(), 0
        for name, value in self.tensors.items():
            out[name] = vec[pos:pos + value.size].reshape(value.shape).copy()
            pos += value.size
        return EncoderParams(self.config, out)

    def equal(self, other):
        """Bit-level equality of every tensor."""
        return self.names() == other.names() and all(
            np.array_equal(a, b) for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def init_params(config, rng):
    """Glorot-uniform weights, zero biases."""
    tensors = OrderedDict()
    for name, shape in config.shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=DTYPE)
            continue
        if len(shape) == 3:
            cout, cin, width = shape
            fan_in, fan_out = cin * width, cout * width
        else:
            fan_out, fan_in = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return EncoderParams(config, tensors)


def init_bound(config, name):
    shape = config.shapes()[name]
    if len(shape) == 3:
        fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
    else:
        fan_out, fan_in = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


# ---------------------------------------------------------------------------
# forward / backward on equal-length batches


@dataclass
class _LayerCache:
    cols: np.ndarray  # (B, T, k*Cin) unfolded padded input
    mask: np.ndarray  # (B, T, Cout) relu gate
    out: np.ndarray  # (B, T, Cout) post-activation


@dataclass
class BatchTrace:
    layers: list
    mean: np.ndarray
    std: np.ndarray
    stats: np.ndarray
    embedding: np.ndarray


def _unfold(x, width):
    batch, length, channels = x.shape
    pad = width // 2
    padded = np.zeros((batch, length + 2 * pad, channels), dtype=DTYPE)
    padded[:, pad:pad + length] = x
    cols = np.empty((batch, length, width, channels), dtype=DTYPE)
    for offset in range(width):
        cols[:, :, offset, :] = padded[:, offset:offset + length, :]
    return cols.reshape(batch, length, width * channels)


def _fold(dcols, width, channels):
    batch, length, _ = dcols.shape
    pad = width // 2
    dcols = dcols.reshape(batch, length, width, channels)
    dpadded = np.zeros((batch, length + 2 * pad, channels), dtype=DTYPE)
    for offset in range(width):
        dpadded[:, offset:offset + length, :] += dcols[:, :, offset, :]
    return dpadded[:, pad:pad + length]


def _weight_matrix(weight):
    # (Cout, Cin, k) -> (k*Cin, Cout), matching the (offset, channel) order of _unfold
    cout, cin, width = weight.shape
    return weight.transpose(2, 1, 0).reshape(width * cin, cout)


def forward_batch(params, x):
    """Forward an equal-length batch ``x`` of shape (B, T, F); returns BatchTrace."""
    config = params.config
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or x.shape[2] != config.input_channels or x.shape[1] < 1:
        raise UsageError(f"expected (B, T>=1, {config.input_channels}) input, got {x.shape}")
    h = x
    caches = []
    for i, (_, width) in enumerate(config.layers):
        cols = _unfold(h, width)
        z = cols @ _weight_matrix(params[f"conv{i}.weight"]) + params[f"conv{i}.bias"]
        mask = z > 0
        h = np.where(mask, z, 0.0)
        caches.append(_LayerCache(cols, mask, h))
    mean = h.mean(axis=1)
    var = ((h - mean[:, None, :]) ** 2).mean(axis=1)
    std = np.sqrt(var + config.eps)
    stats = np.concatenate([mean, std], axis=1)
    emb = stats @ params["proj.weight"].T + params["proj.bias"]
    return BatchTrace(caches, mean, std, stats, emb)


def backward_batch(params, trace, grad_emb):
    """Parameter gradients for one batch given dL/d(embedding), shape (B, d)."""
    config = params.config
    grads = params.zeros_like()
    grad_emb = np.asarray(grad_emb, dtype=DTYPE)
    grads["proj.weight"] = grad_emb.T @ trace.stats
    grads["proj.bias"] = grad_emb.sum(axis=0)
    grad_stats = grad_emb @ params["proj.weight"]
    n_ch = trace.mean.shape[1]
    g_mean, g_std = grad_stats[:, :n_ch], grad_stats[:, n_ch:]
    h = trace.layers[-1].out
    length = h.shape[1]
    centered = h - trace.mean[:, None, :]
    dh = g_mean[:, None, :] / length + centered * (g_std / (length * trace.std))[:, None, :]
    for i in range(len(config.layers) - 1, -1, -1):
        cache = trace.layers[i]
        width = config.layers[i][1]
        weight = params[f"conv{i}.weight"]
        cout, cin, _ = weight.shape
        dz = dh * cache.mask
        flat_dz = dz.reshape(-1, cout)
        dwm = cache.cols.reshape(-1, width * cin).T @ flat_dz
        grads[f"conv{i}.weight"] = dwm.reshape(width, cin, cout).transpose(2, 1, 0)
        grads[f"conv{i}.bias"] = flat_dz.sum(axis=0)
        if i > 0:
            dh = _fold(dz @ _weight_matrix(weight).T, width, cin)
    return grads


# ---------------------------------------------------------------------------
# public API over lists of (possibly variable-length) sequences


@dataclass
class ForwardTrace:
    """Activations retained for a set of inputs, grouped by sequence length."""

    groups: list  # [(indices ndarray, BatchTrace)]
    count: int

    def layer_outputs(self, index):
        """Per-layer post-activation maps (T x C_l each) for input ``index``."""
        for idx, trace in self.groups:
            pos = np.flatnonzero(idx == index)
            if pos.size:
                return [cache.out[pos[0]] for cache in trace.layers]
        raise UsageError(f"no trace retained for input {index}")


def _group_by_length(seqs):
    groups = OrderedDict()
    for i, s in enumerate(seqs):
        groups.setdefault(s.shape[0], []).append(i)
    return groups


def embed(params, seqs, keep_trace=False):
    """Embed a list of T_i x F sequences (or a B x T x F array).

    Returns ``(embeddings (n, d), ForwardTrace | None)``. Equal-length inputs
    are processed as one batch; mixed lengths are grouped by length.
    """
    if isinstance(seqs, np.ndarray) and seqs.ndim == 3:
        trace = forward_batch(params, seqs)
        idx = np.arange(seqs.shape[0])
        return trace.embedding, (ForwardTrace([(idx, trace)], len(idx)) if keep_trace else None)
    seqs = [np.asarray(s, dtype=DTYPE) for s in seqs]
    if not seqs:
        raise UsageError("nothing to embed")
    for s in seqs:
        if s.ndim != 2:
            raise UsageError(f"each sequence must be T x F, got shape {s.shape}")
    out = np.empty((len(seqs), params.config.embed_dim), dtype=DTYPE)
    groups = []
    for _, members in _group_by_length(seqs).items():
        idx = np.asarray(members)
        trace = forward_batch(params, np.stack([seqs[i] for i in members]))
        out[idx] = trace.embedding
        groups.append((idx, trace))
    return out, (ForwardTrace(groups, len(seqs)) if keep_trace else None)


def forward(params, x, keep_trace=False):
    """Embed one T x F sequence. Returns ``(embedding, ForwardTrace | None)``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise UsageError(f"expected a T x F sequence, got shape {x.shape}")
    emb, trace = embed(params, x[None], keep_trace)
    return emb[0], trace


def backward(params, trace, grad_emb):
    """Accumulate parameter gradients over every input covered by ``trace``."""
    if trace is None:
        raise UsageError("backward needs a retained forward trace")
    grad_emb = np.asarray(grad_emb, dtype=DTYPE)
    if grad_emb.shape != (trace.count, params.config.embed_dim):
        raise UsageError(f"upstream gradient shape {grad_emb.shape} does not match trace")
    total = None
    for idx, batch in trace.groups:
        g = backward_batch(params, batch, grad_emb[idx])
        if total is None:
            total = g
        else:
            for name in total.names():
                total[name] += g[name]
    return total


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, path, extra=None):
    descriptor = {
        "kind": "encoder",
        "config": params.config.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    if extra:
        descriptor["extra"] = extra
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.tensors.values())
    write_container(path, CHECKPOINT_MAGIC, descriptor, payload)


def load_checkpoint(path, config=None):
    """Load params; when ``config`` is given it must match the stored one."""
    descriptor, payload = read_container(path, CHECKPOINT_MAGIC)
    try:
        stored = EncoderConfig.from_dict(descriptor["config"])
        entries = [(e["name"], tuple(e["shape"])) for e in descriptor["tensors"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint descriptor ({exc})") from None
    if config is not None and stored != config:
        raise FormatError(f"{path}: checkpoint config {stored} does not match expected {config}")
    if entries != list(stored.shapes().items()):
        raise FormatError(f"{path}: tensor layout does not match the stored config")
    expected = 8 * sum(int(np.prod(shape)) for _, shape in entries)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, descriptor needs {expected}")
    tensors, pos = OrderedDict(), 0
    for name, shape in entries:
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).astype(DTYPE).reshape(shape)
        pos += 8 * n
    return EncoderParams(stored, tensors)
