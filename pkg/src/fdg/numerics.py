"""Deterministic numerical primitives and the finite-difference gradient oracle.

All training math runs in float64. Random streams come from :class:`Rng`,
a thin wrapper over numpy's PCG64 bit generator whose seeding is fully
determined by ``(seed, split path)``:

* the root stream of ``Rng(seed)`` is ``PCG64(SeedSequence(entropy=seed))``;
* ``rng.split(tag)`` returns a new stream seeded with
  ``SeedSequence(entropy=seed, spawn_key=path + (crc32(tag),))`` where
  ``path`` is the spawn key of the parent and ``crc32`` is the zlib CRC-32
  of the UTF-8 encoded tag.

Splitting never consumes draws from the parent, so substreams are stable
regardless of how much the parent has been used.
"""
import zlib

import numpy as np

from .errors import NumericalError, UsageError

DTYPE = np.float64


class Rng:
    """Seeded random stream with deterministic named substreams."""

    def __init__(self, seed, _key=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise UsageError(f"seed must fit in 64 bits, got {seed}")
        self.seed = seed
        self.key = tuple(_key)
        seq = np.random.SeedSequence(entropy=seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def split(self, tag):
        """Return an independent stream identified by ``tag``."""
        return Rng(self.seed, self.key + (zlib.crc32(str(tag).encode("utf-8")),))

    # thin pass-throughs so callers never touch numpy's API directly
    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


def log_softmax(logits, axis=-1):
    """Numerically stable log-softmax (max-shifted)."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise UsageError("log_softmax needs a non-empty input")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sq_euclidean(a, b):
    """Squared Euclidean distance between two vectors."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise UsageError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.dot(diff.ravel(), diff.ravel()))


def pairwise_sq_euclidean(queries, centers):
    """Matrix of squared distances, shape (n_queries, n_centers)."""
    diff = queries[:, None, :] - centers[None, :, :]
    return np.einsum("qkd,qkd->qk", diff, diff)


def finite_diff_grad(f, theta, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``theta``.

    ``theta`` may have any shape; the result has the same shape.
    """
    theta = np.array(theta, dtype=DTYPE)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(theta)
        flat[i] = orig - h
        f_minus = f(theta)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(theta.shape)


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a| + |n|, floor), the usual gradient-check ratio.

    The floor keeps entries whose true gradient is zero (e.g. a projection
    bias under a shift-invariant loss) from turning central-difference
    round-off (~1e-11) into a large ratio.
    """
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
