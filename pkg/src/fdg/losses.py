"""Prototype losses and where their gradients flow.

``proto_loss`` embeds support and query with one network (used both for the
domain-specific loss and the aggregation loss). ``dg_loss`` computes
prototypes with a frozen domain-specific network and embeds queries with the
aggregation network; only the aggregation network receives gradients.

Logits are ``-d(query, prototype)`` with ``d`` the squared Euclidean distance
by default (``metric="euclidean"`` switches to the plain norm), or
``w * cos(query, prototype) + b`` for the angular variant. Losses are averaged
over queries.
"""
from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .errors import NumericalError, UsageError
from .numerics import DTYPE, log_softmax, pairwise_sq_euclidean

METRICS = ("sq_euclidean", "euclidean", "angular")
W_MIN = 1e-6


@dataclass
class AngularHead:
    """Trainable scale and offset of the angular logits."""

    w: float = 10.0
    b: float = -5.0

    def clamp(self):
        self.w = max(self.w, W_MIN)

    def copy(self):
        return AngularHead(self.w, self.b)


@dataclass
class Prototypes:
    centers: np.ndarray  # (C, d)
    tag: str = "agg"


@dataclass
class LossOutput:
    value: float
    grads: dict = field(default_factory=dict)  # tag -> EncoderParams; "head" -> {"w", "b"}
    probs: np.ndarray = None  # (n_query, C) class probabilities
    parts: dict = field(default_factory=dict)  # named sub-losses for logging


def prototypes_from_embeddings(emb, labels, n_classes):
    labels = np.asarray(labels)
    centers = np.zeros((n_classes, emb.shape[1]), dtype=DTYPE)
    counts = np.bincount(labels, minlength=n_classes)
    if labels.size and labels.max() >= n_classes:
        raise UsageError("support label out of range")
    if np.any(counts == 0):
        raise UsageError(f"empty class in support set (counts {counts.tolist()})")
    np.add.at(centers, labels, emb)
    return centers / counts[:, None], counts


def compute_prototypes(embedder, support_x, support_labels, n_classes=None, tag="agg"):
    """Per-class mean of support embeddings."""
    labels = np.asarray(support_labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    if n_classes == 0:
        raise UsageError("empty support set")
    emb, _ = encoder.embed(embedder, support_x)
    centers, _ = prototypes_from_embeddings(emb, labels, n_classes)
    return Prototypes(centers, tag)


def _logits(query, centers, metric, head):
    """Return logits and a closure mapping dL/dlogits to (dquery, dcenters, dhead)."""
    if metric == "sq_euclidean":
        diff = query[:, None, :] - centers[None, :, :]
        logits = -np.einsum("qkd,qkd->qk", diff, diff)

        def grad(g):
            weighted = g[:, :, None] * diff
            return -2.0 * weighted.sum(axis=1), 2.0 * weighted.sum(axis=0), None

        return logits, grad

    if metric == "euclidean":
        diff = query[:, None, :] - centers[None, :, :]
        dist = np.sqrt(pairwise_sq_euclidean(query, centers))
        inv = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > 0)

        def grad(g):
            weighted = (g * inv)[:, :, None] * diff
            return -weighted.sum(axis=1), weighted.sum(axis=0), None

        return -dist, grad

    if metric == "angular":
        if head is None:
            raise UsageError("angular metric needs an AngularHead")
        qn = np.linalg.norm(query, axis=1)
        cn = np.linalg.norm(centers, axis=1)
        if np.any(qn == 0) or np.any(cn == 0):
            raise NumericalError("zero-norm embedding or prototype under cosine logits")
        qu, cu = query / qn[:, None], centers / cn[:, None]
        cos = qu @ cu.T

        def grad(g):
            gc = head.w * g
            dquery = (gc @ cu - (gc * cos).sum(axis=1)[:, None] * qu) / qn[:, None]
            dcenters = (gc.T @ qu - (gc * cos).sum(axis=0)[:, None] * cu) / cn[:, None]
            return dquery, dcenters, {"w": float((g * cos).sum()), "b": float(g.sum())}

        return head.w * cos + head.b, grad

    raise UsageError(f"unknown metric {metric!r}; choose from {METRICS}")


def prototype_cross_entropy(support_emb, support_labels, query_emb, query_labels, n_classes,
                            metric="sq_euclidean", head=None):
    """Mean cross-entropy of queries against support prototypes.

    Returns ``(loss, dL/dsupport_emb, dL/dquery_emb, head_grads, probs)``.
    """
    support_labels = np.asarray(support_labels)
    query_labels = np.asarray(query_labels)
    centers, counts = prototypes_from_embeddings(support_emb, support_labels, n_classes)
    logits, grad_fn = _logits(query_emb, centers, metric, head)
    logp = log_softmax(logits, axis=1)
    n_query = len(query_labels)
    loss = -float(np.mean(logp[np.arange(n_query), query_labels]))
    probs = np.exp(logp)
    g_logits = probs.copy()
    g_logits[np.arange(n_query), query_labels] -= 1.0
    g_logits /= n_query
    g_query, g_centers, g_head = grad_fn(g_logits)
    g_support = (g_centers / counts[:, None])[support_labels]
    return loss, g_support, g_query, g_head, probs


def _features(dataset, refs):
    return [dataset.features[i] for i in refs]


def proto_loss(embedder, episode, dataset, metric="sq_euclidean", head=None, tag="agg"):
    """Prototypical loss with one network embedding both support and query."""
    refs = np.concatenate([episode.support, episode.query])
    emb, trace = encoder.embed(embedder, _features(dataset, refs), keep_trace=True)
    n_s = len(episode.support)
    loss, g_s, g_q, g_head, probs = prototype_cross_entropy(
        emb[:n_s], episode.support_labels, emb[n_s:], episode.query_labels, episode.ways, metric, head
    )
    grads = {tag: encoder.backward(embedder, trace, np.concatenate([g_s, g_q]))}
    if g_head is not None:
        grads["head"] = g_head
    return LossOutput(loss, grads, probs, {"proto": loss})


def angular_proto_loss(embedder, episode, dataset, head, tag="agg"):
    if head.w <= 0:
        raise UsageError("angular scale w must be positive")
    return proto_loss(embedder, episode, dataset, metric="angular", head=head, tag=tag)


def dg_loss(agg, specific, episode, dataset, metric="sq_euclidean", head=None):
    """Domain-mismatch loss: prototypes from ``specific`` (constants), queries from ``agg``."""
    if episode.kind != "mismatch" or episode.domain_j == episode.domain_u:
        raise UsageError(f"dg_loss needs a mismatch episode with j != u, got {episode.describe()}")
    support_emb, _ = encoder.embed(specific, _features(dataset, episode.support))
    query_emb, trace = encoder.embed(agg, _features(dataset, episode.query), keep_trace=True)
    loss, _, g_q, g_head, probs = prototype_cross_entropy(
        support_emb, episode.support_labels, query_emb, episode.query_labels, episode.ways, metric, head
    )
    grads = {"agg": encoder.backward(agg, trace, g_q), "specific": specific.zeros_like()}
    if g_head is not None:
        grads["head"] = g_head
    return LossOutput(loss, grads, probs, {"dg": loss})


def combined_loss(agg, specifics, agg_episode, mismatch_episode, dataset, lambda_dg,
                  metric="sq_euclidean", head=None):
    """``L_agg + lambda_dg * L_dg``; gradients only for the aggregation network."""
    if lambda_dg < 0:
        raise UsageError("lambda_dg must be >= 0")
    out_agg = proto_loss(agg, agg_episode, dataset, metric, head, tag="agg")
    if lambda_dg == 0 or mismatch_episode is None:
        out_agg.parts = {"agg": out_agg.value, "dg": float("nan")}
        return out_agg
    specific = specifics[mismatch_episode.domain_j]
    out_dg = dg_loss(agg, specific, mismatch_episode, dataset, metric, head)
    grads = out_agg.grads["agg"].copy()
    for name in grads.names():
        grads[name] += lambda_dg * out_dg.grads["agg"][name]
    merged = {"agg": grads}
    if head is not None:
        merged["head"] = {k: out_agg.grads["head"][k] + lambda_dg * out_dg.grads["head"][k] for k in ("w", "b")}
    value = out_agg.value + lambda_dg * out_dg.value
    return LossOutput(value, merged, out_agg.probs, {"agg": out_agg.value, "dg": out_dg.value})
