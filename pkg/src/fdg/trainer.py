"""Four-step training: pretrain the aggregation network, cluster, then train the
domain-specific networks and the aggregation network together.

Random streams are split by purpose (``pretrain``, ``main/agg``,
``main/mismatch``, ``main/specific/<j>``) so that changing one part of the
schedule never shifts the episodes drawn by another. In particular the
aggregation episodes of a run with ``lambda_dg = 0`` are exactly those of the
full run, which makes ProtoNet-only training a paired baseline.
"""
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import clustering, encoder, episodes, losses
from .errors import ConfigurationError, TrainingError
from .numerics import Rng

log = logging.getLogger(__name__)

MODES = ("full", "protonet-baseline", "original-labels")
LOSS_VARIANTS = ("euclidean-proto", "angular")
SCHEDULES = ("interleaved", "sequential")


@dataclass(frozen=True)
class TrainConfig:
    ways: int = 5
    shots: int = 5
    queries: int = 5
    lambda_dg: float = 0.8
    pretrain_iters: int = 2000
    main_iters: int = 5000
    specific_warm_start: bool = True
    lr: float = 0.003
    momentum: float = 0.9
    seed: int = 0
    n_domains: int = 3  # M, number of pseudo-domains
    loss: str = "euclidean-proto"
    distance: str = "sq_euclidean"  # or "euclidean" (plain norm)
    schedule: str = "interleaved"
    cluster_layers: tuple = None  # conv layers feeding style statistics; None = all
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-8
    conv_layers: tuple = ((16, 3), (16, 3))
    embed_dim: int = 32

    def validate(self):
        if self.lambda_dg < 0:
            raise ConfigurationError("lambda_dg must be >= 0")
        if self.pretrain_iters < 0 or self.main_iters < 0:
            raise ConfigurationError("iteration counts must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.lr < 0:
            raise ConfigurationError("lr must be >= 0")
        if self.n_domains < 1:
            raise ConfigurationError("n_domains must be >= 1")
        if self.loss not in LOSS_VARIANTS:
            raise ConfigurationError(f"loss must be one of {LOSS_VARIANTS}")
        if self.distance not in ("sq_euclidean", "euclidean"):
            raise ConfigurationError("distance must be 'sq_euclidean' or 'euclidean'")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")
        if min(self.ways, self.shots, self.queries) < 1:
            raise ConfigurationError("ways, shots and queries must be >= 1")
        return self

    @property
    def metric(self):
        return "angular" if self.loss == "angular" else self.distance

    def encoder_config(self, input_channels):
        return encoder.EncoderConfig(input_channels, tuple(tuple(l) for l in self.conv_layers), self.embed_dim)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("conv_layers") is not None:
            d["conv_layers"] = tuple(tuple(l) for l in d["conv_layers"])
        if d.get("cluster_layers") is not None:
            d["cluster_layers"] = tuple(d["cluster_layers"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["conv_layers"] = [list(l) for l in self.conv_layers]
        d["cluster_layers"] = None if self.cluster_layers is None else list(self.cluster_layers)
        return d


@dataclass
class Learner:
    """One network with its optimizer state and optional angular head."""

    params: encoder.EncoderParams
    velocity: encoder.EncoderParams
    head: losses.AngularHead = None
    head_velocity: dict = field(default_factory=lambda: {"w": 0.0, "b": 0.0})

    @classmethod
    def fresh(cls, params, angular):
        return cls(params, params.zeros_like(), losses.AngularHead() if angular else None)

    def clone(self):
        return Learner(self.params.copy(), self.params.zeros_like(),
                       None if self.head is None else self.head.copy())


@dataclass
class TrainState:
    agg: Learner
    specifics: list = field(default_factory=list)
    iteration: int = 0
    log: list = field(default_factory=list)  # dicts: phase, iteration, l_agg, l_dg, l_sp_<j>


def sgd_step(params, grads, buffers, lr, momentum, iteration=None):
    """Momentum SGD in place: v <- momentum * v + g; theta <- theta - lr * v."""
    for name in params.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", iteration)
        v = buffers[name]
        v *= momentum
        v += g
        params[name] -= lr * v
    return params


def _step(learner, output, tag, config, iteration):
    sgd_step(learner.params, output.grads[tag], learner.velocity, config.lr, config.momentum, iteration)
    if learner.head is not None:
        for key in ("w", "b"):
            g = output.grads["head"][key]
            if not np.isfinite(g):
                raise TrainingError(f"non-finite gradient for head.{key}", iteration)
            learner.head_velocity[key] = config.momentum * learner.head_velocity[key] + g
            setattr(learner.head, key, getattr(learner.head, key) - config.lr * learner.head_velocity[key])
        learner.head.clamp()


def _check_loss(value, what, iteration, state, dump_dir):
    if np.isfinite(value):
        return
    if dump_dir is not None:
        encoder.save_checkpoint(state.agg.params, os.path.join(dump_dir, "dump_agg.ckpt"))
        for j, learner in enumerate(state.specifics):
            encoder.save_checkpoint(learner.params, os.path.join(dump_dir, f"dump_specific_{j}.ckpt"))
    raise TrainingError(f"non-finite {what} loss", iteration)


def initial_learner(dataset, config, tag="agg"):
    input_channels = dataset.features[0].shape[1]
    params = encoder.init_params(config.encoder_config(input_channels), Rng(config.seed).split(f"init/{tag}"))
    return Learner.fresh(params, config.loss == "angular")


def pretrain_agg(dataset, config, learner=None, state=None, dump_dir=None):
    """Step 1: ``pretrain_iters`` aggregation episodes, one SGD step each."""
    config.validate()
    learner = learner or initial_learner(dataset, config)
    state = state or TrainState(learner)
    rng = Rng(config.seed).split("pretrain")
    for it in range(config.pretrain_iters):
        ep = episodes.sample_aggregation(dataset, config.ways, config.shots, config.queries, rng)
        out = losses.proto_loss(learner.params, ep, dataset, config.metric, learner.head, tag="agg")
        _check_loss(out.value, "aggregation", it, state, dump_dir)
        _step(learner, out, "agg", config, it)
        state.log.append({"phase": "pretrain", "iteration": it, "l_agg": out.value})
    return learner


def cluster_phase(agg_params, dataset, n_domains, rng, layers=None, max_iter=100, tol=1e-8,
                  skip=False):
    """Step 2: pseudo-domain labels from k-means on style statistics.

    With ``skip`` the true domain ids are kept and no model is fitted.
    Returns ``(cluster_model | None, label_histogram)``.
    """
    if skip:
        dataset.set_pseudo(dataset.domains.copy())
        return None, clustering.label_histogram(dataset.pseudo, dataset.n_pseudo)
    feats = clustering.style_features(agg_params, dataset, layers)
    model = clustering.kmeans(feats, n_domains, rng, max_iter=max_iter, tol=tol)
    model.layers = None if layers is None else list(layers)
    dataset.set_pseudo(model.predict(feats), n_pseudo=n_domains)
    hist = clustering.label_histogram(dataset.pseudo, n_domains)
    log.info("pseudo-domain histogram: %s", hist.tolist())
    return model, hist


def _specific_update(state, j, dataset, config, rng, it, dump_dir):
    learner = state.specifics[j]
    ep = episodes.sample_specific(dataset, j, config.ways, config.shots, config.queries, rng)
    out = losses.proto_loss(learner.params, ep, dataset, config.metric, learner.head, tag="specific")
    _check_loss(out.value, f"specific[{j}]", it, state, dump_dir)
    _step(learner, out, "specific", config, it)
    return out.value


def _agg_update(state, dataset, config, lambda_dg, rng_agg, rng_mm, it, dump_dir):
    agg = state.agg
    ep_agg = episodes.sample_aggregation(dataset, config.ways, config.shots, config.queries, rng_agg)
    ep_mm = None
    if lambda_dg > 0:
        ep_mm = episodes.sample_mismatch(dataset, dataset.n_pseudo, config.ways, config.shots,
                                         config.queries, rng_mm)
    out = losses.combined_loss(agg.params, [s.params for s in state.specifics], ep_agg, ep_mm, dataset,
                               lambda_dg, config.metric, agg.head)
    _check_loss(out.value, "combined", it, state, dump_dir)
    _step(agg, out, "agg", config, it)
    return out.parts


def main_phase(state, dataset, config, lambda_dg=None, train_specifics=True, dump_dir=None, hook=None):
    """Steps 3-4: domain-specific training interleaved with combined-loss updates of F_agg.

    ``hook(stage, iteration, state)`` is called after each sub-step, with
    stage ``"specific"`` or ``"agg"``.
    """
    config.validate()
    lambda_dg = config.lambda_dg if lambda_dg is None else lambda_dg
    if lambda_dg > 0 and dataset.n_pseudo < 2:
        log.warning("only one pseudo-domain: mismatch episodes impossible, lambda_dg treated as 0")
        lambda_dg = 0.0
    root = Rng(config.seed)
    rng_agg, rng_mm = root.split("main/agg"), root.split("main/mismatch")
    rng_sp = [root.split(f"main/specific/{j}") for j in range(len(state.specifics))]
    n_sp = len(state.specifics) if train_specifics else 0

    def entry(it):
        return {"phase": "main", "iteration": it}

    def notify(stage, it):
        if hook is not None:
            hook(stage, it, state)

    if config.schedule == "interleaved":
        for it in range(config.main_iters):
            row = entry(it)
            for j in range(n_sp):
                row[f"l_sp_{j}"] = _specific_update(state, j, dataset, config, rng_sp[j], it, dump_dir)
            notify("specific", it)
            parts = _agg_update(state, dataset, config, lambda_dg, rng_agg, rng_mm, it, dump_dir)
            notify("agg", it)
            row["l_agg"], row["l_dg"] = parts["agg"], parts["dg"]
            state.log.append(row)
            state.iteration += 1
    else:
        rows = [entry(it) for it in range(config.main_iters)]
        for it in range(config.main_iters):
            for j in range(n_sp):
                rows[it][f"l_sp_{j}"] = _specific_update(state, j, dataset, config, rng_sp[j], it, dump_dir)
            notify("specific", it)
        for it in range(config.main_iters):
            parts = _agg_update(state, dataset, config, lambda_dg, rng_agg, rng_mm, it, dump_dir)
            notify("agg", it)
            rows[it]["l_agg"], rows[it]["l_dg"] = parts["agg"], parts["dg"]
            state.iteration += 1
        state.log.extend(rows)
    return state


@dataclass
class TrainResult:
    state: TrainState
    pretrained: encoder.EncoderParams
    cluster_model: clustering.ClusterModel = None
    histogram: np.ndarray = None
    mode: str = "full"


def train(dataset, config, mode="full", dump_dir=None, hook=None):
    """Run the whole procedure on a training Dataset (pseudo labels are overwritten)."""
    config.validate()
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}")
    agg = initial_learner(dataset, config)
    state = TrainState(agg)
    pretrain_agg(dataset, config, agg, state, dump_dir)
    pretrained = agg.params.copy()
    if mode == "protonet-baseline":
        if config.lambda_dg != 0:
            log.warning("protonet-baseline ignores lambda_dg=%g", config.lambda_dg)
        main_phase(state, dataset, config, lambda_dg=0.0, train_specifics=False, dump_dir=dump_dir, hook=hook)
        return TrainResult(state, pretrained, None, None, mode)
    skip = mode == "original-labels"
    model, hist = cluster_phase(agg.params, dataset, config.n_domains, Rng(config.seed).split("cluster"),
                                config.cluster_layers, config.kmeans_max_iter, config.kmeans_tol, skip=skip)
    for j in range(dataset.n_pseudo):
        if config.specific_warm_start:
            state.specifics.append(agg.clone())
        else:
            state.specifics.append(initial_learner(dataset, config, tag=f"specific/{j}"))
    main_phase(state, dataset, config, dump_dir=dump_dir, hook=hook)
    return TrainResult(state, pretrained, model, hist, mode)
