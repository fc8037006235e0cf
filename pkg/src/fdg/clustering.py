"""Style statistics of encoder activations and k-means pseudo-domain labels."""
from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .container import read_container, write_container
from .errors import ConfigurationError, FormatError, UsageError
from .numerics import DTYPE

CLUSTER_MAGIC = "FDGC"


def style_features(agg, dataset, layers=None, batch_size=512):
    """One row per utterance: for each chosen conv layer, channel means then channel stds.

    ``layers`` selects conv layers by index (default: all, in network order).
    """
    n_layers = len(agg.config.layers)
    layers = list(range(n_layers)) if layers is None else sorted(set(int(l) for l in layers))
    if not layers or layers[0] < 0 or layers[-1] >= n_layers:
        raise UsageError(f"layer selection {layers} invalid for a {n_layers}-layer encoder")
    width = 2 * sum(agg.config.channels[l] for l in layers)
    out = np.empty((len(dataset), width), dtype=DTYPE)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.features[start:start + batch_size]
        _, trace = encoder.embed(agg, chunk, keep_trace=True)
        for idx, batch in trace.groups:
            cols = []
            for l in layers:
                act = batch.layers[l].out
                cols += [act.mean(axis=1), act.std(axis=1)]
            out[start + idx] = np.concatenate(cols, axis=1)
    return out


@dataclass
class ClusterModel:
    mean: np.ndarray
    scale: np.ndarray
    centroids: np.ndarray  # (M, D) in standardized space
    inertia_history: list = field(default_factory=list)
    layers: list = None  # conv layers the features were taken from (None = all)
    n_iter: int = 0

    @property
    def n_clusters(self):
        return self.centroids.shape[0]

    def standardize(self, features):
        return (np.asarray(features, dtype=DTYPE) - self.mean) / self.scale

    def predict(self, features):
        return nearest_centroid(self.standardize(features), self.centroids)[0]


def nearest_centroid(points, centroids):
    """Labels and squared distances; ties go to the lowest centroid index."""
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(points)), labels]


def _kmeans_pp(points, n_clusters, rng):
    n = len(points)
    centers = [int(rng.integers(n))]
    closest = ((points - points[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            pick = int(rng.choice(n, p=closest / total))
        else:
            pick = int(rng.integers(n))
        centers.append(pick)
        closest = np.minimum(closest, ((points - points[pick]) ** 2).sum(axis=1))
    return points[centers].copy()


def kmeans(features, n_clusters, rng, max_iter=100, tol=1e-8):
    """Standardize, seed with k-means++, then run Lloyd iterations."""
    features = np.asarray(features, dtype=DTYPE)
    if features.ndim != 2:
        raise UsageError("features must be a 2-D array")
    n = len(features)
    if n_clusters < 1 or n < n_clusters:
        raise ConfigurationError(f"cannot form {n_clusters} clusters from {n} points")
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    points = (features - mean) / scale
    centroids = _kmeans_pp(points, n_clusters, rng)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, d2 = nearest_centroid(points, centroids)
        history.append(float(d2.sum()))
        updated = np.empty_like(centroids)
        for k in range(n_clusters):
            members = labels == k
            if members.any():
                updated[k] = points[members].mean(axis=0)
            else:
                # reseed to the point currently farthest from its own centroid
                far = int(np.argmax(d2))
                updated[k] = points[far]
                d2[far] = 0.0
        shift = float(np.max(np.abs(updated - centroids)))
        centroids = updated
        if shift < tol:
            break
    _, d2 = nearest_centroid(points, centroids)
    history.append(float(d2.sum()))
    return ClusterModel(mean, scale, centroids, history, None, n_iter)


def assign_pseudo_labels(model, agg, dataset):
    """Relabel ``dataset.pseudo`` in place with the nearest centroid of each utterance."""
    labels = model.predict(style_features(agg, dataset, model.layers))
    dataset.set_pseudo(labels, n_pseudo=model.n_clusters)
    return dataset


def label_histogram(labels, n_clusters):
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_clusters)


def save_cluster_model(model, path):
    arrays = {"mean": model.mean, "scale": model.scale, "centroids": model.centroids}
    descriptor = {
        "kind": "cluster_model",
        "layers": model.layers,
        "inertia_history": model.inertia_history,
        "n_iter": model.n_iter,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    write_container(path, CLUSTER_MAGIC, descriptor, payload)


def load_cluster_model(path):
    descriptor, payload = read_container(path, CLUSTER_MAGIC)
    try:
        entries = [(e["name"], tuple(e["shape"])) for e in descriptor["tensors"]]
        history = [float(v) for v in descriptor["inertia_history"]]
        layers = descriptor["layers"]
        n_iter = int(descriptor["n_iter"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed cluster descriptor ({exc})") from None
    if [name for name, _ in entries] != ["mean", "scale", "centroids"]:
        raise FormatError(f"{path}: unexpected tensors {entries}")
    expected = 8 * sum(int(np.prod(s)) for _, s in entries)
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, descriptor needs {expected}")
    arrays, pos = {}, 0
    for name, shape in entries:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, "<f8", count, pos).astype(DTYPE).reshape(shape)
        pos += 8 * count
    dim = arrays["mean"].shape
    if arrays["scale"].shape != dim or arrays["centroids"].ndim != 2 or arrays["centroids"].shape[1:] != dim:
        raise FormatError(f"{path}: inconsistent cluster model shapes")
    return ClusterModel(arrays["mean"], arrays["scale"], arrays["centroids"], history, layers, n_iter)
