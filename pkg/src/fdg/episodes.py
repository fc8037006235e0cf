"""Labelled utterance collections and the three episode samplers."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError

KINDS = ("aggregation", "specific", "mismatch")


class Dataset:
    """Utterances with speaker, true-domain and pseudo-domain ids.

    ``features`` is a list of T_i x F float arrays. Speaker and domain ids are
    dense from 0; ``pseudo`` starts as a copy of ``domains`` and is replaced by
    clustering.
    """

    def __init__(self, features, speakers, domains, pseudo=None, utt_ids=None, n_pseudo=None):
        self.features = list(features)
        self.speakers = np.asarray(speakers, dtype=np.int64)
        self.domains = np.asarray(domains, dtype=np.int64)
        n = len(self.features)
        if self.speakers.shape != (n,) or self.domains.shape != (n,):
            raise UsageError("speaker/domain id arrays must have one entry per utterance")
        self.utt_ids = np.arange(n, dtype=np.int64) if utt_ids is None else np.asarray(utt_ids, dtype=np.int64)
        self.n_speakers = int(self.speakers.max()) + 1 if n else 0
        self.n_domains = int(self.domains.max()) + 1 if n else 0
        self.set_pseudo(self.domains.copy() if pseudo is None else pseudo, n_pseudo)

    def __len__(self):
        return len(self.features)

    def set_pseudo(self, labels, n_pseudo=None):
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (len(self),):
            raise UsageError("one pseudo label per utterance is required")
        if len(self) and labels.min() < 0:
            raise UsageError("pseudo labels must be non-negative")
        self.pseudo = labels
        self.n_pseudo = int(n_pseudo) if n_pseudo is not None else (int(labels.max()) + 1 if len(self) else 0)
        self._pools = {}

    def pool(self, pseudo_domain=None):
        """Map speaker -> utterance indices, over all utterances or one pseudo-domain."""
        if pseudo_domain not in self._pools:
            mask = np.ones(len(self), bool) if pseudo_domain is None else self.pseudo == pseudo_domain
            pool = {}
            for idx in np.flatnonzero(mask):
                pool.setdefault(int(self.speakers[idx]), []).append(idx)
            self._pools[pseudo_domain] = {s: np.asarray(v) for s, v in sorted(pool.items())}
        return self._pools[pseudo_domain]

    def subset(self, indices, remap_speakers=True):
        """New Dataset over ``indices``; speakers re-indexed densely in first-seen order."""
        indices = np.asarray(indices, dtype=np.int64)
        speakers = self.speakers[indices]
        if remap_speakers:
            _, first = np.unique(speakers, return_index=True)
            order = speakers[np.sort(first)]
            lookup = {int(s): i for i, s in enumerate(order)}
            speakers = np.array([lookup[int(s)] for s in speakers], dtype=np.int64)
        return Dataset([self.features[i] for i in indices], speakers, self.domains[indices],
                       self.pseudo[indices], self.utt_ids[indices])


@dataclass
class Episode:
    kind: str
    support: np.ndarray  # utterance indices, grouped by class
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    speakers: np.ndarray  # speaker id of class k at position k
    ways: int
    shots: int
    queries: int
    domain_j: int = -1
    domain_u: int = -1

    def describe(self):
        if self.kind == "specific":
            return f"specific(j={self.domain_j})"
        if self.kind == "mismatch":
            return f"mismatch(u={self.domain_u}, j={self.domain_j})"
        return self.kind


def _check_counts(ways, shots, queries):
    if ways < 1 or shots < 1 or queries < 1:
        raise ConfigurationError(f"C, K, Q must all be >= 1, got {ways}, {shots}, {queries}")


def _sample_from_pool(pool, ways, shots, queries, rng, where):
    need = shots + queries
    eligible = np.array([s for s, utts in pool.items() if len(utts) >= need], dtype=np.int64)
    if len(eligible) < ways:
        raise ConfigurationError(
            f"{where}: {len(eligible)} speakers have >= {need} utterances, episode needs {ways}"
        )
    chosen = rng.choice(eligible, size=ways, replace=False)
    support, query = [], []
    for speaker in chosen:
        utts = pool[int(speaker)]
        picked = utts[rng.choice(len(utts), size=need, replace=False)]
        support.append(picked[:shots])
        query.append(picked[shots:])
    classes = np.arange(ways)
    return (np.concatenate(support), np.repeat(classes, shots),
            np.concatenate(query), np.repeat(classes, queries), chosen)


def sample_aggregation(dataset, ways, shots, queries, rng):
    """Episode drawn across every domain."""
    _check_counts(ways, shots, queries)
    parts = _sample_from_pool(dataset.pool(None), ways, shots, queries, rng, "aggregation")
    return Episode("aggregation", *parts, ways, shots, queries)


def sample_specific(dataset, j, ways, shots, queries, rng):
    """Episode whose members all carry pseudo-domain ``j``."""
    _check_counts(ways, shots, queries)
    if not 0 <= j < dataset.n_pseudo:
        raise ConfigurationError(f"pseudo-domain {j} out of range [0, {dataset.n_pseudo})")
    parts = _sample_from_pool(dataset.pool(j), ways, shots, queries, rng, f"pseudo-domain {j}")
    return Episode("specific", *parts, ways, shots, queries, domain_j=j, domain_u=j)


def draw_mismatch_pair(n_domains, rng):
    """u uniform over domains, j uniform over the other domains."""
    if n_domains < 2:
        raise ConfigurationError(f"mismatch episodes need at least 2 domains, got {n_domains}")
    u = int(rng.integers(n_domains))
    j = (u + 1 + int(rng.integers(n_domains - 1))) % n_domains
    return u, j


def sample_mismatch(dataset, n_domains, ways, shots, queries, rng):
    """Support and query from pseudo-domain u; prototypes later come from network j != u."""
    _check_counts(ways, shots, queries)
    u, j = draw_mismatch_pair(n_domains, rng)
    if u >= dataset.n_pseudo:
        raise ConfigurationError(f"pseudo-domain {u} out of range [0, {dataset.n_pseudo})")
    parts = _sample_from_pool(dataset.pool(u), ways, shots, queries, rng, f"pseudo-domain {u}")
    return Episode("mismatch", *parts, ways, shots, queries, domain_j=j, domain_u=u)


def episode_violations(episode, dataset):
    """List of invariant violations (empty when the episode is well formed)."""
    problems = []
    c, k, q = episode.ways, episode.shots, episode.queries
    if len(episode.support) != c * k or len(episode.query) != c * q:
        problems.append("cardinality")
    if set(episode.support.tolist()) & set(episode.query.tolist()):
        problems.append("support/query overlap")
    if len(set(episode.support.tolist())) != len(episode.support) or len(set(episode.query.tolist())) != len(episode.query):
        problems.append("duplicate member")
    if len(set(episode.speakers.tolist())) != c:
        problems.append("speaker count")
    for refs, labels, per in ((episode.support, episode.support_labels, k), (episode.query, episode.query_labels, q)):
        if np.any(np.bincount(labels, minlength=c) != per):
            problems.append("per-class count")
        if np.any(dataset.speakers[refs] != episode.speakers[labels]):
            problems.append("label/speaker mismatch")
    members = np.concatenate([episode.support, episode.query])
    if episode.kind == "specific" and np.any(dataset.pseudo[members] != episode.domain_j):
        problems.append("domain purity")
    if episode.kind == "mismatch":
        if np.any(dataset.pseudo[members] != episode.domain_u):
            problems.append("domain purity")
        if episode.domain_j == episode.domain_u:
            problems.append("j == u")
    return problems
