"""Verification protocol: enrollment, trial scoring, ROC, EER, FRR@FAR and MinDCF.

A trial is accepted iff ``score >= tau``. The ROC is swept over every
distinct score plus ``-inf`` and ``+inf``.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .errors import ConfigurationError, NumericalError, UsageError
from .numerics import DTYPE

SCORE_METRICS = ("neg_sq_euclidean", "cosine")


def enroll(embedder, enrollment_x):
    """Reference embedding = mean of enrollment embeddings."""
    if len(enrollment_x) == 0:
        raise UsageError("enrollment needs at least one utterance")
    emb, _ = encoder.embed(embedder, enrollment_x)
    return emb.mean(axis=0)


def score(reference, test, metric="neg_sq_euclidean"):
    """Similarity of one test embedding to a reference; higher is more similar."""
    return float(score_many(np.asarray(reference)[None], np.asarray(test)[None], metric)[0])


def score_many(references, tests, metric="neg_sq_euclidean"):
    """Row-wise scores of paired (n, d) arrays."""
    references = np.asarray(references, dtype=DTYPE)
    tests = np.asarray(tests, dtype=DTYPE)
    if references.shape != tests.shape:
        raise UsageError(f"dimension mismatch {references.shape} vs {tests.shape}")
    if metric == "neg_sq_euclidean":
        diff = references - tests
        return -np.einsum("nd,nd->n", diff, diff)
    if metric == "cosine":
        rn = np.linalg.norm(references, axis=1)
        tn = np.linalg.norm(tests, axis=1)
        if np.any(rn == 0) or np.any(tn == 0):
            raise NumericalError("zero-norm vector under cosine scoring")
        return np.einsum("nd,nd->n", references, tests) / (rn * tn)
    raise UsageError(f"unknown score metric {metric!r}; choose from {SCORE_METRICS}")


@dataclass
class MetricsReport:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    eer: float
    eer_step: float
    frr_at_far: dict
    min_dcf: float
    min_dcf_raw: float
    dcf_params: tuple  # (c_fr, c_fa, p_target)
    n_target: int
    n_impostor: int
    eer_threshold: float = float("nan")

    def summary(self):
        row = {
            "eer": self.eer,
            "min_dcf": self.min_dcf,
            "min_dcf_raw": self.min_dcf_raw,
            "n_target": self.n_target,
            "n_impostor": self.n_impostor,
        }
        for far, frr in self.frr_at_far.items():
            row[f"frr_at_far_{far:g}"] = frr
        return row


def roc_points(scores, is_target):
    """Thresholds (ascending, with -inf/+inf ends), FAR and FRR at each."""
    scores = np.asarray(scores, dtype=DTYPE)
    is_target = np.asarray(is_target, dtype=bool)
    if scores.shape != is_target.shape or scores.ndim != 1:
        raise UsageError("scores and labels must be matching 1-D sequences")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("scores must be finite")
    n_tgt = int(is_target.sum())
    n_imp = int((~is_target).sum())
    if n_tgt == 0 or n_imp == 0:
        raise UsageError(f"need at least one target and one impostor trial (got {n_tgt}, {n_imp})")
    tgt = np.sort(scores[is_target])
    imp = np.sort(scores[~is_target])
    distinct = np.unique(scores)
    thresholds = np.concatenate([[-np.inf], distinct, [np.inf]])
    # accepted impostors: score >= tau; rejected targets: score < tau
    far = (n_imp - np.searchsorted(imp, thresholds, side="left")) / n_imp
    frr = np.searchsorted(tgt, thresholds, side="left") / n_tgt
    return thresholds, far, frr


def eer_interpolated(far, frr):
    """FAR = FRR crossing, linearly interpolated between adjacent ROC points."""
    diff = far - frr
    zero = np.flatnonzero(diff == 0)
    if zero.size:
        return float(far[zero[0]]), int(zero[0])
    i = int(np.flatnonzero((diff[:-1] > 0) & (diff[1:] < 0))[0])
    t = diff[i] / (diff[i] - diff[i + 1])
    return float(far[i] + t * (far[i + 1] - far[i])), i


def eer_step(far, frr):
    """Step-wise EER: min over thresholds of max(FAR, FRR)."""
    return float(np.min(np.maximum(far, frr)))


def frr_at_far(far, frr, target):
    """FRR at the smallest threshold whose FAR does not exceed ``target``."""
    idx = int(np.flatnonzero(far <= target)[0])
    return float(frr[idx])


def min_dcf(far, frr, c_fr=1.0, c_fa=1.0, p_target=0.05):
    """Return (normalized, raw) minimum detection cost."""
    dcf = c_fr * frr * p_target + c_fa * far * (1.0 - p_target)
    raw = float(np.min(dcf))
    return raw / min(c_fr * p_target, c_fa * (1.0 - p_target)), raw


def compute_metrics(scores, is_target, far_points=(0.1,), c_fr=1.0, c_fa=1.0, p_target=0.05):
    """Full metrics report for a scored trial list."""
    thresholds, far, frr = roc_points(scores, is_target)
    eer, i = eer_interpolated(far, frr)
    norm, raw = min_dcf(far, frr, c_fr, c_fa, p_target)
    return MetricsReport(
        thresholds=thresholds,
        far=far,
        frr=frr,
        eer=eer,
        eer_step=eer_step(far, frr),
        frr_at_far={float(p): frr_at_far(far, frr, p) for p in far_points},
        min_dcf=norm,
        min_dcf_raw=raw,
        dcf_params=(c_fr, c_fa, p_target),
        n_target=int(np.sum(is_target)),
        n_impostor=int(len(is_target) - np.sum(is_target)),
        eer_threshold=float(thresholds[i]),
    )


# ---------------------------------------------------------------------------
# trials


@dataclass
class TrialSet:
    enrollment: dict  # speaker -> array of utterance indices
    tests: dict  # speaker -> array of utterance indices
    ref_speaker: np.ndarray = field(default=None)
    test_utt: np.ndarray = field(default=None)
    is_target: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.is_target)


def build_trials(enrollment, tests, mode="exhaustive"):
    """Every speaker against its own tests (targets) and everyone else's (impostors).

    ``enrollment`` and ``tests`` map speaker id -> utterance indices.
    """
    if mode != "exhaustive":
        raise UsageError(f"unsupported trial mode {mode!r}")
    speakers = sorted(enrollment)
    if sorted(tests) != speakers:
        raise ConfigurationError("enrollment and test splits cover different speakers")
    for s in speakers:
        if len(enrollment[s]) == 0 or len(tests[s]) == 0:
            raise ConfigurationError(f"speaker {s} has an empty enrollment or test split")
        if set(np.asarray(enrollment[s]).tolist()) & set(np.asarray(tests[s]).tolist()):
            raise ConfigurationError(f"speaker {s} shares utterances between enrollment and test")
    ref, utt, tgt = [], [], []
    for s in speakers:
        for t in speakers:
            pool = np.asarray(tests[t])
            ref.append(np.full(len(pool), s))
            utt.append(pool)
            tgt.append(np.full(len(pool), s == t))
    return TrialSet(
        {s: np.asarray(enrollment[s]) for s in speakers},
        {s: np.asarray(tests[s]) for s in speakers},
        np.concatenate(ref).astype(np.int64),
        np.concatenate(utt).astype(np.int64),
        np.concatenate(tgt).astype(bool),
    )


def score_trials(embedder, dataset, trials, metric="neg_sq_euclidean"):
    """Scores for every trial, in trial order."""
    speakers = sorted(trials.enrollment)
    references = np.stack([enroll(embedder, [dataset.features[i] for i in trials.enrollment[s]]) for s in speakers])
    row = {s: i for i, s in enumerate(speakers)}
    needed = np.unique(trials.test_utt)
    emb, _ = encoder.embed(embedder, [dataset.features[i] for i in needed])
    lookup = np.searchsorted(needed, trials.test_utt)
    return score_many(references[[row[s] for s in trials.ref_speaker]], emb[lookup], metric)


# ---------------------------------------------------------------------------
# exports


def _fmt(value):
    if np.isposinf(value):
        return "inf"
    if np.isneginf(value):
        return "-inf"
    return f"{value:.9g}"


def export_roc(report, path):
    with open(path, "w", newline="") as fh:
        fh.write("tau,far,frr\n")
        for tau, far, frr in zip(report.thresholds, report.far, report.frr):
            fh.write(f"{_fmt(tau)},{_fmt(far)},{_fmt(frr)}\n")


def read_roc(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["tau", "far", "frr"]:
        raise UsageError(f"{path}: not a ROC file")
    return np.array([[float(v) for v in r] for r in rows[1:]])


def export_embeddings(embedder, dataset, path):
    emb, _ = encoder.embed(embedder, dataset.features)
    dim = emb.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["utt_id", "speaker", "domain"] + [f"e{i}" for i in range(dim)]) + "\n")
        for uid, spk, dom, vec in zip(dataset.utt_ids, dataset.speakers, dataset.domains, emb):
            fh.write(f"{uid},{spk},{dom}," + ",".join(_fmt(v) for v in vec) + "\n")
    return emb
