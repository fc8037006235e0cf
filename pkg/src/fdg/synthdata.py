"""Seeded multi-speaker, multi-domain sequence data.

Speakers are points in a latent space; an utterance is a noisy copy of its
speaker's latent, rendered as ``T`` frames through a fixed mixing matrix.
Each domain then applies ``x_t <- a * x_t + b + n_t`` with per-channel
scale ``a``, offset ``b`` and channel-correlated noise ``n_t = B @ eps_t``
scaled to a target SNR. Every domain has its own rank-F/2 noise basis. With
``noise_bases="orthogonal"`` source-domain bases lie in one half of a random
orthonormal basis and out-domain bases in the other half; with
``"independent"`` each domain draws an unconstrained random basis. Out-domain
scales and offsets are drawn from ranges disjoint from the source ranges.

Training speakers spread their utterances over the source domains. Every
test speaker's first ``enroll_utts + test_utts`` utterances are rendered in
every domain, source and out, so each domain gets its own trial list.
"""
from dataclasses import asdict, dataclass, fields

import numpy as np

from .container import read_container, write_container
from .episodes import Dataset
from .errors import ConfigurationError, FormatError
from .numerics import Rng

DATASET_MAGIC = "FDGD"

ROLE_TRAIN, ROLE_ENROLL, ROLE_TEST = 0, 1, 2


@dataclass(frozen=True)
class GenConfig:
    latent_dim: int = 8
    channels: int = 8
    frames: int = 50
    train_speakers: int = 50
    test_speakers: int = 20
    utts_per_speaker: int = 45
    enroll_utts: int = 5
    test_utts: int = 35
    within_std: float = 0.3
    frame_std: float = 0.1
    source_domains: int = 4
    out_domains: int = 3
    clean_source: bool = True  # source domain 0 is the untransformed signal
    scale_spread: float = 0.3  # source a in [1-s, 1+s]; out |a-1| in [s, 2s]
    offset_max: float = 0.5  # source b in [-o, o]; out |b| in [o, 2o]
    snr_db: float = 0.0  # SNR of the domain noise at severity 1
    severity: float = 1.0  # source-domain transform strength
    out_severity: float = 1.0  # out-domain transform strength
    noise_bases: str = "orthogonal"  # or "independent"
    seed: int = 0

    def validate(self):
        counts = ("latent_dim", "channels", "frames", "train_speakers", "test_speakers",
                  "utts_per_speaker", "enroll_utts", "test_utts", "source_domains")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.out_domains < 0:
            raise ConfigurationError("out_domains must be >= 0")
        if self.within_std <= 0 or self.frame_std <= 0:
            raise ConfigurationError("within_std and frame_std must be > 0")
        if self.enroll_utts + self.test_utts > self.utts_per_speaker:
            raise ConfigurationError("enroll_utts + test_utts exceeds utts_per_speaker")
        if not 0 <= self.scale_spread < 0.5:
            raise ConfigurationError("scale_spread must lie in [0, 0.5) so out-domain scales stay positive")
        if self.offset_max < 0 or self.severity < 0 or self.out_severity < 0:
            raise ConfigurationError("offset_max, severity and out_severity must be >= 0")
        if self.noise_bases not in ("orthogonal", "independent"):
            raise ConfigurationError("noise_bases must be 'orthogonal' or 'independent'")
        if self.channels < 2:
            raise ConfigurationError("channels must be >= 2 to split noise subspaces")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DomainTransform:
    scale: np.ndarray  # (F,)
    offset: np.ndarray  # (F,)
    basis: np.ndarray  # (F, F) noise colouring matrix
    strength: float
    is_source: bool

    def apply(self, x, eps, snr_db):
        """Transform clean frames ``x`` (T, F) with standard-normal draws ``eps`` (T, F)."""
        out = (1.0 + self.strength * (self.scale - 1.0)) * x + self.strength * self.offset
        if self.strength == 0:
            return out
        noise = eps @ self.basis.T
        power = float(np.mean(noise ** 2))
        if power > 0:
            target = float(np.mean(x ** 2)) / 10.0 ** (snr_db / 10.0)
            out = out + self.strength * np.sqrt(target / power) * noise
        return out


class SynthDataset:
    """A Dataset plus train/test and source/out split metadata."""

    def __init__(self, dataset, roles, source_utt, config):
        self.dataset = dataset
        self.roles = np.asarray(roles, dtype=np.int64)
        self.source_utt = np.asarray(source_utt, dtype=np.int64)
        self.config = config
        c = config
        self.train_speakers = np.arange(c.train_speakers)
        self.test_speakers = np.arange(c.train_speakers, c.train_speakers + c.test_speakers)
        self.source_domains = np.arange(c.source_domains)
        self.out_domains = np.arange(c.source_domains, c.source_domains + c.out_domains)

    def train_set(self):
        """Training utterances, speakers re-indexed densely from 0."""
        return self.dataset.subset(np.flatnonzero(self.roles == ROLE_TRAIN))

    def eval_split(self, domain):
        """``(enrollment, tests)`` dicts speaker -> utterance indices for one domain."""
        ds = self.dataset
        enrollment, tests = {}, {}
        for s in self.test_speakers:
            mine = (ds.speakers == s) & (ds.domains == domain)
            enrollment[int(s)] = np.flatnonzero(mine & (self.roles == ROLE_ENROLL))
            tests[int(s)] = np.flatnonzero(mine & (self.roles == ROLE_TEST))
        return enrollment, tests

    def domain_group(self, group):
        if group == "in":
            return [int(d) for d in self.source_domains]
        if group == "out":
            return [int(d) for d in self.out_domains]
        if group == "all":
            return [int(d) for d in self.source_domains] + [int(d) for d in self.out_domains]
        raise ConfigurationError(f"unknown domain group {group!r}")


def _domain_transforms(config, rng):
    f = config.channels
    q, _ = np.linalg.qr(rng.split("basis").normal(size=(f, f)))
    half = f // 2
    source_dirs, out_dirs = q[:, :half], q[:, half:]
    s, o = config.scale_spread, config.offset_max
    transforms = []
    for d in range(config.source_domains + config.out_domains):
        r = rng.split(f"domain/{d}")
        is_source = d < config.source_domains
        if is_source:
            scale = r.uniform(1.0 - s, 1.0 + s, size=f)
            offset = r.uniform(-o, o, size=f)
            dirs = source_dirs
        else:
            sign = np.where(r.random(size=f) < 0.5, -1.0, 1.0)
            scale = 1.0 + sign * r.uniform(s, 2 * s, size=f)
            offset = np.where(r.random(size=f) < 0.5, -1.0, 1.0) * r.uniform(o, 2 * o, size=f)
            dirs = out_dirs
        if config.noise_bases == "independent":
            dirs = r.normal(size=(f, half)) / np.sqrt(f)
        basis = dirs @ r.normal(size=(dirs.shape[1], f))
        strength = config.severity if is_source else config.out_severity
        if is_source and d == 0 and config.clean_source:
            strength = 0.0
        transforms.append(DomainTransform(scale, offset, basis, strength, is_source))
    return transforms


def generate(config):
    """Build the full dataset; deterministic given ``config``."""
    config.validate()
    root = Rng(config.seed)
    c = config
    mix = root.split("mix").normal(size=(c.channels, c.latent_dim)) / np.sqrt(c.latent_dim)
    n_speakers = c.train_speakers + c.test_speakers
    identities = root.split("speakers").normal(size=(n_speakers, c.latent_dim))
    transforms = _domain_transforms(c, root)

    features, speakers, domains, roles, source_utt = [], [], [], [], []

    def clean(spk, u):
        r = root.split(f"utt/{spk}/{u}")
        latent = identities[spk] + r.normal(0.0, c.within_std, size=c.latent_dim)
        return (mix @ latent)[None, :] + r.normal(0.0, c.frame_std, size=(c.frames, c.channels))

    def render(x, spk, u, d):
        eps = root.split(f"noise/{d}/{spk}/{u}").normal(size=x.shape)
        # stored as float32, kept in float64 so in-memory and loaded data agree
        return transforms[d].apply(x, eps, c.snr_db).astype(np.float32).astype(np.float64)

    for spk in range(c.train_speakers):
        order = root.split(f"assign/{spk}").permutation(c.utts_per_speaker)
        for u in range(c.utts_per_speaker):
            d = int(order[u] % c.source_domains)
            features.append(render(clean(spk, u), spk, u, d))
            speakers.append(spk)
            domains.append(d)
            roles.append(ROLE_TRAIN)
            source_utt.append(u)
    n_eval = c.enroll_utts + c.test_utts
    for spk in range(c.train_speakers, n_speakers):
        cleans = [clean(spk, u) for u in range(n_eval)]
        for d in range(c.source_domains + c.out_domains):
            for u, x in enumerate(cleans):
                features.append(render(x, spk, u, d))
                speakers.append(spk)
                domains.append(d)
                roles.append(ROLE_ENROLL if u < c.enroll_utts else ROLE_TEST)
                source_utt.append(u)
    return SynthDataset(Dataset(features, speakers, domains), roles, source_utt, config)


def save_dataset(synth, path):
    ds = synth.dataset
    utterances, offset, blobs = [], 0, []
    for i, x in enumerate(ds.features):
        frames, channels = x.shape
        utterances.append({
            "id": int(ds.utt_ids[i]),
            "speaker": int(ds.speakers[i]),
            "domain": int(ds.domains[i]),
            "role": int(synth.roles[i]),
            "source_utt": int(synth.source_utt[i]),
            "offset": offset,
            "frames": frames,
            "channels": channels,
        })
        blob = np.ascontiguousarray(x, dtype="<f4").tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "kind": "dataset",
        "config": asdict(synth.config),
        "speakers": {"train": synth.train_speakers.tolist(), "test": synth.test_speakers.tolist()},
        "domains": {"source": synth.source_domains.tolist(), "out": synth.out_domains.tolist()},
        "payload_bytes": offset,
        "utterances": utterances,
    }
    write_container(path, DATASET_MAGIC, manifest, b"".join(blobs))


def load_dataset(path):
    manifest, payload = read_container(path, DATASET_MAGIC)
    try:
        config = GenConfig.from_dict(manifest["config"])
        utterances = manifest["utterances"]
        declared = int(manifest["payload_bytes"])
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise FormatError(f"{path}: malformed dataset manifest ({exc})") from None
    if declared != len(payload):
        raise FormatError(f"{path}: payload has {len(payload)} bytes, manifest declares {declared}")
    features, cols = [], {k: [] for k in ("id", "speaker", "domain", "role", "source_utt")}
    expected = 0
    for rec in utterances:
        try:
            start, frames, channels = int(rec["offset"]), int(rec["frames"]), int(rec["channels"])
            for k in cols:
                cols[k].append(int(rec[k]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed utterance record ({exc})") from None
        size = 4 * frames * channels
        if start != expected or frames < 1 or channels < 1 or start + size > len(payload):
            raise FormatError(f"{path}: utterance {rec.get('id')} points outside the payload")
        x = np.frombuffer(payload, "<f4", frames * channels, start).reshape(frames, channels)
        features.append(x.astype(np.float64))
        expected += size
    if expected != len(payload):
        raise FormatError(f"{path}: {len(payload) - expected} trailing payload bytes")
    dataset = Dataset(features, cols["speaker"], cols["domain"], utt_ids=cols["id"])
    return SynthDataset(dataset, cols["role"], cols["source_utt"], config)
