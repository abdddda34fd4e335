"""Sessions, padded batches, the JSON-lines dataset format, a hashing toy
embedder and a seeded synthetic generator with known predictive noise."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, SchemaError

SPLITS = ("train", "dev", "test")
LABEL_RANGE = (0.0, 24.0)


@dataclass
class Session:
    id: str
    embeddings: np.ndarray
    label: float
    split: str = "train"

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise SchemaError(f"session {self.id!r}: embeddings must be a non-empty T x D matrix")
        if not np.isfinite(self.embeddings).all():
            raise SchemaError(f"session {self.id!r}: non-finite embedding values")
        if self.split not in SPLITS:
            raise SchemaError(f"session {self.id!r}: unknown split {self.split!r}")
        self.label = float(self.label)

    @property
    def length(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]


@dataclass
class Batch:
    X: np.ndarray  # B x T_max x D
    mask: np.ndarray  # B x T_max, valid prefix per row
    labels: np.ndarray  # B
    lengths: np.ndarray  # B
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


def collate(sessions):
    """Left-aligned zero padding to the longest session in the group."""
    lengths = np.array([s.length for s in sessions], dtype=np.int64)
    dims = {s.dim for s in sessions}
    if len(dims) != 1:
        raise SchemaError(f"sessions disagree on embedding width: {sorted(dims)}")
    t_max, d = int(lengths.max()), dims.pop()
    X = np.zeros((len(sessions), t_max, d))
    mask = np.zeros((len(sessions), t_max), dtype=bool)
    for i, s in enumerate(sessions):
        X[i, : s.length] = s.embeddings
        mask[i, : s.length] = True
    labels = np.array([s.label for s in sessions], dtype=np.float64)
    return Batch(X, mask, labels, lengths, [s.id for s in sessions])


def make_batches(sessions, batch_size, seed=None, shuffle=True):
    """Partition sessions into padded batches; shuffled by ``seed`` when requested."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(sessions))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(sessions))
    return [
        collate([sessions[i] for i in order[start : start + batch_size]])
        for start in range(0, len(sessions), batch_size)
    ]


def by_split(sessions):
    groups = {name: [] for name in SPLITS}
    for s in sessions:
        groups[s.split].append(s)
    return groups


# ---------------------------------------------------------------------------
# JSON-lines format: one utterance per line


def save_dataset(sessions, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sessions:
            for t, row in enumerate(s.embeddings):
                record = {
                    "session": s.id,
                    "t": t,
                    "embedding": row.tolist(),
                    "label": s.label,
                    "split": s.split,
                }
                fh.write(json.dumps(record) + "\n")


def load_dataset(path, check_range=True):
    """Parse a JSON-lines dataset into sessions sorted by id."""
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, t = str(rec["session"]), int(rec["t"])
                emb = [float(v) for v in rec["embedding"]]
                label, split = float(rec["label"]), str(rec["split"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed record ({exc})", line=lineno) from None
            rows.setdefault(sid, []).append((t, emb, label, split, lineno))

    sessions = []
    dataset_dim = None
    for sid in sorted(rows):
        lines = sorted(rows[sid], key=lambda r: r[0])
        steps = [r[0] for r in lines]
        if len(set(steps)) != len(steps):
            raise SchemaError(f"session {sid!r}: duplicate timestep indices")
        dims = {len(r[1]) for r in lines}
        if len(dims) != 1:
            raise SchemaError(f"session {sid!r}: embedding width varies across lines {sorted(dims)}")
        if len({r[2] for r in lines}) != 1:
            raise SchemaError(f"session {sid!r}: label differs between lines")
        if len({r[3] for r in lines}) != 1:
            raise SchemaError(f"session {sid!r}: split tag differs between lines")
        dim = dims.pop()
        if dataset_dim is None:
            dataset_dim = dim
        elif dim != dataset_dim:
            raise SchemaError(f"session {sid!r}: width {dim} differs from dataset width {dataset_dim}")
        label = lines[0][2]
        if check_range and not LABEL_RANGE[0] <= label <= LABEL_RANGE[1]:
            raise SchemaError(f"session {sid!r}: label {label} outside {LABEL_RANGE}")
        sessions.append(Session(sid, np.array([r[1] for r in lines]), label, lines[0][3]))
    return sessions


# ---------------------------------------------------------------------------
# toy embedder


class EmptyUtteranceWarning(UserWarning):
    pass


_TOKEN = re.compile(r"[a-z0-9']+")


def toy_embed(text, dim):
    """Signed feature hashing of lowercased word tokens, L2-normalised."""
    if dim < 8:
        raise ConfigError("toy embedding width must be >= 8")
    vec = np.zeros(dim)
    for token in _TOKEN.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        warnings.warn(f"utterance {text!r} has no tokens; emitting a zero vector", EmptyUtteranceWarning)
        return vec
    return vec / norm


def embed_transcript(utterances, dim):
    return np.stack([toy_embed(u, dim) for u in utterances])


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthSpec:
    """Parameters of the synthetic benchmark.

    ``rule="mean"`` spreads the latent score over every step; ``rule="sparse"``
    writes it only into ``key_steps`` marked steps while the remaining steps
    carry decoy scores, so a model must locate the marked steps.
    """

    num_sessions: int = 200
    t_min: int = 5
    t_max: int = 15
    dim: int = 32
    rule: str = "mean"
    noise: str = "homoscedastic"
    sigma0: float = 0.3
    hetero_min: float = 0.25
    hetero_max: float = 4.0
    signal: float = 1.0
    key_steps: int = 2
    # amplitude of a constant per-session direction encoding the noise factor
    noise_cue: float = 0.0
    splits: tuple = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        self.splits = tuple(float(f) for f in self.splits)
        if self.num_sessions < 1 or not 1 <= self.t_min <= self.t_max or self.dim < 3:
            raise ConfigError("invalid synthetic sizes")
        if self.rule not in ("mean", "sparse"):
            raise ConfigError(f"unknown latent rule {self.rule!r}")
        if self.noise not in ("homoscedastic", "heteroscedastic"):
            raise ConfigError(f"unknown noise model {self.noise!r}")
        if self.rule == "sparse" and not 1 <= self.key_steps <= self.t_min:
            raise ConfigError("key_steps must lie in [1, t_min]")
        if self.sigma0 < 0 or self.signal <= 0 or not 0 < self.hetero_min <= self.hetero_max:
            raise ConfigError("invalid noise parameters")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ConfigError("splits must be three fractions summing to 1")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["splits"] = list(self.splits)
        return d


HALF_RANGE = 12.0  # labels live in [0, 24]


def generate_synthetic(spec: SynthSpec):
    """Return ``(sessions, truth)``.

    Each session has latent score ``s ~ U[0, 24]`` encoded as
    ``code = (s - 12) / 12`` along a fixed unit direction, plus isotropic
    Gaussian noise of scale ``n_i``.  The label is ``s`` itself.  ``truth``
    holds, per session, the efficient estimate of ``s`` from the embeddings
    (``oracle_mu``) and its exact sampling std (``sigma``): ``s - oracle_mu``
    is distributed ``N(0, sigma^2)``.
    """
    rng = np.random.default_rng(spec.seed)
    D = spec.dim
    direction = rng.normal(size=D)
    direction /= np.linalg.norm(direction)
    marker = rng.normal(size=D)
    marker -= marker @ direction * direction
    marker /= np.linalg.norm(marker)
    offset = rng.normal(scale=0.1, size=D)
    cue_dir = rng.normal(size=D)
    cue_dir -= (cue_dir @ direction) * direction + (cue_dir @ marker) * marker
    cue_dir /= np.linalg.norm(cue_dir)

    n = spec.num_sessions
    latent = rng.uniform(*LABEL_RANGE, size=n)
    lengths = rng.integers(spec.t_min, spec.t_max + 1, size=n)
    if spec.noise == "heteroscedastic":
        factors = np.exp(rng.uniform(math.log(spec.hetero_min), math.log(spec.hetero_max), size=n))
    else:
        factors = np.ones(n)
    noise_scale = spec.sigma0 * factors
    log_span = max(abs(math.log(spec.hetero_min)), abs(math.log(spec.hetero_max)), 1e-12)
    cues = spec.noise_cue * np.log(factors) / log_span

    split_of = np.empty(n, dtype=object)
    order = rng.permutation(n)
    n_train = int(round(spec.splits[0] * n))
    n_dev = int(round(spec.splits[1] * n))
    split_of[order[:n_train]] = "train"
    split_of[order[n_train : n_train + n_dev]] = "dev"
    split_of[order[n_train + n_dev :]] = "test"

    sessions, truth = [], {}
    for i in range(n):
        T = int(lengths[i])
        code = (latent[i] - HALF_RANGE) / HALF_RANGE
        noise = rng.normal(scale=noise_scale[i], size=(T, D)) if noise_scale[i] > 0 else np.zeros((T, D))
        if spec.rule == "mean":
            carriers = np.arange(T)
            codes = np.full(T, code)
        else:
            carriers = np.sort(rng.choice(T, size=spec.key_steps, replace=False))
            codes = rng.uniform(-1.0, 1.0, size=T)
            codes[carriers] = code
        emb = offset + spec.signal * codes[:, None] * direction + noise
        if spec.rule == "sparse":
            emb[carriers] += marker
        emb += cues[i] * cue_dir
        # efficient estimate: projection of the carrier steps onto the direction
        proj = (emb[carriers] - offset) @ direction / spec.signal
        oracle_mu = HALF_RANGE + HALF_RANGE * float(proj.mean())
        sigma = HALF_RANGE * noise_scale[i] / (spec.signal * math.sqrt(len(carriers)))
        sid = f"s{i:05d}"
        sessions.append(Session(sid, emb, float(latent[i]), str(split_of[i])))
        truth[sid] = {
            "latent": float(latent[i]),
            "oracle_mu": oracle_mu,
            "sigma": float(sigma),
            "noise_scale": float(noise_scale[i]),
            "length": T,
            "carriers": [int(c) for c in carriers],
        }
    return sessions, {"spec": spec.to_dict(), "sessions": truth}
