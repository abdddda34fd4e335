"""The probabilistic sequence regressor and its checkpoint format."""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, tape, where
from .errors import ConfigError, EmptySessionError, NumericFault, SchemaError
from .layers import LstmStack, MlpHead, Module, MultiHeadAttention, count_parameters

MODES = ("seq2seq", "seq2one")
FAMILIES = ("gaussian", "student_t")
CHECKPOINT_FORMAT = "probseq-checkpoint/1"


@dataclass
class ModelConfig:
    mode: str = "seq2seq"
    family: str = "gaussian"
    input_dim: int = 384
    hidden_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    head_widths: tuple = (256, 64)
    activation: str = "relu"
    use_attention: bool = True
    use_residual: bool = True
    use_variance_head: bool = True
    epsilon: float = 1e-6
    nu_floor: float = 2.0
    init_seed: int = 0

    def __post_init__(self):
        self.head_widths = tuple(int(w) for w in self.head_widths)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.family == "student_t" and self.nu_floor < 2:
            raise ConfigError("nu_floor must be >= 2 for a Student-t head")
        for name in ("input_dim", "hidden_dim", "num_layers", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if (2 * self.hidden_dim) % self.num_heads:
            raise ConfigError("2 * hidden_dim must be divisible by num_heads")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PredictiveOutput:
    """Distribution parameters per valid position.

    ``mu``/``sigma``/``nu`` are ``B x T`` (seq2seq) or ``B x 1`` (seq2one).
    ``sigma`` is None for a point-prediction model.
    """

    family: str
    mu: Tensor
    sigma: Tensor | None = None
    nu: Tensor | None = None
    mask: np.ndarray = field(default=None, repr=False)

    @property
    def is_probabilistic(self):
        return self.sigma is not None

    def arrays(self):
        """Plain numpy copies: (mu, sigma, nu, mask)."""
        return (
            self.mu.data.copy(),
            None if self.sigma is None else self.sigma.data.copy(),
            None if self.nu is None else self.nu.data.copy(),
            self.mask.copy(),
        )


def masked_mean_pool(A, mask):
    """Average ``A`` (B x T x M) over valid positions -> B x M."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise EmptySessionError(f"session {int(np.argmax(counts == 0))} has no valid positions")
    valid = mask[:, :, None]
    summed = where(valid, A, 0.0).sum(axis=1)
    return summed * (1.0 / counts[:, None])


class SequenceRegressor(Module):
    """BiLSTM -> (self-attention + residual) -> per-step or pooled heads."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.lstm = LstmStack(config.input_dim, config.hidden_dim, config.num_layers, rng)
        width = self.lstm.output_dim
        self.attention = (
            MultiHeadAttention(width, config.num_heads, rng) if config.use_attention else None
        )
        self.mu_head = MlpHead(width, config.head_widths, rng, config.activation)
        self.sigma_head = None
        self.nu_head = None
        if config.use_variance_head:
            self.sigma_head = MlpHead(width, config.head_widths, rng, config.activation)
            if config.family == "student_t":
                self.nu_head = MlpHead(width, config.head_widths, rng, config.activation)

    def count_parameters(self):
        return count_parameters(self)

    def forward(self, X, mask) -> PredictiveOutput:
        """Predict from embeddings and mask only; labels never enter here."""
        cfg = self.config
        mask = np.asarray(mask, dtype=bool)
        X = X if isinstance(X, Tensor) else Tensor(X)
        if X.ndim != 3 or mask.shape != X.shape[:2]:
            raise ConfigError(f"mask shape {mask.shape} does not match embeddings {X.shape}")
        empty = ~mask.any(axis=1)
        if empty.any():
            raise EmptySessionError(f"session at batch row {int(np.argmax(empty))} is fully masked")
        for name, p in self.named_parameters():
            if not np.isfinite(p.data).all():
                raise NumericFault(f"parameter {name} contains non-finite values")

        A = self.lstm(X, mask)
        if self.attention is not None:
            A = self.attention(A, mask, residual=cfg.use_residual)

        if cfg.mode == "seq2one":
            A = masked_mean_pool(A, mask)
            out_mask = np.ones((mask.shape[0], 1), dtype=bool)
            shape = (mask.shape[0], 1)
        else:
            out_mask = mask
            shape = mask.shape

        mu = self.mu_head(A).reshape(shape)
        sigma = nu = None
        if self.sigma_head is not None:
            sigma = self.sigma_head(A).reshape(shape).softplus() + cfg.epsilon
        if self.nu_head is not None:
            nu = self.nu_head(A).reshape(shape).softplus() + cfg.nu_floor
        out = PredictiveOutput(cfg.family, mu, sigma, nu, out_mask)
        _check_finite(out)
        return out

    # -- state ---------------------------------------------------------
    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = self.parameters()
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise SchemaError(f"state mismatch; missing {missing}, unexpected {extra}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise SchemaError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


def _check_finite(out):
    for t in (out.mu, out.sigma, out.nu):
        if t is None:
            continue
        valid = np.broadcast_to(out.mask, t.shape)
        if np.isfinite(t.data[valid]).all():
            continue
        for node in tape(t) if t.requires_grad else [t]:
            if not np.isfinite(node.data).all():
                raise NumericFault(f"non-finite value first produced by op {node.op!r}")
        raise NumericFault("non-finite model output")


def save_checkpoint(model, path, extra=None):
    """Write config + named parameters as a single .npz archive."""
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    header = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "extra": extra or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    # fixed zip timestamps keep the file byte-reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, value in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(value), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, extra)``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            if "__header__" not in z.files:
                raise SchemaError(f"{path}: not a checkpoint (no header)")
            header = json.loads(z["__header__"].tobytes().decode())
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (zipfile.BadZipFile, ValueError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: unreadable checkpoint ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path}: unsupported format {header.get('format')!r}")
    model = SequenceRegressor(ModelConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    return model, header.get("extra", {})
