"""Adam + cosine schedule training loop with early stopping on dev MAE."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .calibration import PredictionRecords
from .data import by_split, make_batches
from .errors import ConfigError, ContractError, DomainError, NumericFault
from .losses import LOSSES, LossWeights, batch_loss, eval_nll, point_metrics, sequence_loss
from .model import PredictiveOutput

log = logging.getLogger(__name__)

TRANSFORMS = ("log1p", "identity")
HISTORY_FIELDS = ("epoch", "train_loss", "dev_mae", "dev_rmse", "lr")


@dataclass
class TrainConfig:
    epochs: int = 50
    lr_max: float = 2e-4
    lr_min: float = 1e-4
    patience: int = 15
    batch_size: int = 16
    seed: int = 0
    loss: str = "gaussian_nll"
    weights: LossWeights = field(default_factory=LossWeights)
    transform: str = "log1p"
    clip_norm: float | None = 5.0
    # start the mean/scale heads at the training-label mean/std
    init_output_bias: bool = True
    eval_batch_size: int = 64

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        elif isinstance(self.weights, (list, tuple)):
            self.weights = LossWeights(*self.weights)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError("need 0 <= lr_min <= lr_max")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def cosine_lr(epoch, cfg):
    """Single cosine decay from lr_max at epoch 0 to lr_min at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_max
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericFault(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# ---------------------------------------------------------------------------
# target transform


def transform_targets(y, tag):
    y = np.asarray(y, dtype=np.float64)
    if tag == "identity":
        return y
    if tag == "log1p":
        if (y < 0).any():
            raise DomainError("log1p transform needs non-negative targets", tuple(np.argwhere(y < 0)[0]))
        return np.log1p(y)
    raise ConfigError(f"unknown transform {tag!r}")


def inverse_transform(z, tag):
    z = np.asarray(z, dtype=np.float64)
    if tag == "identity":
        return z
    if tag == "log1p":
        return np.expm1(z)
    raise ConfigError(f"unknown transform {tag!r}")


def invert_predictions(output, tag):
    """Map a model-scale output back to the label scale.

    The location goes through ``expm1`` (a median-style back-transform, no
    variance correction) and the scale through the local slope of ``expm1``.
    Intervals should come from :func:`prediction_interval`, which maps the
    endpoints and therefore keeps coverage exact.
    """
    if tag == "identity":
        return output
    mu, sigma, nu, mask = output.arrays()
    inv_mu = inverse_transform(mu, tag)
    inv_sigma = None if sigma is None else Tensor(sigma * np.exp(mu))
    return PredictiveOutput(output.family, Tensor(inv_mu), inv_sigma, None if nu is None else Tensor(nu), mask)


def prediction_interval(output, z, tag):
    """Label-scale ``(lower, upper)`` of the model-scale interval ``mu +/- z sigma``."""
    mu, sigma, _, _ = output.arrays()
    if sigma is None:
        raise ConfigError("point predictions have no interval")
    return inverse_transform(mu - z * sigma, tag), inverse_transform(mu + z * sigma, tag)


# ---------------------------------------------------------------------------
# inference helpers


def collect_predictions(model, sessions, transform, batch_size=64):
    """Run inference and flatten valid positions.

    Returns ``(records, latent)``: label-scale records and the model-scale
    :class:`PredictiveOutput` over the same flattened positions.
    """
    if not sessions:
        raise ConfigError("no sessions to predict")
    ids, steps, ys, mus, sigmas, nus = [], [], [], [], [], []
    family = model.config.family
    with no_grad():
        for b in make_batches(sessions, batch_size, shuffle=False):
            out = model(b.X, b.mask)
            mu, sigma, nu, mask = out.arrays()
            rows, cols = np.nonzero(mask)
            ids.extend(b.ids[r] for r in rows)
            steps.append(cols)
            ys.append(b.labels[rows])
            mus.append(mu[rows, cols])
            if sigma is not None:
                sigmas.append(sigma[rows, cols])
            if nu is not None:
                nus.append(nu[rows, cols])
    mu = np.concatenate(mus)
    sigma = np.concatenate(sigmas) if sigmas else None
    nu = np.concatenate(nus) if nus else None
    latent = PredictiveOutput(
        family,
        Tensor(mu),
        None if sigma is None else Tensor(sigma),
        None if nu is None else Tensor(nu),
        np.ones(mu.shape, dtype=bool),
    )
    inv = invert_predictions(latent, transform)
    records = PredictionRecords(
        session=np.array(ids, dtype=object),
        t=np.concatenate(steps).astype(np.int64),
        y=np.concatenate(ys),
        mu=inv.mu.data,
        sigma=None if inv.sigma is None else inv.sigma.data,
        nu=nu,
    )
    return records, latent


def evaluate(model, sessions, transform, batch_size=64):
    """MAE / RMSE (and NLL when probabilistic) on the original label scale."""
    records, latent = collect_predictions(model, sessions, transform, batch_size)
    metrics = point_metrics(records.y, records.mu)
    if latent.sigma is not None:
        metrics["nll"] = eval_nll(records.y, latent, transform)
    return metrics


# ---------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    model: object
    history: list
    best_epoch: int
    best_dev_mae: float
    stopped_early: bool


def _inverse_softplus(x):
    return x + math.log(-math.expm1(-x))


def _init_output_bias(model, train, transform):
    z = transform_targets([s.label for s in train], transform)
    model.mu_head.layers[-1].bias.data = np.full(1, float(z.mean()))
    if model.sigma_head is not None:
        scale = max(float(z.std()), 10 * model.config.epsilon)
        model.sigma_head.layers[-1].bias.data = np.full(1, _inverse_softplus(scale))


def fit(model, sessions, cfg: TrainConfig):
    """Train on the ``train`` split, early-stop on ``dev`` MAE, restore the best epoch."""
    groups = by_split(sessions)
    train, dev = groups["train"], groups["dev"]
    if not train or not dev:
        raise ConfigError("fit needs non-empty train and dev splits")
    if cfg.loss in ("gaussian_nll", "student_t_nll") and model.sigma_head is None:
        raise ConfigError(f"{cfg.loss} needs a model with a variance head")
    if cfg.loss == "student_t_nll" and model.nu_head is None:
        raise ConfigError("student_t_nll needs family=student_t")

    if cfg.init_output_bias:
        _init_output_bias(model, train, cfg.transform)
    params = model.parameters()
    state = AdamState()
    seq2one = model.config.mode == "seq2one"
    history = []
    best_mae, best_state, best_epoch, since_best = math.inf, model.state_dict(), -1, 0
    stopped_early = False

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        epoch_losses = []
        for batch in make_batches(train, cfg.batch_size, seed=(cfg.seed, epoch)):
            out = model(batch.X, batch.mask)
            z = transform_targets(batch.labels, cfg.transform)[:, None]
            per_session = sequence_loss(cfg.loss, z, out, cfg.weights)
            lengths = np.ones(len(batch)) if seq2one else batch.lengths
            loss = batch_loss(per_session, lengths)
            if not np.isfinite(loss.data).all():
                raise NumericFault(f"non-finite training loss at epoch {epoch}")
            model.zero_grad()
            backward(loss)
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state, lr)
            epoch_losses.append(loss.item())

        dev_metrics = evaluate(model, dev, cfg.transform, cfg.eval_batch_size)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "dev_mae": dev_metrics["mae"],
            "dev_rmse": dev_metrics["rmse"],
            "lr": lr,
        }
        history.append(row)
        log.debug("epoch %d loss %.4f dev_mae %.4f", epoch, row["train_loss"], row["dev_mae"])
        if row["dev_mae"] < best_mae:
            best_mae, best_state, best_epoch, since_best = row["dev_mae"], model.state_dict(), epoch, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped_early = True
                break

    model.load_state_dict(best_state)
    return FitResult(model, history, best_epoch, best_mae, stopped_early)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
