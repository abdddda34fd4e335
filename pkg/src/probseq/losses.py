"""Training objectives, their masked reductions, and evaluation metrics.

All training losses return *per-session sums* over valid positions (a scalar
for 1-D input); :func:`batch_loss` divides by the session lengths and
averages over sessions.  Padded positions are excluded with ``where`` on both
the inputs and the per-step terms, so arbitrary garbage (even NaN) in padding
affects neither values nor gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, where
from .errors import ConfigError, DomainError, EmptySessionError, UnsupportedMetricError

LOG_2PI = math.log(2.0 * math.pi)
LOG_PI = math.log(math.pi)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be non-negative")


def _mask_for(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return np.broadcast_to(mask, shape)


def _positive(t, mask, name):
    t = as_tensor(t)
    bad = mask & ~(t.data > 0)
    if bad.any():
        raise DomainError(f"{name} must be positive at valid positions", tuple(int(i) for i in np.argwhere(bad)[0]))
    return where(mask, t, 1.0)


def _residual(y, mu, mask):
    return where(mask, as_tensor(y) - as_tensor(mu), 0.0)


def _reduce(terms, mask):
    return where(mask, terms, 0.0).sum(axis=-1)


def gaussian_nll_weighted(y, mu, sigma, weights=LossWeights(), mask=None):
    """sum_t [alpha log 2pi + beta log sigma_t^2 + gamma (y_t - mu_t)^2 / sigma_t^2].

    Note there are no 1/2 factors: at unit weights this is twice the usual
    Gaussian negative log-likelihood.
    """
    mu = as_tensor(mu)
    mask = _mask_for(mask, mu.shape)
    var = _positive(sigma, mask, "sigma").square()
    delta = _residual(y, mu, mask).square() / var
    terms = weights.beta * var.log() + weights.gamma * delta + weights.alpha * LOG_2PI
    return _reduce(terms, mask)


def student_t_nll(y, mu, sigma, nu, mask=None):
    """sum_t of -log StudentT(y_t | mu_t, sigma_t, nu_t)."""
    mu = as_tensor(mu)
    mask = _mask_for(mask, mu.shape)
    s = _positive(sigma, mask, "sigma")
    n = _positive(nu, mask, "nu")
    z2 = _residual(y, mu, mask).square() / s.square()
    half_np1 = (n + 1.0) * 0.5
    terms = (
        (n * 0.5).lgamma()
        - half_np1.lgamma()
        + 0.5 * (n.log() + LOG_PI)
        + s.log()
        + half_np1 * (z2 / n + 1.0).log()
    )
    return _reduce(terms, mask)


def squared_error_sum(y, mu, mask=None):
    mu = as_tensor(mu)
    mask = _mask_for(mask, mu.shape)
    return _reduce(_residual(y, mu, mask).square(), mask)


def absolute_error_sum(y, mu, mask=None):
    mu = as_tensor(mu)
    mask = _mask_for(mask, mu.shape)
    return _reduce(_residual(y, mu, mask).abs(), mask)


def _masked_mean(total, mask):
    n = int(np.sum(mask))
    if n == 0:
        raise EmptySessionError("no valid positions to average over")
    return total.sum() * (1.0 / n)


def mse_masked(y, mu, mask=None):
    """Mean squared residual over valid positions."""
    mu = as_tensor(mu)
    mask = _mask_for(mask, mu.shape)
    return _masked_mean(squared_error_sum(y, mu, mask), mask)


def mae_masked(y, mu, mask=None):
    mu = as_tensor(mu)
    mask = _mask_for(mask, mu.shape)
    return _masked_mean(absolute_error_sum(y, mu, mask), mask)


def batch_loss(per_session, lengths):
    """(1/B) sum_i L_i / T_i.  Use lengths of 1 for seq2one."""
    lengths = np.asarray(lengths, dtype=np.float64)
    if (lengths < 1).any():
        raise EmptySessionError("every session needs at least one valid position")
    per_session = as_tensor(per_session)
    return (per_session * (1.0 / lengths)).mean()


LOSSES = ("gaussian_nll", "student_t_nll", "mse", "mae")


def sequence_loss(kind, y, output, weights=LossWeights()):
    """Per-session training loss for a model output; ``y`` is broadcast to the output shape."""
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), output.mu.shape)
    if kind == "gaussian_nll":
        if output.sigma is None:
            raise ConfigError("gaussian_nll needs a variance head")
        return gaussian_nll_weighted(y, output.mu, output.sigma, weights, output.mask)
    if kind == "student_t_nll":
        if output.nu is None:
            raise ConfigError("student_t_nll needs a Student-t model")
        return student_t_nll(y, output.mu, output.sigma, output.nu, output.mask)
    if kind == "mse":
        return squared_error_sum(y, output.mu, output.mask)
    if kind == "mae":
        return absolute_error_sum(y, output.mu, output.mask)
    raise ConfigError(f"unknown loss {kind!r}; expected one of {LOSSES}")


# ---------------------------------------------------------------------------
# numpy evaluation metrics


def gaussian_nll_standard(y, mu, sigma):
    """Elementwise -log N(y | mu, sigma^2)."""
    r = (np.asarray(y) - mu) / sigma
    return 0.5 * LOG_2PI + np.log(sigma) + 0.5 * r * r


def student_t_nll_standard(y, mu, sigma, nu):
    z2 = ((np.asarray(y) - mu) / sigma) ** 2
    return (
        ad.lgamma(nu / 2.0)
        - ad.lgamma((nu + 1.0) / 2.0)
        + 0.5 * (np.log(nu) + LOG_PI)
        + np.log(sigma)
        + 0.5 * (nu + 1.0) * np.log1p(z2 / nu)
    )


def eval_nll(y, output, transform="identity"):
    """Mean standard NLL over valid positions, independent of loss weights.

    ``output`` lives on the model's (possibly log1p) scale while ``y`` is on
    the original label scale; under ``log1p`` the density is mapped back with
    its Jacobian, so the value is a proper NLL of the original-scale label.
    """
    if output.sigma is None:
        raise UnsupportedMetricError("NLL needs a predictive sigma; this model emits point predictions")
    mu, sigma, nu, mask = output.arrays()
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), mu.shape)
    mask = np.broadcast_to(mask, mu.shape)
    if not mask.any():
        raise EmptySessionError("no valid positions to evaluate")
    yv = y[mask]
    z = np.log1p(yv) if transform == "log1p" else yv
    if nu is None:
        nll = gaussian_nll_standard(z, mu[mask], sigma[mask])
    else:
        nll = student_t_nll_standard(z, mu[mask], sigma[mask], nu[mask])
    if transform == "log1p":
        nll = nll + np.log1p(yv)
    return float(np.mean(nll))


def point_metrics(y, mu, mask=None):
    """MAE and RMSE over valid positions (numpy)."""
    mu = np.asarray(mu, dtype=np.float64)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), mu.shape)
    mask = _mask_for(mask, mu.shape)
    if not mask.any():
        raise EmptySessionError("no valid positions to evaluate")
    r = (y - mu)[mask]
    return {"mae": float(np.mean(np.abs(r))), "rmse": float(math.sqrt(np.mean(r * r)))}
