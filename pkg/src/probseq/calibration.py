"""Uncertainty diagnostics over flat prediction records.

Two "ECE" flavours are provided and kept apart by name:

* :func:`ece_binned` - equal-count bins over predicted sigma, comparing each
  bin's mean sigma with its mean absolute error;
* :func:`ece_coverage` - mean gap between nominal confidence levels and the
  empirical coverage of the matching central intervals.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import (
    ContractError,
    InsufficientDataError,
    SchemaError,
    UndefinedCorrelationError,
    UnsupportedMetricError,
)

DEFAULT_LEVELS = (0.5, 0.68, 0.8, 0.9, 0.95)
CONVENTIONS = ("quantile", "sigma")


@dataclass
class PredictionRecords:
    """Column store of per-step (or per-session) predictions on the label scale."""

    session: np.ndarray
    t: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray | None = None
    nu: np.ndarray | None = None

    def __post_init__(self):
        self.session = np.asarray(self.session, dtype=object)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        n = len(self.y)
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=np.float64)
            if not (self.sigma > 0).all():
                raise SchemaError("record sigma must be positive")
        if self.nu is not None:
            self.nu = np.asarray(self.nu, dtype=np.float64)
        for name in ("session", "t", "mu", "sigma", "nu"):
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise SchemaError(f"column {name} has {len(col)} rows, expected {n}")

    def __len__(self):
        return len(self.y)

    @property
    def abs_error(self):
        return np.abs(self.y - self.mu)

    def columns(self):
        cols = ["session", "t", "y", "mu"]
        if self.sigma is not None:
            cols.append("sigma")
        if self.nu is not None:
            cols.append("nu")
        return cols

    def to_csv(self, path):
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for i in range(len(self)):
                row = [self.session[i], int(self.t[i])]
                row += [repr(float(getattr(self, c)[i])) for c in cols[2:]]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"session", "t", "y", "mu"} - set(reader.fieldnames or ())
            if missing:
                raise SchemaError(f"{path}: missing columns {sorted(missing)}")
            rows = list(reader)
        has_sigma = "sigma" in reader.fieldnames
        has_nu = "nu" in reader.fieldnames
        return cls(
            session=[r["session"] for r in rows],
            t=[int(r["t"]) for r in rows],
            y=[float(r["y"]) for r in rows],
            mu=[float(r["mu"]) for r in rows],
            sigma=[float(r["sigma"]) for r in rows] if has_sigma else None,
            nu=[float(r["nu"]) for r in rows] if has_nu else None,
        )


def _require_sigma(records):
    if records.sigma is None:
        raise UnsupportedMetricError("records carry no sigma; calibration metrics need a predictive spread")


def _require_records(records, minimum):
    if len(records) < minimum:
        raise InsufficientDataError(f"need at least {minimum} records, got {len(records)}")


def z_value(level, nu=None, convention="quantile"):
    """Half-width multiplier of the central interval at ``level``.

    With ``convention="sigma"`` the 68% level uses exactly one sigma; every
    other level, and Student-t records, use exact quantiles.
    """
    if not 0 < level < 1:
        raise ContractError(f"confidence level must lie in (0, 1), got {level}")
    if convention not in CONVENTIONS:
        raise ContractError(f"unknown interval convention {convention!r}")
    tail = 0.5 * (1.0 + level)
    if nu is not None:
        return stats.t.ppf(tail, nu)
    if convention == "sigma" and abs(level - 0.68) < 1e-12:
        return 1.0
    return float(stats.norm.ppf(tail))


def coverage(records, level, convention="quantile"):
    """Fraction of labels inside the central interval ``mu +/- z(level) sigma``."""
    _require_sigma(records)
    if len(records) == 0:
        return float("nan")
    z = z_value(level, records.nu, convention)
    return float(np.mean(records.abs_error <= z * records.sigma))


def ece_coverage(records, levels=DEFAULT_LEVELS, convention="quantile"):
    _require_sigma(records)
    _require_records(records, 2)
    return float(np.mean([abs(coverage(records, q, convention) - q) for q in levels]))


def _equal_count_bins(records, n_bins):
    if n_bins < 2:
        raise ContractError("n_bins must be >= 2")
    # ties in sigma are broken by error so the binning ignores record order
    order = np.lexsort((records.abs_error, records.sigma))
    return [b for b in np.array_split(order, min(n_bins, len(records))) if len(b)]


def binned_calibration(records, n_bins=10):
    """Rows of (bin, count, mean_sigma, mean_abs_error) over equal-count sigma bins."""
    _require_sigma(records)
    _require_records(records, 2)
    err = records.abs_error
    return [
        {
            "bin": i,
            "count": int(len(idx)),
            "mean_sigma": float(records.sigma[idx].mean()),
            "mean_abs_error": float(err[idx].mean()),
        }
        for i, idx in enumerate(_equal_count_bins(records, n_bins))
    ]


def ece_binned(records, n_bins=10):
    rows = binned_calibration(records, n_bins)
    total = sum(r["count"] for r in rows)
    return float(sum(r["count"] / total * abs(r["mean_sigma"] - r["mean_abs_error"]) for r in rows))


def coverage_curve(records, levels=None, convention="quantile"):
    levels = np.round(np.linspace(0.05, 0.95, 19), 10) if levels is None else levels
    return [{"level": float(q), "coverage": coverage(records, q, convention)} for q in levels]


def error_uncertainty_correlation(records):
    """Pearson r and Spearman rho (average ranks) between sigma and |error|."""
    _require_sigma(records)
    _require_records(records, 3)
    s, e = records.sigma, records.abs_error
    if np.ptp(s) == 0 or np.ptp(e) == 0:
        raise UndefinedCorrelationError("sigma or |error| has zero variance")
    pearson = float(np.corrcoef(s, e)[0, 1])
    spearman = float(np.corrcoef(stats.rankdata(s), stats.rankdata(e))[0, 1])
    return float(np.clip(pearson, -1, 1)), float(np.clip(spearman, -1, 1))


def sharpness(records, n_hist=20):
    _require_sigma(records)
    s = records.sigma
    counts, edges = np.histogram(s, bins=n_hist)
    return {
        "mean_sigma": float(s.mean()),
        "std_sigma": float(s.std()),
        "quantiles": {str(q): float(np.quantile(s, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95)},
        "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
    }


def temporal_curves(records):
    """Per-timestep support count, mean sigma and mean |error|."""
    _require_sigma(records)
    err = records.abs_error
    rows = []
    for t in np.unique(records.t):
        idx = records.t == t
        rows.append(
            {
                "t": int(t),
                "count": int(idx.sum()),
                "mean_sigma": float(records.sigma[idx].mean()),
                "mean_abs_error": float(err[idx].mean()),
            }
        )
    return rows


def session_summary(records):
    """Per-session MAE and mean sigma, ordered by session id."""
    _require_sigma(records)
    err = records.abs_error
    out = {}
    for sid in sorted(set(records.session)):
        idx = records.session == sid
        out[sid] = {"mae": float(err[idx].mean()), "mean_sigma": float(records.sigma[idx].mean())}
    return out


def trajectory(records, session_id):
    idx = np.nonzero(records.session == session_id)[0]
    idx = idx[np.argsort(records.t[idx], kind="stable")]
    return [
        {"t": int(records.t[i]), "mu": float(records.mu[i]), "sigma": float(records.sigma[i]), "y": float(records.y[i])}
        for i in idx
    ]


def select_case_studies(records):
    """Pick the well-calibrated, high-error/high-uncertainty and best-predicted sessions."""
    summary = session_summary(records)
    if not summary:
        raise InsufficientDataError("no sessions in records")
    ids = list(summary)  # sorted, so ties resolve to the smallest id
    picks = {
        "well_calibrated": min(ids, key=lambda s: abs(summary[s]["mean_sigma"] - summary[s]["mae"])),
        "high_error_high_uncertainty": max(ids, key=lambda s: summary[s]["mae"] * summary[s]["mean_sigma"]),
        "best_predicted": min(ids, key=lambda s: summary[s]["mae"]),
    }
    return {
        role: {"session": sid, **summary[sid], "trajectory": trajectory(records, sid)}
        for role, sid in picks.items()
    }


@dataclass
class CalibrationReport:
    n_records: int
    ece_binned: float
    ece_coverage: float
    coverage: dict
    sharpness: dict
    pearson_r: float | None
    spearman_rho: float | None
    temporal: list = field(default_factory=list)
    case_studies: dict = field(default_factory=dict)
    levels: tuple = DEFAULT_LEVELS
    convention: str = "quantile"

    def to_dict(self):
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d


def calibration_report(records, n_bins=10, levels=DEFAULT_LEVELS, convention="quantile"):
    _require_sigma(records)
    _require_records(records, 2)
    try:
        pearson, spearman = error_uncertainty_correlation(records)
    except InsufficientDataError:
        pearson = spearman = None
    return CalibrationReport(
        n_records=len(records),
        ece_binned=ece_binned(records, n_bins),
        ece_coverage=ece_coverage(records, levels, convention),
        coverage={str(q): coverage(records, q, convention) for q in levels},
        sharpness=sharpness(records),
        pearson_r=pearson,
        spearman_rho=spearman,
        temporal=temporal_curves(records),
        case_studies=select_case_studies(records),
        levels=tuple(levels),
        convention=convention,
    )


def gaussian_records(y, mu, sigma, session=None, t=None):
    """Convenience constructor for synthetic checks."""
    n = len(y)
    return PredictionRecords(
        session=np.array([f"r{i}" for i in range(n)], dtype=object) if session is None else session,
        t=np.zeros(n, dtype=np.int64) if t is None else t,
        y=y,
        mu=mu,
        sigma=sigma,
    )

