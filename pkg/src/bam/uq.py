"""Uncertainty metrics: calibration, recalibration, OOD AUROC, composite score."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata
from sklearn.isotonic import isotonic_regression

from .errors import DegenerateCalibration, DegenerateNormalization, NoData, ShapeError

KCAL_PER_EV = 23.06
SCORE_WEIGHTS = (0.25, 0.25, 0.125, 0.125, 0.25)
BAND_QUANTILES = (0.25, 0.5, 0.75, 0.95)


def confidence_levels(m: int = 100) -> np.ndarray:
    """m evenly spaced levels strictly inside (0, 1): (j - 1/2) / m."""
    if m < 1:
        raise ValueError("need at least one level")
    return (np.arange(1, m + 1) - 0.5) / m


@dataclass(frozen=True)
class CalibrationMap:
    """Monotone piecewise-linear map on [0, 1] with 0 -> 0 and 1 -> 1."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
            raise ShapeError("knots need matching 1-D x and y with at least two entries")
        if np.any(np.diff(x) < 0) or np.any(np.diff(y) < 0):
            raise ValueError("knots must be non-decreasing")
        if x[0] != 0 or y[0] != 0 or x[-1] != 1 or y[-1] != 1:
            raise ValueError("endpoints must be pinned at (0, 0) and (1, 1)")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def identity(cls) -> "CalibrationMap":
        return cls(np.array([0.0, 1.0]), np.array([0.0, 1.0]))

    def __call__(self, p):
        return recalibrate_apply(self, p)

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "y": self.y.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationMap":
        return cls(np.array(d["x"]), np.array(d["y"]))


@dataclass(frozen=True)
class ReliabilityCurve:
    levels: np.ndarray
    observed: np.ndarray

    def rows(self):
        return [(float(a), float(b)) for a, b in zip(self.levels, self.observed)]


def _standardized(residuals, predicted_sd):
    r = np.asarray(residuals, dtype=np.float64).reshape(-1)
    sd = np.asarray(predicted_sd, dtype=np.float64).reshape(-1)
    if len(r) == 0:
        raise NoData("no residuals")
    if r.shape != sd.shape:
        raise ShapeError("residuals and predicted_sd differ in length")
    if np.any(sd <= 0):
        raise ValueError("predicted_sd must be positive")
    return r / sd


def cdf_levels(residuals, predicted_sd, cal: Optional[CalibrationMap] = None) -> np.ndarray:
    """Predicted CDF value of each observation, optionally recalibrated."""
    u = norm.cdf(_standardized(residuals, predicted_sd))
    return u if cal is None else recalibrate_apply(cal, u)


def reliability_curve(residuals, predicted_sd, m: int = 100, cal: Optional[CalibrationMap] = None) -> ReliabilityCurve:
    """Observed coverage of the central interval of each nominal mass."""
    u = cdf_levels(residuals, predicted_sd, cal)
    levels = confidence_levels(m)
    dist = np.abs(u - 0.5)
    observed = (dist[None, :] <= levels[:, None] / 2).mean(axis=1)
    return ReliabilityCurve(levels, observed)


def calibration_error(residuals, predicted_sd, m: int = 100, cal: Optional[CalibrationMap] = None) -> float:
    """Mean squared gap between nominal and observed central coverage."""
    curve = reliability_curve(residuals, predicted_sd, m, cal)
    return float(np.mean((curve.levels - curve.observed) ** 2))


def recalibrate_fit(residuals, predicted_sd) -> CalibrationMap:
    """Isotonic map from predicted CDF values to their empirical CDF."""
    u = cdf_levels(residuals, predicted_sd)
    if len(u) < 10:
        raise NoData("recalibration needs at least 10 points")
    if np.ptp(u) == 0:
        raise DegenerateCalibration("all predicted CDF values coincide")
    u = np.sort(u)
    empirical = np.searchsorted(u, u, side="right") / len(u)
    # pool ties first; the solver then works on ordered distinct levels
    xs, inverse, counts = np.unique(u, return_inverse=True, return_counts=True)
    pooled = np.bincount(inverse, weights=empirical) / counts
    ys = isotonic_regression(pooled, sample_weight=counts.astype(np.float64), y_min=0.0, y_max=1.0)
    keep = (xs > 0) & (xs < 1)
    x = np.concatenate([[0.0], xs[keep], [1.0]])
    y = np.concatenate([[0.0], np.clip(ys[keep], 0, 1), [1.0]])
    return CalibrationMap(x, np.maximum.accumulate(y))


def recalibrate_apply(cal: CalibrationMap, p):
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr < 0) | (p_arr > 1)):
        raise ValueError("levels must lie in [0, 1]")
    out = np.interp(p_arr, cal.x, cal.y)
    return float(out) if np.ndim(p) == 0 else out


def auroc(scores_id, scores_ood) -> float:
    """P(OOD score > ID score) with ties counted one half (Mann-Whitney U)."""
    a = np.asarray(scores_id, dtype=np.float64).reshape(-1)
    b = np.asarray(scores_ood, dtype=np.float64).reshape(-1)
    if len(a) == 0 or len(b) == 0:
        raise NoData("both score sets must be non-empty")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[len(a) :].sum() - len(b) * (len(b) + 1) / 2
    return float(u / (len(a) * len(b)))


@dataclass(frozen=True)
class CohortNorm:
    """Min-max bounds for the calibration errors of a cohort of models."""

    e_ce_min: float
    e_ce_max: float
    f_ce_min: float
    f_ce_max: float

    @classmethod
    def from_rows(cls, e_ces: Sequence[float], f_ces: Sequence[float]) -> "CohortNorm":
        if len(e_ces) < 2 or len(f_ces) < 2:
            raise DegenerateNormalization("min-max scaling needs a cohort of at least two models")
        return cls(min(e_ces), max(e_ces), min(f_ces), max(f_ces))

    def scale(self, e_ce: float, f_ce: float):
        if self.e_ce_max <= self.e_ce_min or self.f_ce_max <= self.f_ce_min:
            raise DegenerateNormalization("cohort calibration errors have zero range")
        return (
            (e_ce - self.e_ce_min) / (self.e_ce_max - self.e_ce_min),
            (f_ce - self.f_ce_min) / (self.f_ce_max - self.f_ce_min),
        )


def score_from_normalized(e_rmse_kcal, f_rmse_kcal, e_ce_norm, f_ce_norm, one_minus_auroc, weights=SCORE_WEIGHTS) -> float:
    terms = (e_rmse_kcal, f_rmse_kcal, e_ce_norm, f_ce_norm, one_minus_auroc)
    return float(sum(w * t for w, t in zip(weights, terms)))


def composite_score(e_rmse, f_rmse, e_ce, f_ce, auroc_value, cohort: CohortNorm, weights=SCORE_WEIGHTS) -> float:
    """Lower is better.  RMSEs in eV and eV/A are converted to kcal/mol."""
    e_norm, f_norm = cohort.scale(e_ce, f_ce)
    return score_from_normalized(
        e_rmse * KCAL_PER_EV, f_rmse * KCAL_PER_EV, e_norm, f_norm, 1.0 - auroc_value, weights
    )


def quantile_bands(sd, quantiles=BAND_QUANTILES) -> dict:
    """|e| = sd * q-quantile of the half-normal for each q."""
    sd = np.asarray(sd, dtype=np.float64)
    return {q: sd * norm.ppf(0.5 + q / 2) for q in quantiles}


def error_scatter(predicted_sd, predictions, labels):
    """(sd, |error|) points and the reference bands evaluated at each sd."""
    sd = np.asarray(predicted_sd, dtype=np.float64).reshape(-1)
    err = np.abs(np.asarray(predictions, dtype=np.float64) - np.asarray(labels, dtype=np.float64)).reshape(-1)
    if sd.shape != err.shape:
        raise ShapeError("one predicted sd per error is required")
    return np.column_stack([sd, err]), quantile_bands(sd)


# ---------------------------------------------------------------------------
# report emitters


def metric_lines(metrics: dict) -> str:
    """One JSON object per metric, keys sorted for byte-stable output."""
    return "".join(json.dumps({"metric": k, "value": metrics[k]}, sort_keys=True) + "\n" for k in sorted(metrics))


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()
