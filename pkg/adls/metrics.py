"""Depth-completion metrics, variance/error correlation and sampler utility analysis.

Depths are meters internally; RMSE and MAE are reported in millimeters.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field

from adls.errors import DataError, DimensionError, DomainError, EmptySceneError, UndefinedCorrelationError
from adls.models import DepthMap, VarianceMap

DELTA1_THRESHOLD = 1.25
POOLED_ID = "__pooled__"

METRIC_COLUMNS = ["scene_id", "sampler", "budget", "phases", "rmse_mm", "mae_mm", "rel", "delta1", "seed"]


class MetricReport(BaseModel):
    rmse: float = Field(ge=0)     # mm
    mae: float = Field(ge=0)      # mm
    rel: float = Field(ge=0)
    delta1: float = Field(ge=0, le=1)
    n_pixels: int = Field(ge=1)

    def row(self, scene_id: str, sampler: str = "-", budget: object = "-", phases: object = "-",
            seed: object = "-") -> dict[str, object]:
        return {
            "scene_id": scene_id,
            "sampler": sampler,
            "budget": budget,
            "phases": phases,
            "rmse_mm": f"{self.rmse:.6f}",
            "mae_mm": f"{self.mae:.6f}",
            "rel": f"{self.rel:.8f}",
            "delta1": f"{self.delta1:.8f}",
            "seed": seed,
        }


def _valid_pairs(pred: DepthMap, gt: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction is {pred.width}x{pred.height}, ground truth is {gt.width}x{gt.height}")
    g = gt.values[gt.valid]
    if np.any(g <= 0):
        raise DataError("ground truth depth must be positive at valid pixels")
    if not np.all(pred.valid[gt.valid]):
        raise DataError("prediction is missing at valid ground-truth pixels")
    p = pred.values[gt.valid]
    if not np.all(np.isfinite(p)) or np.any(p <= 0):
        raise DataError("prediction must be finite and positive at valid ground-truth pixels")
    return p, g


def _report(p: np.ndarray, g: np.ndarray) -> MetricReport:
    if g.size == 0:
        raise EmptySceneError("no valid ground-truth pixels to evaluate")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricReport(
        rmse=float(np.sqrt(np.mean(diff ** 2))) * 1000.0,
        mae=float(np.mean(np.abs(diff))) * 1000.0,
        rel=float(np.mean(np.abs(diff) / g)),
        delta1=float(np.mean(ratio < DELTA1_THRESHOLD)),
        n_pixels=int(g.size),
    )


def evaluate(pred: DepthMap, gt: DepthMap) -> MetricReport:
    """RMSE, MAE, REL and delta1 over the valid ground-truth pixels."""
    return _report(*_valid_pairs(pred, gt))


def evaluate_pooled(pairs: Iterable[tuple[DepthMap, DepthMap]]) -> MetricReport:
    """Corpus metrics over every valid pixel of every (prediction, ground truth) pair."""
    ps, gs = [], []
    for pred, gt in pairs:
        p, g = _valid_pairs(pred, gt)
        ps.append(p)
        gs.append(g)
    if not ps:
        raise EmptySceneError("no scenes to evaluate")
    return _report(np.concatenate(ps), np.concatenate(gs))


def variance_error_correlation(variance: VarianceMap | np.ndarray, sq_error: np.ndarray) -> float:
    """Pearson r between variance and squared error over their joint finite support.

    A VarianceMap contributes only its support; off-support and non-finite
    entries of either input are skipped.
    """
    v = variance.to_array() if isinstance(variance, VarianceMap) else np.asarray(variance, dtype=np.float64)
    e = np.asarray(sq_error, dtype=np.float64)
    if v.shape != e.shape:
        raise DimensionError(f"variance shape {v.shape} does not match error shape {e.shape}")
    joint = np.isfinite(v) & np.isfinite(e)
    v, e = v[joint], e[joint]
    if v.size < 2:
        raise UndefinedCorrelationError(f"need at least 2 pixels, got {v.size}")
    dv, de = v - v.mean(), e - e.mean()
    denom = math.sqrt(float(np.dot(dv, dv)) * float(np.dot(de, de)))
    if denom == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant series")
    return float(np.clip(np.dot(dv, de) / denom, -1.0, 1.0))


class UtilityTriple(BaseModel):
    """Expected utility of one draw under probability matching, uniform and greedy sampling."""
    u_pm: float = Field(ge=0)
    u_rnd: float = Field(ge=0)
    u_max: float = Field(ge=0)
    degenerate: bool = False


def utility_analysis(u: Sequence[float] | np.ndarray) -> UtilityTriple:
    """u_pm = sum(u^2)/sum(u), u_rnd = mean(u), u_max = max(u); all zero flags `degenerate`."""
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.size == 0:
        raise DomainError("utility vector is empty")
    if not np.all(np.isfinite(u)) or np.any(u < 0):
        raise DomainError("utilities must be finite and non-negative")
    total = float(u.sum())
    if total == 0:
        return UtilityTriple(u_pm=0.0, u_rnd=0.0, u_max=0.0, degenerate=True)
    return UtilityTriple(
        u_pm=float(np.dot(u, u)) / total,
        u_rnd=total / u.size,
        u_max=float(u.max()),
    )


def mean_pairwise_l1(rows: np.ndarray, cols: np.ndarray) -> float:
    """Mean L1 distance over all unordered pairs of pixels; 0 for fewer than two.

    Per axis, sum_{i<j} |a_i - a_j| = sum_k a_(k) * (2k - n + 1) over the sorted values.
    """
    rows = np.sort(np.asarray(rows, dtype=np.float64))
    cols = np.sort(np.asarray(cols, dtype=np.float64))
    n = rows.size
    if n < 2:
        return 0.0
    weights = 2 * np.arange(n) - n + 1
    return float((np.dot(rows, weights) + np.dot(cols, weights)) / (n * (n - 1) / 2))


def budget_for_target_rmse(budgets: Sequence[float], rmses_mm: Sequence[float], target_mm: float) -> float:
    """Budget reaching `target_mm`, from a least-squares fit of log(rmse) on log(budget)."""
    b = np.asarray(budgets, dtype=np.float64)
    r = np.asarray(rmses_mm, dtype=np.float64)
    if b.shape != r.shape:
        raise DataError("budgets and RMSEs must pair up")
    if np.any(b <= 0) or np.any(r <= 0) or target_mm <= 0:
        raise DataError("budgets and RMSEs must be positive")
    if np.unique(b).size < 2:
        raise DataError("need at least two distinct budgets to interpolate")
    slope, intercept = np.polyfit(np.log(b), np.log(r), 1)
    if slope >= 0:
        raise DataError(f"RMSE does not decrease with budget (log-log slope {slope:.3f})")
    return float(np.exp((math.log(target_mm) - intercept) / slope))


def write_rows(path: Path, rows: Iterable[dict[str, object]], columns: Sequence[str], append: bool = False) -> None:
    """Write CSV rows; a header goes first unless appending to a non-empty file."""
    header = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerows(rows)


def read_rows(path: Path) -> list[dict[str, str]]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
