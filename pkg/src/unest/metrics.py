"""Segmentation metrics: Dice, symmetric Hausdorff, cohort volumetrics, Bland-Altman.

Conventions
-----------
* Dice of two empty masks is 1.
* Hausdorff runs on boundary voxels (foreground with at least one
  6-connected background neighbour; voxels outside the grid count as
  background), in mm.  Exactly one empty set gives ``inf``; both empty give 0.
* Percentage difference uses the mean of the two volumes as denominator.
* ``r_squared`` is ``1 - SS_res / SS_tot`` with the prediction as estimate of
  the reference, so it can be negative.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

CONVENTIONS = (
    "dsc(empty, empty)=1; hausdorff on 6-connected boundary voxels in mm, inf if exactly one set is empty; "
    "pct_diff = mean 100*|Vp-Vt|/((Vp+Vt)/2); r_squared = 1 - SS_res/SS_tot (pred estimates true); "
    "volumes in cm3; Bland-Altman uses sample SD and limits mean +- 1.96 SD"
)

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


class UndefinedStatisticError(ValueError):
    """A correlation-type statistic was requested on a zero-variance series."""


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"extent mismatch: {np.shape(a)} vs {np.shape(b)}")


def dsc(pred: np.ndarray, true: np.ndarray, k: int = 1) -> float:
    """Dice similarity coefficient of class ``k``."""
    _check_same(pred, true)
    a = np.asarray(pred) == k
    b = np.asarray(true) == k
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, SIX_CONNECTED, border_value=0)


def _directed(a: np.ndarray, b: np.ndarray, tree: cKDTree) -> float:
    """``max_a min_b |a - b|`` with distances evaluated as ``sqrt(sum(d**2))``.

    The tree finds candidate neighbours; the final value is recomputed with the
    explicit formula for every point whose distance is within rounding of the
    maximum, so ties between neighbours cannot perturb the result.
    """
    approx, _ = tree.query(a)
    top = approx.max()
    slack = top * 1e-9 + 1e-12
    best = 0.0
    for i in np.flatnonzero(approx >= top - slack):
        idx = tree.query_ball_point(a[i], approx[i] + slack)
        d = np.sqrt(np.sum((b[idx] - a[i]) ** 2, axis=1)).min()
        best = max(best, float(d))
    return best


def boundary_points(mask: np.ndarray, spacing) -> np.ndarray:
    return np.argwhere(boundary(mask)).astype(np.float64) * np.asarray(spacing, np.float64)


def hausdorff(pred: np.ndarray, true: np.ndarray, k: int = 1, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance in mm between the class-``k`` boundaries."""
    _check_same(pred, true)
    a = boundary_points(np.asarray(pred) == k, spacing)
    b = boundary_points(np.asarray(true) == k, spacing)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return math.inf
    return max(_directed(a, b, cKDTree(b)), _directed(b, a, cKDTree(a)))


def class_volume_cm3(labels: np.ndarray, k: int, spacing) -> float:
    return float(np.count_nonzero(np.asarray(labels) == k)) * float(np.prod(spacing)) / 1000.0


# ---------------------------------------------------------------------------
# cohort statistics
# ---------------------------------------------------------------------------


def _series(pred, true) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, np.float64)
    t = np.asarray(true, np.float64)
    if p.ndim != 1 or p.shape != t.shape:
        raise ValueError(f"series must be 1D and of equal length, got {p.shape} and {t.shape}")
    if len(p) < 2:
        raise ValueError("series need at least two entries")
    return p, t


def volumetrics(pred_volumes: Sequence[float], true_volumes: Sequence[float]) -> dict[str, float]:
    """Agreement between predicted and reference structure volumes.

    Returns ``r_squared``, ``pearson_r``, ``abs_dev`` (mean absolute
    difference) and ``pct_diff`` (mean symmetric percentage difference).
    """
    p, t = _series(pred_volumes, true_volumes)
    dp, dt = p - p.mean(), t - t.mean()
    ss_p, ss_t = float(np.sum(dp * dp)), float(np.sum(dt * dt))
    if ss_p == 0.0 or ss_t == 0.0:
        raise UndefinedStatisticError("correlation undefined for a zero-variance series")
    pearson = float(np.sum(dp * dt)) / math.sqrt(ss_p * ss_t)
    r_squared = 1.0 - float(np.sum((t - p) ** 2)) / ss_t
    diff = np.abs(p - t)
    mean_pair = (p + t) / 2.0
    pct = np.divide(100.0 * diff, mean_pair, out=np.zeros_like(diff), where=mean_pair != 0)
    return {
        "r_squared": r_squared,
        "pearson_r": pearson,
        "abs_dev": float(diff.mean()),
        "pct_diff": float(pct.mean()),
    }


def bland_altman(a: Sequence[float], b: Sequence[float]) -> dict[str, float]:
    """Mean difference ``a - b``, its sample SD and the 95% limits of agreement."""
    x, y = _series(a, b)
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    return {"mean_diff": mean, "sd_diff": sd, "lower": mean - 1.96 * sd, "upper": mean + 1.96 * sd}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class SubjectRow:
    subject: str
    label: int
    dsc: float
    hd_mm: float
    pred_cm3: float
    true_cm3: float
    present: bool


@dataclass
class MetricsReport:
    rows: list[SubjectRow] = field(default_factory=list)
    classes: tuple[int, ...] = ()
    volumetrics: dict[int, dict[str, float]] = field(default_factory=dict)
    bland_altman: dict[int, dict[str, float]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def class_means(self, k: int) -> tuple[float, float]:
        rows = [r for r in self.rows if r.label == k and r.present]
        if not rows:
            return math.nan, math.nan
        return float(np.mean([r.dsc for r in rows])), float(np.mean([r.hd_mm for r in rows]))

    def subject_means(self, subject: str) -> tuple[float, float]:
        """Mean DSC and HD over the classes present in prediction or reference."""
        rows = [r for r in self.rows if r.subject == subject and r.present]
        if not rows:
            return math.nan, math.nan
        return float(np.mean([r.dsc for r in rows])), float(np.mean([r.hd_mm for r in rows]))

    @property
    def mean_dsc(self) -> float:
        rows = [r for r in self.rows if r.present]
        return float(np.mean([r.dsc for r in rows])) if rows else math.nan

    @property
    def mean_hd(self) -> float:
        rows = [r for r in self.rows if r.present]
        return float(np.mean([r.hd_mm for r in rows])) if rows else math.nan

    def subjects(self) -> list[str]:
        return list(dict.fromkeys(r.subject for r in self.rows))


def evaluate_subject(subject: str, pred: np.ndarray, true: np.ndarray, classes: Sequence[int], spacing) -> list[SubjectRow]:
    _check_same(pred, true)
    rows = []
    for k in classes:
        present = bool(np.any(pred == k) or np.any(true == k))
        rows.append(
            SubjectRow(
                subject=subject,
                label=int(k),
                dsc=dsc(pred, true, k),
                hd_mm=hausdorff(pred, true, k, spacing),
                pred_cm3=class_volume_cm3(pred, k, spacing),
                true_cm3=class_volume_cm3(true, k, spacing),
                present=present,
            )
        )
    return rows


def evaluate_cohort(
    pairs: Mapping[str, tuple[np.ndarray, np.ndarray, Sequence[float]]], classes: Sequence[int]
) -> MetricsReport:
    """``pairs`` maps subject id to ``(pred labels, true labels, spacing)``."""
    report = MetricsReport(classes=tuple(int(k) for k in classes))
    for sid in sorted(pairs):
        pred, true, spacing = pairs[sid]
        report.rows.extend(evaluate_subject(sid, np.asarray(pred), np.asarray(true), classes, spacing))
    for k in report.classes:
        rows = [r for r in report.rows if r.label == k]
        vp = [r.pred_cm3 for r in rows]
        vt = [r.true_cm3 for r in rows]
        try:
            report.volumetrics[k] = volumetrics(vp, vt)
        except ValueError as exc:
            report.notes.append(f"class {k}: volumetrics skipped ({exc})")
        try:
            report.bland_altman[k] = bland_altman(vp, vt)
        except ValueError as exc:
            report.notes.append(f"class {k}: Bland-Altman skipped ({exc})")
    return report


def _fmt(x: float) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def write_per_class_csv(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "class", "dsc", "hd_mm", "pred_cm3", "true_cm3", "present"])
        for r in report.rows:
            w.writerow([r.subject, r.label] + [_fmt(v) for v in (r.dsc, r.hd_mm, r.pred_cm3, r.true_cm3, r.present)])
    return path


SUMMARY_FIELDS = (
    "class", "n", "mean_dsc", "mean_hd_mm", "r_squared", "pearson_r", "abs_dev_cm3", "pct_diff",
    "ba_mean_diff", "ba_sd_diff", "ba_lower", "ba_upper",
)


def write_summary_csv(report: MetricsReport, path: str | Path) -> Path:
    """Cohort summary per class plus an ``all`` row; the first line records the conventions."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CONVENTIONS}\n")
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for k in report.classes:
            d, h = report.class_means(k)
            v = report.volumetrics.get(k, {})
            ba = report.bland_altman.get(k, {})
            n = sum(1 for r in report.rows if r.label == k and r.present)
            w.writerow(
                [k, n]
                + [_fmt(x) for x in (d, h)]
                + [_fmt(v.get(key, math.nan)) for key in ("r_squared", "pearson_r", "abs_dev", "pct_diff")]
                + [_fmt(ba.get(key, math.nan)) for key in ("mean_diff", "sd_diff", "lower", "upper")]
            )
        n_all = sum(1 for r in report.rows if r.present)
        w.writerow(["all", n_all, _fmt(report.mean_dsc), _fmt(report.mean_hd)] + ["nan"] * 8)
    return path


def write_volume_points_csv(report: MetricsReport, path: str | Path) -> Path:
    """Per subject and class: volumes, their mean and difference (scatter and Bland-Altman inputs)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "class", "pred_cm3", "true_cm3", "mean_cm3", "diff_cm3"])
        for r in report.rows:
            w.writerow(
                [r.subject, r.label]
                + [_fmt(x) for x in (r.pred_cm3, r.true_cm3, (r.pred_cm3 + r.true_cm3) / 2, r.pred_cm3 - r.true_cm3)]
            )
    return path
