"""Automatic acceptability grading and contingency-table statistics.

Geometry follows the clinician rules: after aligning with the predicted
parameters, the true chest center must fall in the central 10% of the
canvas, the rendered chest extent must span 80-100% of the canvas
width, the rotation error must be at most 10 degrees, and all four true
landmarks must land inside the canvas.  Mask quality is a recall /
precision proxy.  Cohort comparisons use Pearson's chi-squared on a
2x2 table without continuity correction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import IoFailure, ShapeMismatch, ToolkitError
from .geometry import (
    InvalidParams,
    LandmarkSet,
    SimilarityParams,
    alignment_from_params,
    wrap_angle_deg,
)
from .raster import BinaryMask

CENTER_FRACTION = 0.10     # central box side as a fraction of canvas
SIZE_LO, SIZE_HI = 0.80, 1.00
ANGLE_TOL_DEG = 10.0
RECALL_THRESHOLD = 0.95
PRECISION_THRESHOLD = 0.50


class DegenerateTable(ToolkitError):
    pass


@dataclass(frozen=True)
class GeoVerdict:
    center_ok: bool
    size_ok: bool
    angle_ok: bool
    coverage_ok: bool
    # diagnostics behind the flags
    center_err: float    # Chebyshev distance of the aligned true center from canvas middle, px
    size_ratio: float    # rendered chest extent as a fraction of canvas width
    angle_err: float     # |wrapped prediction - truth|, degrees

    @property
    def acceptable(self) -> bool:
        return self.center_ok and self.size_ok and self.angle_ok and self.coverage_ok


@dataclass(frozen=True)
class MaskVerdict:
    recall: float
    precision: float
    recall_threshold: float = RECALL_THRESHOLD
    precision_threshold: float = PRECISION_THRESHOLD

    @property
    def acceptable(self) -> bool:
        return (self.recall >= self.recall_threshold
                and self.precision >= self.precision_threshold)


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Rows are cohorts (control, experimental); columns acceptable/not."""

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self) -> None:
        counts = (self.a, self.b, self.c, self.d)
        if any(not isinstance(v, (int, np.integer)) or v < 0 for v in counts):
            raise ValueError(f"counts must be non-negative integers, got {counts}")
        if sum(counts) == 0:
            raise ValueError("table total must be positive")

    @property
    def total(self) -> int:
        return self.a + self.b + self.c + self.d


@dataclass(frozen=True)
class ImageVerdict:
    image_id: str
    cohort: str            # "control" or "experimental"
    geo: GeoVerdict
    mask: MaskVerdict


def check_geometry(pred: SimilarityParams, truth: SimilarityParams,
                   truth_landmarks: LandmarkSet, canvas: int) -> GeoVerdict:
    """Grade one prediction against ground truth on a square canvas."""
    if canvas < 1:
        raise InvalidParams(f"canvas must be >= 1, got {canvas}")
    align = alignment_from_params(pred, canvas, canvas)
    mid = canvas / 2.0

    cx, cy = align.apply_xy(truth.cx, truth.cy)
    center_err = max(abs(cx - mid), abs(cy - mid))
    center_ok = center_err <= (CENTER_FRACTION / 2.0) * canvas

    # alignment scales by 0.9*canvas/pred.size, so the rendered chest extent
    # is 0.9*truth.size/pred.size of the canvas; the quotient is taken first
    # so that pred == truth lands on 0.9 exactly
    size_ratio = 0.9 * (truth.size / pred.size)
    size_ok = SIZE_LO <= size_ratio <= SIZE_HI

    angle_err = abs(wrap_angle_deg(pred.theta - truth.theta))
    angle_ok = angle_err <= ANGLE_TOL_DEG

    lo, hi = -0.5, canvas - 0.5  # physical canvas extent in pixel-center coords
    coverage_ok = True
    for p in (truth_landmarks.top, truth_landmarks.bottom,
              truth_landmarks.left, truth_landmarks.right):
        qx, qy = align.apply_xy(p.x, p.y)
        if not (lo <= qx <= hi and lo <= qy <= hi):
            coverage_ok = False
            break

    return GeoVerdict(center_ok=center_ok, size_ok=size_ok, angle_ok=angle_ok,
                      coverage_ok=coverage_ok, center_err=center_err,
                      size_ratio=size_ratio, angle_err=angle_err)


def check_mask(pred, truth: BinaryMask,
               recall_threshold: float = RECALL_THRESHOLD,
               precision_threshold: float = PRECISION_THRESHOLD) -> MaskVerdict:
    """Compare a predicted mask (logits thresholded at 0, or bits) with truth.

    Recall is 1 when the truth is empty; precision is 1 when the
    prediction is empty.
    """
    if isinstance(pred, BinaryMask):
        pred_bits = pred.bits.astype(bool)
    else:
        arr = np.asarray(pred)
        if arr.ndim == 3 and arr.shape[0] == 1:
            arr = arr[0]
        pred_bits = arr > 0
    truth_bits = truth.bits.astype(bool)
    if pred_bits.shape != truth_bits.shape:
        raise ShapeMismatch(
            f"prediction shape {pred_bits.shape} != truth shape {truth_bits.shape}")

    tp = int(np.count_nonzero(pred_bits & truth_bits))
    n_truth = int(np.count_nonzero(truth_bits))
    n_pred = int(np.count_nonzero(pred_bits))
    recall = tp / n_truth if n_truth else 1.0
    precision = tp / n_pred if n_pred else 1.0
    return MaskVerdict(recall=recall, precision=precision,
                       recall_threshold=recall_threshold,
                       precision_threshold=precision_threshold)


def chisq_2x2(t: ContingencyTable2x2) -> tuple[float, float]:
    """Pearson statistic and p-value (1 df, no continuity correction).

    p = erfc(sqrt(stat/2)), the chi-squared(1) survival function.
    """
    row0, row1 = t.a + t.b, t.c + t.d
    col0, col1 = t.a + t.c, t.b + t.d
    if min(row0, row1, col0, col1) == 0:
        raise DegenerateTable(f"zero marginal in table {(t.a, t.b, t.c, t.d)}")
    n = t.total
    stat = 0.0
    for obs, row, col in ((t.a, row0, col0), (t.b, row0, col1),
                          (t.c, row1, col0), (t.d, row1, col1)):
        expected = row * col / n
        stat += (obs - expected) ** 2 / expected
    return stat, math.erfc(math.sqrt(stat / 2.0))


def table_from_flags(control: Iterable[bool],
                     experimental: Iterable[bool]) -> ContingencyTable2x2:
    ctrl = list(control)
    expr = list(experimental)
    return ContingencyTable2x2(a=sum(ctrl), b=len(ctrl) - sum(ctrl),
                               c=sum(expr), d=len(expr) - sum(expr))


@dataclass(frozen=True)
class CohortSummary:
    cohort: str
    total: int
    geo_acceptable: int
    mask_acceptable: int

    @property
    def geo_pct(self) -> float:
        return 100.0 * self.geo_acceptable / self.total

    @property
    def mask_pct(self) -> float:
        return 100.0 * self.mask_acceptable / self.total


@dataclass(frozen=True)
class CohortReport:
    control: CohortSummary
    experimental: CohortSummary
    geometry_table: ContingencyTable2x2
    mask_table: ContingencyTable2x2
    geometry_chisq: tuple[float, float] | None   # None when a marginal is zero
    mask_chisq: tuple[float, float] | None


def cohort_report(verdicts: Iterable[ImageVerdict]) -> CohortReport:
    """Aggregate per-image verdicts into proportions, tables, and tests."""
    by_cohort: dict[str, list[ImageVerdict]] = {"control": [], "experimental": []}
    for v in verdicts:
        if v.cohort not in by_cohort:
            raise ValueError(f"unknown cohort {v.cohort!r} for image {v.image_id!r}")
        by_cohort[v.cohort].append(v)
    for name, group in by_cohort.items():
        if not group:
            raise ValueError(f"cohort {name!r} is empty")

    summaries = {}
    for name, group in by_cohort.items():
        summaries[name] = CohortSummary(
            cohort=name, total=len(group),
            geo_acceptable=sum(v.geo.acceptable for v in group),
            mask_acceptable=sum(v.mask.acceptable for v in group))

    geo_table = table_from_flags((v.geo.acceptable for v in by_cohort["control"]),
                                 (v.geo.acceptable for v in by_cohort["experimental"]))
    mask_table = table_from_flags((v.mask.acceptable for v in by_cohort["control"]),
                                  (v.mask.acceptable for v in by_cohort["experimental"]))

    def try_chisq(table):
        try:
            return chisq_2x2(table)
        except DegenerateTable:
            return None

    return CohortReport(control=summaries["control"],
                        experimental=summaries["experimental"],
                        geometry_table=geo_table, mask_table=mask_table,
                        geometry_chisq=try_chisq(geo_table),
                        mask_chisq=try_chisq(mask_table))


def write_report_csv(verdicts: Iterable[ImageVerdict], report: CohortReport,
                     path: str | Path) -> None:
    """Per-image rows followed by a commented summary block."""

    def fmt_chisq(label, result):
        if result is None:
            return [f"# {label}_chisq,degenerate,"]
        stat, p = result
        return [f"# {label}_chisq,{stat:.6g},{p:.6g}"]

    lines: list[str] = []
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "cohort", "center_ok", "size_ok", "angle_ok",
                        "coverage_ok", "recall", "precision", "mask_ok"])
            for v in verdicts:
                w.writerow([v.image_id, v.cohort,
                            int(v.geo.center_ok), int(v.geo.size_ok),
                            int(v.geo.angle_ok), int(v.geo.coverage_ok),
                            f"{v.mask.recall:.6f}", f"{v.mask.precision:.6f}",
                            int(v.mask.acceptable)])
            lines.append("# summary")
            lines.append("# cohort,total,geo_acceptable,geo_pct,mask_acceptable,mask_pct")
            for s in (report.control, report.experimental):
                lines.append(f"# {s.cohort},{s.total},{s.geo_acceptable},"
                             f"{s.geo_pct:.1f},{s.mask_acceptable},{s.mask_pct:.1f}")
            lines.extend(fmt_chisq("geometry", report.geometry_chisq))
            lines.extend(fmt_chisq("mask", report.mask_chisq))
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write report {path}: {exc}") from exc
