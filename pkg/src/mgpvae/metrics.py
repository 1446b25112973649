"""Reconstruction/imputation quality metrics and their aggregation."""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

PSNR_CAP_DB = 99.0  # reported instead of +inf when the error is exactly zero


def mse(a, b) -> float:
    """Mean squared voxel difference, accumulated in float64."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError("mse operands", f"{a.shape}", f"{b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def peak_of(reference) -> float:
    """Default PSNR peak: dynamic range (max - min) of the reference volume."""
    ref = np.asarray(reference, dtype=np.float64)
    return float(ref.max() - ref.min())


def psnr(reference, estimate, peak: float | None = None) -> float:
    """10 log10(peak^2 / mse) in dB, capped at PSNR_CAP_DB for a zero error."""
    if peak is None:
        peak = peak_of(reference)
    if not peak > 0:
        raise ValidationError(f"degenerate reference: peak must be positive, got {peak}")
    err = mse(reference, estimate)
    if err == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / err))


@dataclass
class MetricRow:
    """One imputation outcome: which cell, by which method, at what fidelity."""

    patient: int
    modality: int
    n_present: int
    method: str
    mse: float
    psnr: float
    peak: float


@dataclass
class MethodStats:
    count: int
    mean_psnr: float
    median_psnr: float
    mean_mse: float


@dataclass
class ReportGroup:
    modality: int
    n_present: int
    mean_peak: float
    by_method: dict


@dataclass
class ReportTable:
    methods: list
    groups: list

    def group(self, modality: int, n_present: int) -> ReportGroup | None:
        for g in self.groups:
            if g.modality == modality and g.n_present == n_present:
                return g
        return None

    def method_mean_psnr(self, method: str, n_present: int | None = None) -> float:
        """Mean PSNR over every row of one method, optionally one presence level."""
        values = []
        for g in self.groups:
            if n_present is not None and g.n_present != n_present:
                continue
            stats = g.by_method.get(method)
            if stats is not None:
                values.extend([stats.mean_psnr] * stats.count)
        if not values:
            raise ValidationError(f"no rows for method {method!r}")
        return float(np.mean(values))


def report(rows) -> ReportTable:
    """Group rows by (modality, n_present) with per-method mean/median columns.

    Ordering is deterministic: groups sorted by modality then presence count
    descending, methods alphabetically.  Empty input yields an empty table.
    """
    buckets: dict = {}
    methods = sorted({r.method for r in rows})
    for r in rows:
        buckets.setdefault((r.modality, r.n_present), []).append(r)
    groups = []
    for (modality, n_present) in sorted(buckets, key=lambda k: (k[0], -k[1])):
        group_rows = buckets[(modality, n_present)]
        by_method = {}
        for method in methods:
            sel = [r for r in group_rows if r.method == method]
            if not sel:
                continue
            by_method[method] = MethodStats(
                count=len(sel),
                mean_psnr=float(np.mean([r.psnr for r in sel])),
                median_psnr=float(statistics.median(r.psnr for r in sel)),
                mean_mse=float(np.mean([r.mse for r in sel])),
            )
        groups.append(
            ReportGroup(
                modality=modality,
                n_present=n_present,
                mean_peak=float(np.mean([r.peak for r in group_rows])),
                by_method=by_method,
            )
        )
    return ReportTable(methods=methods, groups=groups)


def render_text(table: ReportTable) -> str:
    """Aligned plain-text rendering of a report table.

    PSNR uses each reference volume's dynamic range as the peak; the group
    mean of that peak is printed so the absolute dB values stay interpretable.
    """
    if not table.groups:
        return "(no metric rows)\n"
    header = f"{'modality':>8} {'present':>7} {'peak':>7}"
    for m in table.methods:
        header += f" | {m + ' psnr':>14} {'median':>8} {'mse':>10} {'n':>3}"
    lines = [header, "-" * len(header)]
    for g in table.groups:
        line = f"{g.modality:>8d} {g.n_present:>7d} {g.mean_peak:>7.3f}"
        for m in table.methods:
            s = g.by_method.get(m)
            if s is None:
                line += f" | {'-':>14} {'-':>8} {'-':>10} {'-':>3}"
            else:
                line += f" | {s.mean_psnr:>14.3f} {s.median_psnr:>8.3f} {s.mean_mse:>10.5f} {s.count:>3d}"
        lines.append(line)
    return "\n".join(lines) + "\n"
