"""Evaluation metrics, height-bin error statistics and frequency profiles."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BIN_EDGES = (1.5, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, math.inf)
FAP_BINS = 32


def _valid_pairs(pred, target, valid=None):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    if valid is None:
        return pred.ravel(), target.ravel()
    valid = np.asarray(valid, dtype=bool)
    return pred[valid], target[valid]


@dataclass
class BasicMetrics:
    mae: float
    rmse: float
    r2: float | None
    rmae: float
    n: int


def basic_metrics(pred, target, valid=None) -> BasicMetrics:
    """MAE, RMSE, R^2 and relative MAE (mean of |e| / y) over valid pixels.

    R^2 is ``None`` when the targets have zero variance.
    """
    p, y = _valid_pairs(pred, target, valid)
    if p.size < 2:
        raise ValueError("at least two valid pixels are required")
    e = p - y
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = float(1.0 - np.sum(e ** 2) / ss_tot) if ss_tot > 0 else None
    return BasicMetrics(
        mae=float(np.mean(np.abs(e))),
        rmse=float(np.sqrt(np.mean(e ** 2))),
        r2=r2,
        rmae=float(np.mean(np.abs(e) / y)),
        n=int(p.size),
    )


@dataclass
class HeightBin:
    lo: float
    hi: float
    count: int
    fraction: float
    median: float | None = None
    q1: float | None = None
    q3: float | None = None
    whisker_lo: float | None = None
    whisker_hi: float | None = None

    @property
    def label(self) -> str:
        return f">{self.lo:g}" if math.isinf(self.hi) else f"{self.lo:g}-{self.hi:g}"


def box_stats(errors: np.ndarray) -> dict:
    """Median, quartiles (linear interpolation) and 1.5 IQR whiskers."""
    q1, med, q3 = np.percentile(errors, [25, 50, 75])
    iqr = q3 - q1
    inside = errors[(errors >= q1 - 1.5 * iqr) & (errors <= q3 + 1.5 * iqr)]
    return {"median": float(med), "q1": float(q1), "q3": float(q3),
            "whisker_lo": float(inside.min()), "whisker_hi": float(inside.max())}


def bin_errors(pred, target, valid=None, edges=BIN_EDGES) -> list[HeightBin]:
    """Signed errors grouped by reference-height bin ``[lo, hi)``."""
    p, y = _valid_pairs(pred, target, valid)
    return _bins_from_errors(p - y, y, edges)


def _bins_from_errors(e, y, edges):
    which = np.digitize(y, edges) - 1  # -1 below the first edge
    in_range = (which >= 0) & (which < len(edges) - 1)
    total = int(in_range.sum())
    bins = []
    for k in range(len(edges) - 1):
        errs = e[which == k]
        b = HeightBin(edges[k], edges[k + 1], int(errs.size), errs.size / total if total else 0.0)
        if errs.size:
            for name, value in box_stats(errs).items():
                setattr(b, name, value)
        bins.append(b)
    return bins


@dataclass
class FAPProfile:
    frequency: np.ndarray
    value: np.ndarray


def fap(img, n_bins: int | None = None) -> FAPProfile:
    """Normalized log frequency attenuation profile of a square image.

    Mean DFT magnitude over annuli of normalized radial frequency
    ``f / f_Nyquist`` in ``(0, 1]`` (the DC term is in no annulus), divided by
    the lowest annulus and taken in log10, so the first value is 0.
    ``n_bins`` defaults to 32, capped at ``side // 2`` so no annulus is empty.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"FAP needs a square image, got shape {img.shape}; resample it first")
    n = img.shape[0]
    if n < 8:
        raise ValueError("FAP needs an image side of at least 8 pixels")
    n_bins = n_bins or min(FAP_BINS, n // 2)
    mag = np.abs(np.fft.fft2(img))
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2) / 0.5
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.searchsorted(edges, radius, side="left") - 1  # bin k holds (edges[k], edges[k+1]]
    keep = (idx >= 0) & (idx < n_bins)
    sums = np.bincount(idx[keep], weights=mag[keep], minlength=n_bins)
    counts = np.bincount(idx[keep], minlength=n_bins)
    with np.errstate(divide="ignore", invalid="ignore"):
        means = sums / counts
        value = np.log10(means / means[0])
    return FAPProfile((edges[:-1] + edges[1:]) / 2, value)


# --------------------------------------------------------------------------
# Aggregation and reports
# --------------------------------------------------------------------------

@dataclass
class MetricAccumulator:
    """Mergeable sufficient statistics for patch-wise evaluation."""

    n: int = 0
    sum_abs: float = 0.0
    sum_sq: float = 0.0
    sum_rel: float = 0.0
    mean_y: float = 0.0
    m2_y: float = 0.0
    errors: list = field(default_factory=list)
    targets: list = field(default_factory=list)

    def add(self, pred, target, valid=None) -> "MetricAccumulator":
        p, y = _valid_pairs(pred, target, valid)
        if y.size:
            e = p - y
            other = MetricAccumulator(
                n=int(y.size), sum_abs=float(np.abs(e).sum()), sum_sq=float((e ** 2).sum()),
                sum_rel=float((np.abs(e) / y).sum()), mean_y=float(y.mean()),
                m2_y=float(((y - y.mean()) ** 2).sum()), errors=[e], targets=[y])
            self.merge(other)
        return self

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        n = self.n + other.n
        if n == 0:
            return self
        delta = other.mean_y - self.mean_y
        self.m2_y += other.m2_y + delta ** 2 * self.n * other.n / n
        self.mean_y += delta * other.n / n
        self.n = n
        self.sum_abs += other.sum_abs
        self.sum_sq += other.sum_sq
        self.sum_rel += other.sum_rel
        self.errors.extend(other.errors)
        self.targets.extend(other.targets)
        return self

    def report(self, resolution: float | None = None) -> "EvalReport":
        if self.n < 2:
            raise ValueError("at least two valid pixels are required")
        r2 = 1.0 - self.sum_sq / self.m2_y if self.m2_y > 0 else None
        basic = BasicMetrics(self.sum_abs / self.n, math.sqrt(self.sum_sq / self.n), r2,
                             self.sum_rel / self.n, self.n)
        bins = _bins_from_errors(np.concatenate(self.errors), np.concatenate(self.targets), BIN_EDGES)
        return EvalReport(basic, bins, resolution=resolution)


@dataclass
class EvalReport:
    metrics: BasicMetrics
    bins: list[HeightBin]
    fap: list[tuple[float, float]] = field(default_factory=list)
    resolution: float | None = None

    def to_dict(self) -> dict:
        d = {"resolution": self.resolution, **asdict(self.metrics),
             "bins": [{"range": b.label, **asdict(b)} for b in self.bins]}
        for b in d["bins"]:
            if math.isinf(b["hi"]):
                b["hi"] = None
        if self.fap:
            d["fap"] = [list(pair) for pair in self.fap]
        return d

    def to_text(self) -> str:
        m = self.metrics
        r2 = "n/a" if m.r2 is None else f"{m.r2:.4f}"
        res = f"{self.resolution:g} m" if self.resolution else "?"
        lines = [
            f"resolution  {res}",
            f"pixels      {m.n}",
            f"MAE (m)     {m.mae:.4f}",
            f"RMSE (m)    {m.rmse:.4f}",
            f"R2          {r2}",
            f"rMAE (%)    {100 * m.rmae:.2f}",
            "",
            f"{'bin (m)':>8} {'frac':>7} {'median':>8} {'q1':>8} {'q3':>8} {'wlo':>8} {'whi':>8}",
        ]

        def fmt(v):
            return f"{v:8.3f}" if v is not None else f"{'-':>8}"

        for b in self.bins:
            lines.append(f"{b.label:>8} {b.fraction:7.4f} {fmt(b.median)} {fmt(b.q1)} {fmt(b.q3)} "
                         f"{fmt(b.whisker_lo)} {fmt(b.whisker_hi)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text())
        (out / "metrics.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out / "bins.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["range", "count", "fraction", "median", "q1", "q3", "whisker_lo", "whisker_hi"])
            for b in self.bins:
                w.writerow([b.label, b.count, b.fraction, b.median, b.q1, b.q3, b.whisker_lo, b.whisker_hi])
        return out
