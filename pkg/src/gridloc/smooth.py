"""Offline trajectory smoothing and error statistics.

Smoothing fits an independent least-squares polynomial to x(t), y(t) and
theta(t) in fixed-size frame windows with 50% overlap and averages the fitted
values where windows overlap.  Heading is unwrapped before fitting and
re-wrapped afterwards.  Statistics (bias, MAE, percentiles, CDF) treat heading
errors circularly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .imgcore import Pose2D, wrap_angle_deg
from .locate import FrameEstimate


@dataclass(frozen=True)
class DimensionStats:
    bias: float
    mae: float
    p95: float
    p99: float
    cdf_values: np.ndarray      # sorted |error|
    cdf_fractions: np.ndarray   # cumulative fraction at each value


@dataclass(frozen=True)
class ErrorStats:
    """Per-dimension error statistics; x and y in mm, theta in degrees."""

    x: DimensionStats
    y: DimensionStats
    theta: DimensionStats
    n_matched: int


def _unwrap_deg(theta: np.ndarray) -> np.ndarray:
    return np.rad2deg(np.unwrap(np.deg2rad(theta)))


def _window_starts(n: int, window: int) -> list[int]:
    hop = window // 2
    starts = [0]
    while starts[-1] + window < n:
        starts.append(starts[-1] + hop)
    return starts


def _fit_window(t: np.ndarray, y: np.ndarray, degree: int) -> np.ndarray:
    """Polynomial LSQ with time recentered to the window midpoint and scaled
    to [-1, 1] for conditioning; returns fitted values."""
    m = len(t)
    deg = min(degree, max(m - 2, 0))
    mid = (t[0] + t[-1]) / 2.0
    half = max((t[-1] - t[0]) / 2.0, 1e-12)
    ts = (t - mid) / half
    design = np.vander(ts, deg + 1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return design @ coef


def smooth_series(t: np.ndarray, y: np.ndarray, window_size: int = 20,
                  degree: int = 5) -> np.ndarray:
    """Windowed polynomial smoothing of one series; overlaps averaged."""
    n = len(t)
    out = np.zeros(n)
    counts = np.zeros(n)
    for s in _window_starts(n, window_size):
        e = min(n, s + window_size)
        if e - s < 2:
            out[s:e] += y[s:e]
        else:
            out[s:e] += _fit_window(t[s:e], y[s:e], degree)
        counts[s:e] += 1
    return out / counts


def smooth_trajectory(traj: list[FrameEstimate], window_size: int = 20,
                      degree: int = 5) -> list[FrameEstimate]:
    """Smooth x, y and heading over the trajectory; timestamps, frame indices
    and flags are preserved.  Trajectories shorter than one window are
    returned unsmoothed with a warning."""
    if window_size <= degree + 1:
        raise ValueError("window size must exceed degree + 1")
    n = len(traj)
    if n < window_size:
        warnings.warn(
            f"trajectory of {n} frames is shorter than the smoothing window "
            f"({window_size}); returned unsmoothed", stacklevel=2)
        return list(traj)
    t = np.array([e.timestamp for e in traj])
    x = np.array([e.pose.x for e in traj])
    y = np.array([e.pose.y for e in traj])
    th = _unwrap_deg(np.array([e.pose.theta_deg for e in traj]))
    xs = smooth_series(t, x, window_size, degree)
    ys = smooth_series(t, y, window_size, degree)
    ths = smooth_series(t, th, window_size, degree)
    return [FrameEstimate(Pose2D(float(xs[i]), float(ys[i]), wrap_angle_deg(float(ths[i]))),
                          e.source, e.frame_index, e.timestamp, e.quality)
            for i, e in enumerate(traj)]


def _percentile_sorted(sorted_vals: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics (inclusive convention)."""
    n = len(sorted_vals)
    if n == 1:
        return float(sorted_vals[0])
    pos = q / 100.0 * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return float(sorted_vals[lo] * (1 - frac) + sorted_vals[hi] * frac)


def _dimension_stats(err: np.ndarray) -> DimensionStats:
    ae = np.abs(err)
    order = np.sort(ae)
    fractions = np.arange(1, len(order) + 1) / len(order)
    return DimensionStats(bias=float(np.mean(err)), mae=float(np.mean(ae)),
                          p95=_percentile_sorted(order, 95.0),
                          p99=_percentile_sorted(order, 99.0),
                          cdf_values=order, cdf_fractions=fractions)


def match_by_timestamp(est: list[FrameEstimate], gt: list[FrameEstimate],
                       max_dt: float) -> list[tuple[FrameEstimate, FrameEstimate]]:
    """Pair estimates with the nearest-timestamp reference within ``max_dt``."""
    gt_t = np.array([g.timestamp for g in gt])
    pairs = []
    for e in est:
        i = int(np.argmin(np.abs(gt_t - e.timestamp)))
        if abs(gt_t[i] - e.timestamp) <= max_dt:
            pairs.append((e, gt[i]))
    return pairs


def error_stats(est: list[FrameEstimate], gt: list[FrameEstimate],
                max_dt: float | None = None) -> ErrorStats:
    """Bias, MAE, 95th/99th percentiles and CDFs of the absolute errors.

    Estimates are associated to the nearest reference timestamp within half a
    frame period (inferred from the reference spacing when ``max_dt`` is not
    given).  Position errors are reported in mm, heading errors in degrees on
    the circular difference.
    """
    if not est or not gt:
        raise ValueError("empty trajectory")
    if max_dt is None:
        dts = np.diff([g.timestamp for g in gt])
        max_dt = float(np.median(dts)) / 2.0 if len(dts) else np.inf
    pairs = match_by_timestamp(est, gt, max_dt)
    if not pairs:
        raise ValueError("no estimate/reference pairs matched in time")
    ex = np.array([(e.pose.x - g.pose.x) * 1000.0 for e, g in pairs])
    ey = np.array([(e.pose.y - g.pose.y) * 1000.0 for e, g in pairs])
    eth = np.array([wrap_angle_deg(e.pose.theta_deg - g.pose.theta_deg) for e, g in pairs])
    return ErrorStats(x=_dimension_stats(ex), y=_dimension_stats(ey),
                      theta=_dimension_stats(eth), n_matched=len(pairs))


def stats_table(stats: ErrorStats) -> str:
    """Aligned table: columns Bias, MAE, 95th, 99th; rows x, y, theta."""
    rows = [("x", stats.x), ("y", stats.y), ("theta", stats.theta)]
    lines = [f"{'':8s}{'Bias':>10s}{'MAE':>10s}{'95th':>10s}{'99th':>10s}"]
    for name, d in rows:
        lines.append(f"{name:8s}{d.bias:10.3f}{d.mae:10.3f}{d.p95:10.3f}{d.p99:10.3f}")
    return "\n".join(lines)
