"""Signal loading, normalization, window slicing, and synthetic fixtures.

A signal file is a CSV with an ISO-8601 timestamp column followed by one
column per sensor. Multi-channel datasets use one file per channel with
identical timestamps and column order. Timestamps must advance by a fixed
whole-minute interval that divides the day evenly.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import ContractError, InputError
from .stgraph import SpatialGraph

MINUTES_PER_DAY = 1440


@dataclass
class DatasetSpec:
    """Where a dataset lives and how to slice it."""

    graph_path: str
    signal_paths: list[str]
    interval_min: int
    split_ratios: tuple[float, float, float] | None = (7.0, 1.0, 2.0)
    split_days: tuple[int, int, int] | None = None


@dataclass
class TrafficSeries:
    """A aligned multi-channel sensor series with calendar features."""

    values: np.ndarray  # (steps, n_nodes, channels), raw units
    timestamps: list[datetime]
    day_of_week: np.ndarray  # (steps,), Monday = 0
    step_in_day: np.ndarray  # (steps,)
    interval_min: int
    labels: list[str]

    @property
    def gamma(self) -> int:
        return MINUTES_PER_DAY // self.interval_min

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]


def _read_signal_csv(path: Path) -> tuple[list[datetime], list[str], np.ndarray]:
    if not path.exists():
        raise InputError(f"signal file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty signal file")
        if len(header) < 2:
            raise InputError(f"{path}: need a timestamp column plus node columns")
        labels = [h.strip() for h in header[1:]]
        timestamps: list[datetime] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}:{line_no}: expected {len(header)} columns, got {len(row)}"
                )
            try:
                timestamps.append(datetime.fromisoformat(row[0].strip()))
            except ValueError:
                raise InputError(f"{path}:{line_no}: bad ISO-8601 timestamp {row[0]!r}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise InputError(f"{path}:{line_no}: non-numeric value in data row")
    if not rows:
        raise InputError(f"{path}: no data rows")
    return timestamps, labels, np.asarray(rows, dtype=np.float64)


def load_series(
    signal_paths: list[str], interval_min: int, graph: SpatialGraph | None = None
) -> TrafficSeries:
    """Load one file per channel and derive the calendar features."""
    if interval_min <= 0 or MINUTES_PER_DAY % interval_min != 0:
        raise InputError(
            f"interval must be a positive divisor of {MINUTES_PER_DAY} minutes, "
            f"got {interval_min}"
        )
    if not signal_paths:
        raise InputError("at least one signal file is required")

    channels = []
    timestamps: list[datetime] | None = None
    labels: list[str] | None = None
    for path in signal_paths:
        ts, lab, vals = _read_signal_csv(Path(path))
        if timestamps is None:
            timestamps, labels = ts, lab
        else:
            if ts != timestamps:
                raise InputError(f"{path}: timestamps differ from the first channel file")
            if lab != labels:
                raise InputError(f"{path}: node columns differ from the first channel file")
        channels.append(vals)
    values = np.stack(channels, axis=-1)  # (steps, nodes, channels)

    delta = timedelta(minutes=interval_min)
    for i in range(1, len(timestamps)):
        if timestamps[i] - timestamps[i - 1] != delta:
            raise InputError(
                f"timestamps must advance by {interval_min} minutes; row {i + 1} "
                f"jumps from {timestamps[i - 1]} to {timestamps[i]}"
            )
    for ts in timestamps[:1]:
        if (ts.hour * 60 + ts.minute) % interval_min != 0 or ts.second or ts.microsecond:
            raise InputError(f"timestamps must sit on the {interval_min}-minute grid")

    day = np.array([ts.weekday() for ts in timestamps], dtype=np.int64)
    step = np.array(
        [(ts.hour * 60 + ts.minute) // interval_min for ts in timestamps], dtype=np.int64
    )

    if graph is not None:
        if len(labels) != graph.n_nodes:
            raise InputError(
                f"signal has {len(labels)} node columns but the graph has {graph.n_nodes}"
            )
        if set(labels) == set(graph.labels) and labels != graph.labels:
            order = [labels.index(lab) for lab in graph.labels]
            values = values[:, order, :]
            labels = list(graph.labels)
        elif set(labels) != set(graph.labels):
            warnings.warn("signal column labels do not match graph labels; matched by position")

    return TrafficSeries(
        values=values,
        timestamps=timestamps,
        day_of_week=day,
        step_in_day=step,
        interval_min=interval_min,
        labels=labels,
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    """Per-channel z-score statistics fit on the training segment."""

    mean: np.ndarray  # (channels,)
    std: np.ndarray  # (channels,)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        return normalized * self.std + self.mean


def zscore_fit(values: np.ndarray) -> NormStats:
    """Fit per-channel statistics over all steps and nodes."""
    if values.ndim != 3 or values.shape[0] == 0:
        raise ContractError(f"expected a nonempty (steps, nodes, channels) array, got {values.shape}")
    mean = values.mean(axis=(0, 1))
    std = values.std(axis=(0, 1))
    if np.any(std == 0.0):
        flat = np.flatnonzero(std == 0.0)
        raise ContractError(f"channel {int(flat[0])} is constant; z-score undefined")
    return NormStats(mean=mean, std=std)


def zscore_fit_apply(
    values: np.ndarray, stats: NormStats | None = None
) -> tuple[np.ndarray, NormStats]:
    """Normalize, fitting stats first when none are given."""
    if stats is None:
        stats = zscore_fit(values)
    return stats.apply(values), stats


# ---------------------------------------------------------------------------
# splits and windows
# ---------------------------------------------------------------------------


def split_series(
    series: TrafficSeries,
    ratios: tuple[float, float, float] | None = (7.0, 1.0, 2.0),
    days: tuple[int, int, int] | None = None,
) -> dict[str, range]:
    """Chronological train/val/test ranges over raw step indices.

    Either proportional ratios or whole-day counts; day counts must fit
    within the series.
    """
    total = series.n_steps
    if days is not None:
        per_day = series.gamma
        t, v, s = (d * per_day for d in days)
        if t + v + s > total:
            raise InputError(
                f"day split needs {t + v + s} steps but the series has {total}"
            )
        bounds = (t, t + v, t + v + s)
    else:
        if ratios is None:
            raise InputError("a ratio or day split is required")
        weights = np.asarray(ratios, dtype=np.float64)
        if weights.min() < 0 or weights.sum() <= 0:
            raise InputError(f"bad split ratios {ratios}")
        cut1 = int(math.floor(total * weights[0] / weights.sum()))
        cut2 = int(math.floor(total * (weights[0] + weights[1]) / weights.sum()))
        bounds = (cut1, cut2, total)
    return {
        "train": range(0, bounds[0]),
        "val": range(bounds[0], bounds[1]),
        "test": range(bounds[1], bounds[2]),
    }


@dataclass
class WindowSample:
    """One training example: an input window and its forecast target."""

    values_norm: np.ndarray  # (n_nodes, t_in, channels)
    day: np.ndarray  # (t_in,)
    step: np.ndarray  # (t_in,)
    target_norm: np.ndarray  # (n_nodes, t_out, channels)
    target_raw: np.ndarray  # (n_nodes, t_out, channels)
    start: int  # raw step index of the first input step


def build_windows(
    series: TrafficSeries,
    normalized: np.ndarray,
    segment: range,
    t_in: int,
    t_out: int,
) -> list[WindowSample]:
    """Stride-1 sliding windows fully contained in the segment."""
    samples: list[WindowSample] = []
    last_start = segment.stop - (t_in + t_out)
    for start in range(segment.start, last_start + 1):
        mid = start + t_in
        end = mid + t_out
        samples.append(
            WindowSample(
                values_norm=np.ascontiguousarray(normalized[start:mid].transpose(1, 0, 2)),
                day=series.day_of_week[start:mid].copy(),
                step=series.step_in_day[start:mid].copy(),
                target_norm=np.ascontiguousarray(normalized[mid:end].transpose(1, 0, 2)),
                target_raw=np.ascontiguousarray(series.values[mid:end].transpose(1, 0, 2)),
                start=start,
            )
        )
    return samples


@dataclass
class Dataset:
    """A series with normalization stats and per-split window lists."""

    series: TrafficSeries
    stats: NormStats
    splits: dict[str, list[WindowSample]]
    segments: dict[str, range] = field(default_factory=dict)


def prepare_dataset(
    series: TrafficSeries,
    t_in: int,
    t_out: int,
    ratios: tuple[float, float, float] | None = (7.0, 1.0, 2.0),
    days: tuple[int, int, int] | None = None,
) -> Dataset:
    """Split chronologically, fit z-score on train only, build windows."""
    segments = split_series(series, ratios=ratios, days=days)
    train_seg = segments["train"]
    if len(train_seg) == 0:
        raise ContractError("train segment is empty; adjust the split")
    stats = zscore_fit(series.values[train_seg.start : train_seg.stop])
    normalized = stats.apply(series.values)
    splits = {
        name: build_windows(series, normalized, seg, t_in, t_out)
        for name, seg in segments.items()
    }
    return Dataset(series=series, stats=stats, splits=splits, segments=segments)


def batch_arrays(samples: list[WindowSample]):
    """Stack samples into batched arrays for the model."""
    if not samples:
        raise ContractError("cannot batch an empty sample list")
    values = np.stack([s.values_norm for s in samples], axis=0)
    day = np.stack([s.day for s in samples], axis=0)
    step = np.stack([s.step for s in samples], axis=0)
    target_norm = np.stack([s.target_norm for s in samples], axis=0)
    target_raw = np.stack([s.target_raw for s in samples], axis=0)
    return values, day, step, target_norm, target_raw


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------


def ring_edge_lines(n_nodes: int) -> list[str]:
    """Edge list lines for an n-node ring."""
    return [f"{i} {(i + 1) % n_nodes} 1.0" for i in range(n_nodes)]


def synthetic_series(
    n_nodes: int,
    n_steps: int,
    interval_min: int = 60,
    seed: int = 0,
    noise: float = 0.0,
    start: str = "2024-01-01T00:00:00",
) -> TrafficSeries:
    """A smooth positive daily/weekly pattern with optional seeded noise.

    Values stay well away from zero so the zero-masking convention does
    not hide points.
    """
    gamma = MINUTES_PER_DAY // interval_min
    rng = np.random.default_rng(seed)
    first = datetime.fromisoformat(start)
    timestamps = [first + timedelta(minutes=interval_min * k) for k in range(n_steps)]
    day = np.array([ts.weekday() for ts in timestamps], dtype=np.int64)
    step = np.array(
        [(ts.hour * 60 + ts.minute) // interval_min for ts in timestamps], dtype=np.int64
    )

    t_axis = np.arange(n_steps, dtype=np.float64)
    node_phase = 2.0 * np.pi * np.arange(n_nodes, dtype=np.float64) / n_nodes
    daily = 2.0 * np.pi * t_axis / gamma
    weekly = 2.0 * np.pi * t_axis / (7 * gamma)
    base = (
        50.0
        + 10.0 * np.sin(daily[:, None] + node_phase[None, :])
        + 4.0 * np.cos(weekly[:, None] + 0.5 * node_phase[None, :])
    )
    if noise > 0.0:
        base = base + rng.normal(0.0, noise, size=base.shape)
    values = base[:, :, None]

    return TrafficSeries(
        values=values,
        timestamps=timestamps,
        day_of_week=day,
        step_in_day=step,
        interval_min=interval_min,
        labels=[str(i) for i in range(n_nodes)],
    )


def write_signal_csv(series: TrafficSeries, path, channel: int = 0) -> None:
    """Write one channel of a series in the standard signal layout."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + series.labels)
        for k, ts in enumerate(series.timestamps):
            row = [ts.isoformat()] + [repr(float(v)) for v in series.values[k, :, channel]]
            writer.writerow(row)


def write_edge_list(lines: list[str], path) -> None:
    Path(path).write_text("\n".join(lines) + "\n")
