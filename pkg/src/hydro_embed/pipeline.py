"""Standardization, window extraction, and batching.

Feature statistics are computed over the training period only, pooled
across all basins (one joint model needs one input space). A sample is a
``lookback``-day window of standardized forcing ending on its target day;
windows may reach back across the start of their phase range (warm-up),
but statistics never look outside the training range.
"""

from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .errors import EmptySampleSet, EmptyTrainingPeriod
from .ingest import BasinRecord
from .prng import Xoshiro256StarStar

DEFAULT_LOOKBACK = 270


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint training and evaluation date ranges (inclusive bounds)."""

    train_start: date
    train_end: date
    eval_start: date
    eval_end: date

    def __post_init__(self):
        if self.train_start > self.train_end:
            raise ValueError("train range is empty")
        if self.eval_start > self.eval_end:
            raise ValueError("eval range is empty")
        if self.train_start <= self.eval_end and self.eval_start <= self.train_end:
            raise ValueError("train and eval ranges overlap")

    def range_for(self, phase: str) -> tuple[date, date]:
        if phase == "train":
            return self.train_start, self.train_end
        if phase == "eval":
            return self.eval_start, self.eval_end
        raise ValueError(f"unknown phase {phase!r}")

    def check_lookback(self, lookback: int) -> None:
        for phase in ("train", "eval"):
            lo, hi = self.range_for(phase)
            if (hi - lo).days + 1 < lookback + 1:
                raise ValueError(f"{phase} range shorter than lookback + 1 days")


@dataclass(frozen=True)
class Standardizer:
    """Elementwise (x - mean) / std over a fixed feature order.

    Zero-variance features keep their mean and get std 1, so they map to
    exactly 0 rather than dividing by zero.
    """

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        if self.means.shape != self.stds.shape:
            raise ValueError("means and stds must have the same shape")
        if self.stds.size and not np.all(self.stds > 0):
            raise ValueError("stds must be positive")

    @property
    def num_features(self) -> int:
        return self.means.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.means) / self.stds

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.stds + self.means


@dataclass(frozen=True)
class StandardizerSet:
    """The three fitted standardizers a checkpoint carries."""

    dynamic: Standardizer
    target: Standardizer
    static: Standardizer | None = None


@dataclass(frozen=True)
class Sample:
    basin_index: int
    window: np.ndarray  # (lookback, 5) standardized forcing, oldest first
    static: np.ndarray | None  # standardized attributes, shared per basin
    target: float  # standardized discharge on the target day
    target_date: date


@dataclass(frozen=True)
class Batch:
    samples: list = field(default_factory=list)

    def __post_init__(self):
        if not self.samples:
            raise ValueError("batch must be nonempty")

    def __len__(self):
        return len(self.samples)


def _finalize_stats(total, total_sq, count, what):
    count = np.asarray(count, dtype=np.float64)
    if np.any(count < 1):
        raise EmptyTrainingPeriod(f"no in-range values for {what}")
    means = total / count
    variances = total_sq / count - means**2
    stds = np.sqrt(np.maximum(variances, 0.0))
    stds = np.where(stds > 0.0, stds, 1.0)
    return Standardizer(means=means, stds=stds)


def _train_slice(series_start: date, num_days: int, split: SplitSpec):
    lo = max(0, (split.train_start - series_start).days)
    hi = min(num_days, (split.train_end - series_start).days + 1)
    return lo, max(lo, hi)


def fit_standardizer(records: list[BasinRecord], split: SplitSpec, which: str) -> Standardizer:
    """Fit pooled zero-mean/unit-variance statistics on the training period.

    ``which`` selects the feature family: ``dynamic`` (forcing columns),
    ``static`` (attribute columns, one value per basin), or ``target``
    (non-missing discharge). Variance is the population (1/N) form.

    Raises:
        EmptyTrainingPeriod: a feature has no in-range value to pool.
    """
    if which == "dynamic":
        total = np.zeros(5)
        total_sq = np.zeros(5)
        count = 0
        for rec in records:
            lo, hi = _train_slice(rec.forcing.start, rec.forcing.num_days, split)
            block = rec.forcing.values[lo:hi]
            total += block.sum(axis=0)
            total_sq += (block**2).sum(axis=0)
            count += block.shape[0]
        return _finalize_stats(total, total_sq, count, "dynamic features")

    if which == "target":
        total = np.zeros(1)
        total_sq = np.zeros(1)
        count = 0
        for rec in records:
            lo, hi = _train_slice(rec.discharge.start, rec.discharge.num_days, split)
            block = rec.discharge.values[lo:hi]
            block = block[~rec.discharge.missing[lo:hi]]
            total += block.sum()
            total_sq += (block**2).sum()
            count += block.shape[0]
        return _finalize_stats(total, total_sq, count, "discharge target")

    if which == "static":
        if not records:
            raise EmptyTrainingPeriod("no basins to pool static attributes over")
        table = np.stack([rec.attributes.values for rec in records])
        total = table.sum(axis=0)
        total_sq = (table**2).sum(axis=0)
        count = np.full(table.shape[1], table.shape[0])
        return _finalize_stats(total, total_sq, count, "static attributes")

    raise ValueError(f"unknown feature family {which!r}")


def make_samples(
    record: BasinRecord,
    split: SplitSpec,
    phase: str,
    std: StandardizerSet,
    lookback: int = DEFAULT_LOOKBACK,
    basin_index: int = 0,
) -> list[Sample]:
    """Extract every eligible sample of a basin for one phase.

    A day d in the phase range yields a sample iff the ``lookback`` days
    ending at d all have forcing data and discharge at d is observed.
    Windows are standardized with the (training-fitted) dynamic
    standardizer and ordered oldest to newest.
    """
    lo, hi = split.range_for(phase)
    forcing = record.forcing
    discharge = record.discharge

    window_source = std.dynamic.apply(forcing.values)
    static = None
    if std.static is not None and std.static.num_features:
        static = std.static.apply(record.attributes.values)
    t_mean = float(std.target.means[0])
    t_std = float(std.target.stds[0])

    samples = []
    day = max(lo, forcing.start + timedelta(days=lookback - 1), discharge.start)
    last = min(hi, forcing.end, discharge.end)
    while day <= last:
        q_idx = discharge.index_of(day)
        if not discharge.missing[q_idx]:
            f_idx = forcing.index_of(day)
            samples.append(
                Sample(
                    basin_index=basin_index,
                    window=window_source[f_idx - lookback + 1 : f_idx + 1],
                    static=static,
                    target=(float(discharge.values[q_idx]) - t_mean) / t_std,
                    target_date=day,
                )
            )
        day += timedelta(days=1)
    return samples


def make_batches(samples: list[Sample], batch_size: int, seed: int) -> list[Batch]:
    """Shuffle samples (Fisher-Yates over the toolkit PRNG) and chunk them.

    Every sample appears in exactly one batch; the final batch may be
    short. The same seed always yields the same order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not samples:
        raise EmptySampleSet("no samples to batch")
    order = list(samples)
    Xoshiro256StarStar(seed).shuffle(order)
    return [
        Batch(samples=order[i : i + batch_size]) for i in range(0, len(order), batch_size)
    ]
