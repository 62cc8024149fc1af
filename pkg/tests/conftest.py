from datetime import date, timedelta

import numpy as np
import pytest

from hydro_embed.ingest import (
    AttributeVector,
    BasinRecord,
    DischargeSeries,
    ForcingSeries,
)
from hydro_embed.pipeline import SplitSpec


def make_forcing(start=date(1999, 10, 1), num_days=400, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.0, 10.0, size=(num_days, 5))
    return ForcingSeries(start=start, values=values)


def make_discharge(start=date(1999, 10, 1), num_days=400, seed=1, missing_at=()):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.1, 5.0, size=num_days)
    missing = np.zeros(num_days, dtype=bool)
    for k in missing_at:
        missing[k] = True
        values[k] = np.nan
    return DischargeSeries(start=start, values=values, missing=missing)


def make_record(basin_id="b1", start=date(1999, 10, 1), num_days=400, seed=0, missing_at=()):
    return BasinRecord(
        basin_id=basin_id,
        forcing=make_forcing(start, num_days, seed),
        discharge=make_discharge(start, num_days, seed + 1000, missing_at),
        attributes=AttributeVector(
            names=("attr_a", "attr_b"),
            values=np.array([1.0 + seed, 2.0 - seed], dtype=np.float64),
        ),
    )


def split_covering(start, num_days, lookback, eval_days=60):
    """Eval range first, train range after, both inside one gap-free record."""
    eval_start = start
    eval_end = start + timedelta(days=lookback + eval_days)
    train_start = eval_end + timedelta(days=1)
    train_end = start + timedelta(days=num_days - 1)
    return SplitSpec(
        train_start=train_start,
        train_end=train_end,
        eval_start=eval_start,
        eval_end=eval_end,
    )


@pytest.fixture
def small_record():
    return make_record()


@pytest.fixture
def small_split(small_record):
    return split_covering(small_record.forcing.start, small_record.forcing.num_days, 30)
