"""Synthetic basin fixtures with known ground truth.

Each basin is a single linear reservoir: a fraction ``runoff_coeff`` of
the stored water leaves as discharge every day, and a fraction
``loss_fraction`` of incoming precipitation is lost before reaching
storage. Heterogeneity across basins therefore lives entirely in two
scalars, which also get written to the attribute table, so a model given
the attributes has perfect site information and a model without them must
recover the site identity from the dynamics alone.
"""

import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np

from .errors import IoFailure
from .ingest import (
    AttributeVector,
    DischargeSeries,
    ForcingSeries,
    serialize_attributes,
    serialize_discharge,
    serialize_forcing,
)
from .prng import Xoshiro256StarStar, derive_seed

DEFAULT_START = date(1990, 10, 1)

WET_PROBABILITY = 0.3
MEAN_WET_DEPTH = 8.0  # mm, exponential depth scale

# seasonal sinusoid (mean, amplitude, noise half-width) per driver
_TMIN = (5.0, 10.0, 0.8)
_TMAX = (15.0, 10.0, 0.8)
_SRAD = (200.0, 80.0, 5.0)
_VP = (800.0, 300.0, 10.0)

ATTRIBUTE_NAMES = ("runoff_coeff", "loss_fraction")


@dataclass(frozen=True)
class SynthBasinSpec:
    """Generative parameters for one synthetic basin."""

    basin_id: str
    runoff_coeff: float  # fraction of storage released per day, (0, 1]
    loss_fraction: float  # fraction of precipitation lost, [0, 1)
    storage0: float  # initial storage, mm
    forcing_seed: int

    def __post_init__(self):
        if not 0.0 < self.runoff_coeff <= 1.0:
            raise ValueError("runoff_coeff must be in (0, 1]")
        if not 0.0 <= self.loss_fraction < 1.0:
            raise ValueError("loss_fraction must be in [0, 1)")
        if self.storage0 < 0.0:
            raise ValueError("storage0 must be >= 0")


@dataclass(frozen=True)
class SynthFixture:
    basins: list
    num_days: int
    shared_forcing: bool = True

    def __post_init__(self):
        pairs = [(b.runoff_coeff, b.loss_fraction) for b in self.basins]
        if len(set(pairs)) != len(pairs):
            raise ValueError("basins must have pairwise distinct (runoff, loss) parameters")


def generate_forcing(seed: int, num_days: int, start: date = DEFAULT_START) -> ForcingSeries:
    """Deterministic synthetic weather.

    Precipitation is an intermittent process: each day is wet with
    probability 0.3, and a wet day's depth is ``-8*ln(u)`` mm for uniform
    ``u`` in (0, 1]. The other four drivers are annual sinusoids plus
    small uniform noise. Draw order per day is fixed (occurrence, depth if
    wet, then one noise draw per remaining driver) so series are
    bit-reproducible from the seed.
    """
    if num_days < 1:
        raise ValueError("num_days must be >= 1")
    rng = Xoshiro256StarStar(seed)
    values = np.empty((num_days, 5), dtype=np.float64)
    start_ordinal = start.toordinal()
    for t in range(num_days):
        # annual phase peaking around day-of-year 200 (northern summer)
        phase = 2.0 * math.pi * ((start_ordinal + t) % 365.25) / 365.25
        season = math.sin(phase - 2.0)
        if rng.next_float() < WET_PROBABILITY:
            u = 1.0 - rng.next_float()  # (0, 1]: keeps log() finite
            prcp = -MEAN_WET_DEPTH * math.log(u)
        else:
            prcp = 0.0
        tmin = _TMIN[0] + _TMIN[1] * season + rng.uniform(-_TMIN[2], _TMIN[2])
        tmax = _TMAX[0] + _TMAX[1] * season + rng.uniform(-_TMAX[2], _TMAX[2])
        srad = _SRAD[0] + _SRAD[1] * season + rng.uniform(-_SRAD[2], _SRAD[2])
        vp = _VP[0] + _VP[1] * season + rng.uniform(-_VP[2], _VP[2])
        values[t] = (prcp, tmin, tmax, srad, vp)
    return ForcingSeries(start=start, values=values)


def simulate_discharge(spec: SynthBasinSpec, forcing: ForcingSeries) -> DischargeSeries:
    """Run the linear reservoir over a forcing series.

    Daily update with storage S and precipitation P:
    ``Q[t] = k * S[t]`` then ``S[t+1] = S[t] + (1 - loss) * P[t] - Q[t]``,
    which conserves mass exactly: sum((1-loss)*P) - sum(Q) = S_end - S_0.
    """
    k = spec.runoff_coeff
    keep = 1.0 - spec.loss_fraction
    precip = forcing.values[:, 0]
    q = np.empty(forcing.num_days, dtype=np.float64)
    storage = spec.storage0
    for t in range(forcing.num_days):
        q[t] = k * storage
        storage = storage + keep * precip[t] - q[t]
    return DischargeSeries(
        start=forcing.start, values=q, missing=np.zeros(forcing.num_days, dtype=bool)
    )


def build_fixture(
    num_basins: int,
    num_days: int,
    seed: int,
    shared_forcing: bool = True,
) -> SynthFixture:
    """Draw a deterministic set of basin specs.

    Runoff coefficients are spread geometrically over [0.03, 0.8] with
    seeded jitter so any two basins respond at clearly different time
    scales; loss fractions and initial storage add further spread.
    """
    if num_basins < 1:
        raise ValueError("num_basins must be >= 1")
    rng = Xoshiro256StarStar(derive_seed(seed, 0))
    basins = []
    for i in range(num_basins):
        frac = i / max(1, num_basins - 1)
        runoff = 0.03 * (0.8 / 0.03) ** frac
        runoff *= 1.0 + rng.uniform(-0.1, 0.1)
        runoff = min(runoff, 1.0)
        loss = rng.uniform(0.0, 0.5)
        storage0 = rng.uniform(5.0, 80.0)
        forcing_seed = derive_seed(seed, 1) if shared_forcing else derive_seed(seed, 1 + i)
        basins.append(
            SynthBasinSpec(
                basin_id=f"b{i:03d}",
                runoff_coeff=runoff,
                loss_fraction=loss,
                storage0=storage0,
                forcing_seed=forcing_seed,
            )
        )
    return SynthFixture(basins=basins, num_days=num_days, shared_forcing=shared_forcing)


def emit_fixture(fixture: SynthFixture, root) -> None:
    """Write a fixture to disk in the ingest file formats."""
    root = Path(root)
    try:
        (root / "forcing").mkdir(parents=True, exist_ok=True)
        (root / "discharge").mkdir(parents=True, exist_ok=True)
        attr_table = {}
        for spec in fixture.basins:
            forcing = generate_forcing(spec.forcing_seed, fixture.num_days)
            discharge = simulate_discharge(spec, forcing)
            (root / "forcing" / f"{spec.basin_id}.txt").write_text(serialize_forcing(forcing))
            (root / "discharge" / f"{spec.basin_id}.txt").write_text(
                serialize_discharge(discharge)
            )
            attr_table[spec.basin_id] = AttributeVector(
                names=ATTRIBUTE_NAMES,
                values=np.array([spec.runoff_coeff, spec.loss_fraction]),
            )
        (root / "attributes.csv").write_text(serialize_attributes(attr_table))
    except OSError as exc:
        raise IoFailure(f"cannot write fixture under {root}: {exc}") from exc


def serialize_specs(fixture: SynthFixture) -> str:
    """Record the generative parameters of a fixture (CSV)."""
    lines = ["basin_id,runoff_coeff,loss_fraction,storage0,forcing_seed"]
    for b in fixture.basins:
        lines.append(
            f"{b.basin_id},{b.runoff_coeff!r},{b.loss_fraction!r},"
            f"{b.storage0!r},{b.forcing_seed}"
        )
    return "\n".join(lines) + "\n"
