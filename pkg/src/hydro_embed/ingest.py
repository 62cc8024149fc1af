"""Parsing and serialization of basin data files.

Three plain-text formats make up a basin collection rooted at a directory:

* ``<root>/forcing/<basin_id>.txt`` -- header ``YYYY MM DD PRCP TMIN TMAX
  SRAD VP``, then one line per day with 8 whitespace-separated fields.
  Dates must be ascending and gap-free.
* ``<root>/discharge/<basin_id>.txt`` -- header ``YYYY MM DD QOBS``, 4
  fields per line, ``-999.0`` marking a missing observation.
* ``<root>/attributes.csv`` -- comma-separated, header
  ``basin_id,<name1>,...``, one row per basin.

Parsers are total: any input yields either a validated value or a typed
error from :mod:`hydro_embed.errors`. Serializers invert the parsers
exactly (floats are written with ``repr`` so parse(serialize(x)) == x).
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateBasinId,
    EmptyFile,
    InconsistentColumnCount,
    MalformedLine,
    MissingAttributeFile,
    NegativeDischarge,
    NonConsecutiveDates,
    NonNumericAttribute,
    NoValidBasins,
)

logger = logging.getLogger(__name__)

FORCING_HEADER = "YYYY MM DD PRCP TMIN TMAX SRAD VP"
DISCHARGE_HEADER = "YYYY MM DD QOBS"
FORCING_COLUMNS = ("prcp", "tmin", "tmax", "srad", "vp")
MISSING_SENTINEL = -999.0

# Forcing and discharge must share at least this many days for a basin to
# be usable (one default-length lookback window plus its target day).
MIN_OVERLAP_DAYS = 271


@dataclass(frozen=True)
class ForcingSeries:
    """Gap-free daily meteorological drivers for one basin.

    Column order is fixed: precipitation [mm/day], min air temperature
    [degC], max air temperature [degC], shortwave radiation [W/m2],
    vapor pressure [Pa].
    """

    start: date
    values: np.ndarray  # (num_days, 5) float64

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != 5:
            raise ValueError("forcing values must have shape (num_days, 5)")
        if self.values.shape[0] < 1:
            raise ValueError("forcing series must cover at least one day")

    @property
    def num_days(self) -> int:
        return self.values.shape[0]

    @property
    def end(self) -> date:
        return self.start + timedelta(days=self.num_days - 1)

    def date_at(self, index: int) -> date:
        return self.start + timedelta(days=index)

    def index_of(self, day: date) -> int:
        return (day - self.start).days


@dataclass(frozen=True)
class DischargeSeries:
    """Daily mean discharge [mm/day] with an explicit missing mask.

    Missing days carry NaN in ``values`` so accidental use poisons the
    result instead of silently biasing it.
    """

    start: date
    values: np.ndarray  # (num_days,) float64, NaN where missing
    missing: np.ndarray  # (num_days,) bool

    def __post_init__(self):
        if self.values.shape != self.missing.shape or self.values.ndim != 1:
            raise ValueError("values and missing mask must be equal-length vectors")
        if self.values.shape[0] < 1:
            raise ValueError("discharge series must cover at least one day")

    @property
    def num_days(self) -> int:
        return self.values.shape[0]

    @property
    def end(self) -> date:
        return self.start + timedelta(days=self.num_days - 1)

    def date_at(self, index: int) -> date:
        return self.start + timedelta(days=index)

    def index_of(self, day: date) -> int:
        return (day - self.start).days


@dataclass(frozen=True)
class AttributeVector:
    """Static per-basin attributes, in a collection-wide fixed order."""

    names: tuple
    values: np.ndarray  # (num_attributes,) float64

    def __post_init__(self):
        if len(self.names) != self.values.shape[0]:
            raise ValueError("attribute names and values must align")


@dataclass(frozen=True)
class BasinRecord:
    """One basin's forcing, discharge, and static attributes."""

    basin_id: str
    forcing: ForcingSeries
    discharge: DischargeSeries
    attributes: AttributeVector

    def __post_init__(self):
        if not self.basin_id:
            raise ValueError("basin_id must be non-empty")

    def overlap_days(self) -> int:
        first = max(self.forcing.start, self.discharge.start)
        last = min(self.forcing.end, self.discharge.end)
        return max(0, (last - first).days + 1)


def _parse_date(fields, line_no):
    try:
        y, m, d = int(fields[0]), int(fields[1]), int(fields[2])
    except ValueError:
        raise MalformedLine(line_no, f"non-integer date fields {fields[:3]}")
    try:
        return date(y, m, d)
    except ValueError:
        raise MalformedLine(line_no, f"invalid calendar date {fields[:3]}")


def _parse_real(token, line_no):
    try:
        value = float(token)
    except ValueError:
        raise MalformedLine(line_no, f"non-numeric field {token!r}")
    if not math.isfinite(value):
        raise MalformedLine(line_no, f"non-finite field {token!r}")
    return value


def _data_lines(text: str):
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise EmptyFile("missing header line")
    body = [(i + 1, ln) for i, ln in enumerate(lines[1:], start=1) if ln.strip()]
    if not body:
        raise EmptyFile("no data rows")
    return lines[0].strip(), body


def parse_forcing(text: str) -> ForcingSeries:
    """Parse a forcing file into a :class:`ForcingSeries`.

    Args:
        text: full file contents.

    Returns:
        The validated series.

    Raises:
        EmptyFile: no header or no data rows.
        MalformedLine: wrong field count, non-numeric value, bad date.
        NonConsecutiveDates: a calendar gap or out-of-order rows.
    """
    header, body = _data_lines(text)
    if header.split() != FORCING_HEADER.split():
        raise MalformedLine(0, f"expected header {FORCING_HEADER!r}, got {header!r}")

    start = None
    rows = np.empty((len(body), 5), dtype=np.float64)
    for k, (line_no, line) in enumerate(body):
        fields = line.split()
        if len(fields) != 8:
            raise MalformedLine(line_no, f"expected 8 fields, got {len(fields)}")
        day = _parse_date(fields, line_no)
        if k == 0:
            start = day
        elif day != start + timedelta(days=k):
            raise NonConsecutiveDates(
                f"line {line_no}: expected {start + timedelta(days=k)}, got {day}"
            )
        for j in range(5):
            rows[k, j] = _parse_real(fields[3 + j], line_no)
    return ForcingSeries(start=start, values=rows)


def parse_discharge(text: str) -> DischargeSeries:
    """Parse a discharge file into a :class:`DischargeSeries`.

    The sentinel ``-999.0`` maps to the in-memory missing flag; any other
    negative value is a :class:`NegativeDischarge` error.
    """
    header, body = _data_lines(text)
    if header.split() != DISCHARGE_HEADER.split():
        raise MalformedLine(0, f"expected header {DISCHARGE_HEADER!r}, got {header!r}")

    start = None
    values = np.empty(len(body), dtype=np.float64)
    missing = np.zeros(len(body), dtype=bool)
    for k, (line_no, line) in enumerate(body):
        fields = line.split()
        if len(fields) != 4:
            raise MalformedLine(line_no, f"expected 4 fields, got {len(fields)}")
        day = _parse_date(fields, line_no)
        if k == 0:
            start = day
        elif day != start + timedelta(days=k):
            raise NonConsecutiveDates(
                f"line {line_no}: expected {start + timedelta(days=k)}, got {day}"
            )
        q = _parse_real(fields[3], line_no)
        if q == MISSING_SENTINEL:
            values[k] = np.nan
            missing[k] = True
        elif q < 0.0:
            raise NegativeDischarge(f"line {line_no}: discharge {q} < 0")
        else:
            values[k] = q
    return DischargeSeries(start=start, values=values, missing=missing)


def parse_attributes(text: str) -> dict[str, AttributeVector]:
    """Parse the attributes table into a basin_id -> vector map.

    Every basin gets the identical attribute ordering (the header order).
    """
    header, body = _data_lines(text)
    columns = [c.strip() for c in header.split(",")]
    if not columns or columns[0] != "basin_id":
        raise MalformedLine(0, f"expected first column 'basin_id', got {header!r}")
    names = tuple(columns[1:])

    out: dict[str, AttributeVector] = {}
    for line_no, line in body:
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != len(columns):
            raise InconsistentColumnCount(
                f"line {line_no}: expected {len(columns)} columns, got {len(fields)}"
            )
        basin_id = fields[0]
        if not basin_id:
            raise MalformedLine(line_no, "empty basin_id")
        if basin_id in out:
            raise DuplicateBasinId(f"line {line_no}: duplicate basin_id {basin_id!r}")
        try:
            values = np.array([float(tok) for tok in fields[1:]], dtype=np.float64)
        except ValueError:
            raise NonNumericAttribute(f"line {line_no}: non-numeric attribute")
        if values.size and not np.all(np.isfinite(values)):
            raise NonNumericAttribute(f"line {line_no}: non-finite attribute")
        out[basin_id] = AttributeVector(names=names, values=values)
    return out


def serialize_forcing(series: ForcingSeries) -> str:
    lines = [FORCING_HEADER]
    for k in range(series.num_days):
        d = series.date_at(k)
        vals = " ".join(repr(float(v)) for v in series.values[k])
        lines.append(f"{d.year:04d} {d.month:02d} {d.day:02d} {vals}")
    return "\n".join(lines) + "\n"


def serialize_discharge(series: DischargeSeries) -> str:
    lines = [DISCHARGE_HEADER]
    for k in range(series.num_days):
        d = series.date_at(k)
        q = repr(MISSING_SENTINEL) if series.missing[k] else repr(float(series.values[k]))
        lines.append(f"{d.year:04d} {d.month:02d} {d.day:02d} {q}")
    return "\n".join(lines) + "\n"


def serialize_attributes(table: dict[str, AttributeVector]) -> str:
    if not table:
        raise ValueError("cannot serialize an empty attribute table")
    names = next(iter(table.values())).names
    lines = ["basin_id," + ",".join(names)]
    for basin_id in sorted(table):
        vec = table[basin_id]
        if vec.names != names:
            raise InconsistentColumnCount("attribute ordering differs across basins")
        lines.append(basin_id + "," + ",".join(repr(float(v)) for v in vec.values))
    return "\n".join(lines) + "\n"


def _load_one(root: Path, basin_id: str, attrs: AttributeVector):
    forcing_path = root / "forcing" / f"{basin_id}.txt"
    discharge_path = root / "discharge" / f"{basin_id}.txt"
    for p in (forcing_path, discharge_path):
        if not p.is_file():
            logger.warning("basin %s skipped: missing file %s", basin_id, p)
            return None
    record = BasinRecord(
        basin_id=basin_id,
        forcing=parse_forcing(forcing_path.read_text()),
        discharge=parse_discharge(discharge_path.read_text()),
        attributes=attrs,
    )
    if record.overlap_days() < MIN_OVERLAP_DAYS:
        logger.warning(
            "basin %s skipped: forcing/discharge overlap %d days < %d",
            basin_id,
            record.overlap_days(),
            MIN_OVERLAP_DAYS,
        )
        return None
    return record


def load_collection(
    root: str | os.PathLike,
    basin_list: list[str] | None = None,
    max_workers: int = 0,
) -> list[BasinRecord]:
    """Load every usable basin under ``root``, sorted by basin_id.

    Basins listed in the attribute table but lacking data files, or whose
    forcing/discharge overlap is shorter than ``MIN_OVERLAP_DAYS``, are
    skipped with a logged warning rather than failing the collection.

    Args:
        root: collection directory (see module docstring for layout).
        basin_list: optional subset of basin ids to load.
        max_workers: if > 0, parse basins in parallel with this many threads.

    Raises:
        MissingAttributeFile: ``<root>/attributes.csv`` does not exist.
        NoValidBasins: nothing survived filtering and validation.
    """
    root = Path(root)
    attr_path = root / "attributes.csv"
    if not attr_path.is_file():
        raise MissingAttributeFile(str(attr_path))
    attr_table = parse_attributes(attr_path.read_text())

    wanted = sorted(attr_table) if basin_list is None else sorted(set(basin_list))
    jobs = [(bid, attr_table[bid]) for bid in wanted if bid in attr_table]
    for bid in wanted:
        if bid not in attr_table:
            logger.warning("basin %s skipped: not in attribute table", bid)

    if max_workers > 0:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(lambda j: _load_one(root, *j), jobs))
    else:
        results = [_load_one(root, bid, attrs) for bid, attrs in jobs]

    records = [r for r in results if r is not None]
    if not records:
        raise NoValidBasins(f"no usable basins under {root}")
    return records
