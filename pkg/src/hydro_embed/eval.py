"""Per-basin Nash-Sutcliffe efficiency and benchmark aggregates.

NSE is 1 minus the squared prediction error normalized by the variance of
the observations: 1 for a perfect simulation, 0 for a model that always
predicts the observed mean, unbounded below. Scores are computed in
physical units (predictions are de-standardized first) and aggregated into
the three benchmark numbers: median NSE, mean NSE, and the number of
basins scoring below zero.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    IncompatibleCheckpoint,
    IoFailure,
    LengthMismatch,
    ZeroVarianceObserved,
)
from .ingest import BasinRecord
from .net import assemble_batch, forward_batch
from .pipeline import SplitSpec, make_samples

# cap forward-pass batch size during evaluation (memory, not semantics)
_EVAL_CHUNK = 512


def nse(observed, modeled) -> float:
    """Nash-Sutcliffe efficiency of a simulation against observations.

    Args:
        observed: observed discharge values.
        modeled: simulated discharge values, same length.

    Returns:
        1 - sum((modeled - observed)^2) / sum((observed - mean)^2),
        in (-inf, 1], equal to 1 exactly when the series are identical.

    Raises:
        LengthMismatch: different lengths, or fewer than 2 values.
        ZeroVarianceObserved: constant observations make NSE undefined.
    """
    obs = np.asarray(observed, dtype=np.float64)
    mod = np.asarray(modeled, dtype=np.float64)
    if obs.shape != mod.shape or obs.ndim != 1 or obs.shape[0] < 2:
        raise LengthMismatch("need two equal-length series of at least 2 values")
    denominator = np.sum((obs - np.mean(obs)) ** 2)
    if denominator == 0.0:
        raise ZeroVarianceObserved("observed series is constant")
    numerator = np.sum((mod - obs) ** 2)
    return float(1.0 - numerator / denominator)


@dataclass(frozen=True)
class BasinScore:
    basin_id: str
    nse: float
    num_samples: int


@dataclass(frozen=True)
class EvalReport:
    """Per-basin scores plus the three aggregate benchmark metrics."""

    scores: list
    median_nse: float | None
    mean_nse: float | None
    num_negative: int
    skipped_basins: list  # (basin_id, reason)

    @classmethod
    def from_scores(cls, scores, skipped) -> "EvalReport":
        values = [s.nse for s in scores]
        if values:
            median = median_of(values)
            mean = sum(values) / len(values)
        else:
            median = mean = None
        return cls(
            scores=list(scores),
            median_nse=median,
            mean_nse=mean,
            num_negative=sum(1 for v in values if v < 0.0),
            skipped_basins=list(skipped),
        )


def _score_basin(record, checkpoint, split):
    cfg = checkpoint.config
    index = checkpoint.basin_ids.index(record.basin_id) if cfg.use_embedding else 0
    samples = make_samples(
        record,
        split,
        "eval",
        checkpoint.standardizers,
        checkpoint.lookback,
        basin_index=index,
    )
    if len(samples) < 2:
        return None, (record.basin_id, "fewer than 2 evaluation samples")

    tstd = checkpoint.standardizers.target
    preds = np.empty(len(samples))
    for lo in range(0, len(samples), _EVAL_CHUNK):
        chunk = samples[lo : lo + _EVAL_CHUNK]
        inputs, indices = assemble_batch(chunk, checkpoint.params, cfg)
        out, _ = forward_batch(inputs, checkpoint.params, cfg, None, indices)
        preds[lo : lo + len(chunk)] = out
    modeled = tstd.invert(preds)
    observed = np.array(
        [record.discharge.values[record.discharge.index_of(s.target_date)] for s in samples]
    )
    try:
        score = nse(observed, modeled)
    except ZeroVarianceObserved:
        return None, (record.basin_id, "zero observed variance")
    return BasinScore(basin_id=record.basin_id, nse=score, num_samples=len(samples)), None


def evaluate(
    records: list[BasinRecord],
    checkpoint,
    split: SplitSpec | None = None,
    max_workers: int = 0,
) -> EvalReport:
    """Score every basin against a trained checkpoint.

    Predictions run in eval mode (no dropout) and are de-standardized to
    physical units before NSE. Basins with fewer than 2 eligible days or
    constant observations are reported as skipped, not errors.

    Args:
        records: basins to score.
        checkpoint: a loaded training checkpoint.
        split: date ranges; defaults to the ranges stored in the checkpoint.
        max_workers: if > 0, score basins in parallel with this many threads.

    Raises:
        IncompatibleCheckpoint: records do not fit the checkpoint's input
            space (attribute count, or unknown basin in embedding mode).
    """
    split = split if split is not None else checkpoint.split
    cfg = checkpoint.config
    static_std = checkpoint.standardizers.static
    for record in records:
        if record.forcing.values.shape[1] != cfg.d_dyn:
            raise IncompatibleCheckpoint(
                f"basin {record.basin_id}: {record.forcing.values.shape[1]} dynamic features, "
                f"checkpoint expects {cfg.d_dyn}"
            )
        if cfg.use_static and record.attributes.values.shape[0] != static_std.num_features:
            raise IncompatibleCheckpoint(
                f"basin {record.basin_id}: {record.attributes.values.shape[0]} attributes, "
                f"checkpoint expects {static_std.num_features}"
            )
        if cfg.use_embedding and record.basin_id not in checkpoint.basin_ids:
            raise IncompatibleCheckpoint(
                f"basin {record.basin_id} not in the checkpoint's embedding table"
            )

    ordered = sorted(records, key=lambda r: r.basin_id)
    if max_workers > 0:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(lambda r: _score_basin(r, checkpoint, split), ordered))
    else:
        results = [_score_basin(r, checkpoint, split) for r in ordered]

    scores = [score for score, _ in results if score is not None]
    skipped = [skip for _, skip in results if skip is not None]
    return EvalReport.from_scores(scores, skipped)


def _format_aggregate(value) -> str:
    return "undefined" if value is None else repr(value)


def write_report(report: EvalReport, path, format: str = "csv") -> None:
    """Write a report as CSV (per-basin rows + aggregate footer) or text table."""
    if format == "csv":
        text = report_to_csv(report)
    elif format == "table":
        text = comparison_table([("model", report)])
    else:
        raise ValueError(f"unknown report format {format!r}")
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write report {path}: {exc}") from exc


def report_to_csv(report: EvalReport) -> str:
    lines = ["basin_id,nse,num_samples"]
    for s in report.scores:
        lines.append(f"{s.basin_id},{s.nse!r},{s.num_samples}")
    lines.append(f"# median_nse,{_format_aggregate(report.median_nse)}")
    lines.append(f"# mean_nse,{_format_aggregate(report.mean_nse)}")
    lines.append(f"# num_negative,{report.num_negative}")
    for basin_id, reason in report.skipped_basins:
        lines.append(f"# skipped,{basin_id},{reason}")
    return "\n".join(lines) + "\n"


def read_report(path) -> EvalReport:
    """Parse a CSV report back; aggregates are recomputed from the rows."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read report {path}: {exc}") from exc
    scores = []
    skipped = []
    lines = text.splitlines()
    if not lines or lines[0] != "basin_id,nse,num_samples":
        raise IoFailure(f"{path} is not a basin report")
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("#"):
            fields = [f.strip() for f in line[1:].split(",")]
            if fields[0] == "skipped" and len(fields) >= 3:
                skipped.append((fields[1], ",".join(fields[2:])))
            continue
        basin_id, value, count = line.split(",")
        scores.append(BasinScore(basin_id=basin_id, nse=float(value), num_samples=int(count)))
    return EvalReport.from_scores(scores, skipped)


def comparison_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Text table with one row per report, mirroring the benchmark layout."""
    header = f"{'model':<32} {'mean NSE':>10} {'median NSE':>12} {'basins NSE<0':>14}"
    lines = [header, "-" * len(header)]
    for label, report in rows:
        mean = "undefined" if report.mean_nse is None else f"{report.mean_nse:.4f}"
        median = "undefined" if report.median_nse is None else f"{report.median_nse:.4f}"
        lines.append(f"{label:<32} {mean:>10} {median:>12} {report.num_negative:>14}")
    return "\n".join(lines) + "\n"


def median_of(values) -> float:
    """Median with the even-count rule used throughout (mean of middle two)."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("median of empty sequence")
    n = len(ordered)
    if n % 2:
        return ordered[n // 2]
    return 0.5 * (ordered[n // 2 - 1] + ordered[n // 2])
