"""Command-line entry point.

Subcommands: ``synth`` (write a synthetic fixture), ``train`` (train one
model variant), ``eval`` (score a checkpoint), ``compare`` (combine
reports into one table).

Exit codes are part of the contract: 0 success, 1 I/O failure, 2 usage or
config or data-format error, 3 training divergence. The environment
variable ``HYDRO_EMBED_THREADS`` caps worker threads for per-basin loading
and evaluation; unset or 0 means fully sequential, deterministic mode.
"""

import argparse
import os
import sys
import time
import zlib
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import (
    TrainConfig,
    config_from_pairs,
    config_to_pairs,
    parse_key_values,
)
from .errors import (
    ConfigError,
    CorruptFile,
    HydroEmbedError,
    IoFailure,
    NonFiniteActivation,
)
from .eval import comparison_table, evaluate, read_report, report_to_csv, write_report
from .ingest import load_collection
from .synth import build_fixture, emit_fixture, serialize_specs
from .train import load_checkpoint, train_run

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3


def _worker_count() -> int:
    raw = os.environ.get("HYDRO_EMBED_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def _data_fingerprint(root: Path) -> str:
    """CRC32 over every file under root, in sorted relative-path order."""
    crc = 0
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        crc = zlib.crc32(str(path.relative_to(root)).encode("utf-8"), crc)
        crc = zlib.crc32(path.read_bytes(), crc)
    return f"{crc:08x}"


def _write_manifest(path: Path, cfg: TrainConfig, started: str, finished: str = "") -> None:
    lines = [
        "# hydro-embed run manifest (also a valid config file)",
        f"# toolkit_version = {__version__}",
        f"# started_at = {started}",
        f"# finished_at = {finished}",
        f"# data_fingerprint = {_data_fingerprint(Path(cfg.data_root))}",
    ]
    lines += [f"{key} = {value}" for key, value in config_to_pairs(cfg)]
    path.write_text("\n".join(lines) + "\n")


def _add_train_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--mode", choices=("none", "static", "embedding", "both"))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--data-root", dest="data_root")
    parser.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    parser.add_argument("--resume", help="checkpoint file to continue from")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hydro-embed",
        description="Joint rainfall-runoff LSTM with learned per-site embeddings",
    )
    parser.add_argument("--version", action="version", version=f"hydro-embed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic basin fixture")
    p.add_argument("--basins", type=int, required=True)
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--shared-forcing",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="drive every basin with identical weather (default: on)",
    )

    p = sub.add_parser("train", help="train one model variant")
    _add_train_overrides(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a basin collection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "table"), default="table")
    p.add_argument("--label", default=None, help="model label for the table row")

    p = sub.add_parser("compare", help="combine evaluation reports into one table")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--out", default=None)
    return parser


def _cmd_synth(args) -> int:
    if args.basins < 1 or args.days < 1 or args.seed < 0:
        raise ConfigError("--basins and --days must be >= 1, --seed >= 0")
    fixture = build_fixture(args.basins, args.days, args.seed, args.shared_forcing)
    out = Path(args.out)
    emit_fixture(fixture, out)
    try:
        (out / "synth_specs.csv").write_text(serialize_specs(fixture))
    except OSError as exc:
        raise IoFailure(f"cannot write {out / 'synth_specs.csv'}: {exc}") from exc
    print(f"wrote {args.basins} basins x {args.days} days to {out}")
    return EXIT_OK


def _resolve_train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = config_from_pairs(parse_key_values(path.read_text()), cfg)
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in ("mode", "seed", "epochs", "data_root", "checkpoint_dir"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = str(value)
    return config_from_pairs(overrides, cfg)


def _cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    if not cfg.data_root:
        raise ConfigError("data_root is required (config key or --data-root)")
    if not cfg.checkpoint_dir:
        raise ConfigError("checkpoint_dir is required (config key or --checkpoint-dir)")
    resume_from = load_checkpoint(args.resume) if args.resume else None

    records = load_collection(cfg.data_root, max_workers=_worker_count())
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    # manifest records post-override values and goes to disk before training
    effective = cfg
    if resume_from is not None:
        effective = replace(_config_from_checkpoint(cfg, resume_from), epochs=cfg.epochs)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    _write_manifest(out_dir / "manifest.txt", effective, started)

    ckpt, log = train_run(records, cfg, resume_from=resume_from)
    _write_manifest(
        out_dir / "manifest.txt", effective, started, time.strftime("%Y-%m-%dT%H:%M:%S")
    )
    if log:
        print(f"trained {len(log)} epochs, final mean loss {log[-1][1]:.6f}")
    print(f"checkpoints in {out_dir}")
    return EXIT_OK


def _config_from_checkpoint(cfg: TrainConfig, ckpt) -> TrainConfig:
    mode = {(0, 0): "none", (1, 0): "static", (0, 1): "embedding", (1, 1): "both"}[
        (int(ckpt.config.use_static), int(ckpt.config.use_embedding))
    ]
    return replace(
        cfg,
        mode=mode,
        split=ckpt.split,
        lookback=ckpt.lookback,
        hidden_size=ckpt.config.hidden_size,
        embedding_dim=ckpt.config.embedding_dim,
        dropout=ckpt.config.dropout_rate,
        epsilon=ckpt.epsilon,
        lr=ckpt.opt.lr,
        beta1=ckpt.opt.beta1,
        beta2=ckpt.opt.beta2,
        adam_eps=ckpt.opt.adam_eps,
        clip_norm=ckpt.opt.clip_norm,
        batch_size=ckpt.batch_size,
        epochs=ckpt.epochs,
        seed=ckpt.seed,
    )


def _cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    records = load_collection(args.data, max_workers=_worker_count())
    report = evaluate(records, checkpoint, max_workers=_worker_count())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    label = args.label or _mode_label(checkpoint.config)
    write_report(report, out / "report.csv", "csv")
    try:
        (out / "report.txt").write_text(comparison_table([(label, report)]))
    except OSError as exc:
        raise IoFailure(f"cannot write report: {exc}") from exc
    if args.format == "csv":
        print(report_to_csv(report), end="")
    else:
        print(comparison_table([(label, report)]), end="")
    return EXIT_OK


def _mode_label(model_cfg) -> str:
    return {
        (False, False): "LSTM w/o static inputs",
        (True, False): "LSTM with static inputs",
        (False, True): "LSTM with embedding",
        (True, True): "LSTM with static inputs + embedding",
    }[(model_cfg.use_static, model_cfg.use_embedding)]


def _cmd_compare(args) -> int:
    if len(args.reports) != len(args.labels):
        raise ConfigError(
            f"{len(args.reports)} reports but {len(args.labels)} labels"
        )
    rows = [(label, read_report(path)) for label, path in zip(args.labels, args.reports)]
    table = comparison_table(rows)
    if args.out:
        try:
            Path(args.out).write_text(table)
        except OSError as exc:
            raise IoFailure(f"cannot write {args.out}: {exc}") from exc
    print(table, end="")
    return EXIT_OK


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors, 0 for --help
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except NonFiniteActivation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (IoFailure, CorruptFile) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except HydroEmbedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
