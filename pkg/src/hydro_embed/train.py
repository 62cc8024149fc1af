"""Training: variance-normalized squared-error loss, Adam, checkpoints.

The batch loss normalizes each sample's squared error by the square of
(training-period flow std of its basin + epsilon), then averages over the
batch. Low-variance basins therefore contribute on the same scale as
flashy ones, and epsilon keeps the denominator away from zero. With
epsilon = 0 and a single basin this reduces exactly to 1 - NSE of the
predictions over that basin's training targets.

Checkpoints are a self-describing binary container: magic ``HYEM``, a
u32 format version, a sequence of named little-endian numeric blocks
(u32 name length, name bytes, u8 dtype tag, u32 rank, u64 dims, payload),
and a trailing CRC32 of all preceding bytes.
"""

import logging
import struct
import zlib
from dataclasses import dataclass, replace
from datetime import date
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import (
    CorruptFile,
    IncompatibleCheckpoint,
    IoFailure,
    MissingBasinStd,
    NonFiniteActivation,
    VersionMismatch,
)
from .ingest import BasinRecord
from .net import (
    Gradients,
    ModelConfig,
    ModelParams,
    assemble_batch,
    backward_batch,
    draw_dropout_mask,
    forward_batch,
    init_params,
)
from .pipeline import (
    SplitSpec,
    Standardizer,
    StandardizerSet,
    fit_standardizer,
    make_batches,
    make_samples,
)
from .prng import Xoshiro256StarStar, derive_seed

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HYEM"
CHECKPOINT_VERSION = 1

# sub-seed layout of the run stream: init, then (shuffle, dropout) per epoch
_SEED_INIT = 0


def _epoch_seeds(seed: int, epoch: int) -> tuple[int, int]:
    return derive_seed(seed, 1 + 2 * epoch), derive_seed(seed, 2 + 2 * epoch)


@dataclass(frozen=True)
class LossConfig:
    """Per-basin flow stds (standardized space) and the robustness constant."""

    basin_flow_std: np.ndarray  # (num_basins,)
    epsilon: float = 0.1

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")
        if np.any(self.basin_flow_std < 0.0):
            raise ValueError("basin flow stds must be >= 0")
        if self.epsilon == 0.0 and np.any(self.basin_flow_std == 0.0):
            raise ValueError("epsilon = 0 requires strictly positive basin flow stds")


def nse_star_loss(
    predictions,
    targets,
    basin_indices,
    loss_cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Basin-normalized batch loss and its gradient w.r.t. predictions.

    loss = (1/B) * sum_j (pred_j - target_j)^2 / (s_{b(j)} + eps)^2

    Returns:
        (loss, d loss / d predictions), the gradient entry j being
        2 (pred_j - target_j) / (B * (s_{b(j)} + eps)^2).

    Raises:
        MissingBasinStd: a basin index has no std entry.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    targs = np.asarray(targets, dtype=np.float64)
    idx = np.asarray(basin_indices, dtype=np.int64)
    if not (preds.shape == targs.shape == idx.shape) or preds.ndim != 1 or preds.size < 1:
        raise ValueError("predictions, targets, basin_indices must be equal-length vectors")
    if np.any(idx < 0) or np.any(idx >= loss_cfg.basin_flow_std.shape[0]):
        raise MissingBasinStd(f"basin index outside [0, {loss_cfg.basin_flow_std.shape[0]})")
    denom = (loss_cfg.basin_flow_std[idx] + loss_cfg.epsilon) ** 2
    errors = preds - targs
    batch = preds.shape[0]
    loss = float(np.sum(errors**2 / denom) / batch)
    d_pred = 2.0 * errors / (batch * denom)
    return loss, d_pred


def clip_gradients(grads: Gradients, clip_norm: float) -> Gradients:
    """Scale gradients so their global L2 norm is at most ``clip_norm``."""
    if clip_norm <= 0.0:
        raise ValueError("clip_norm must be > 0")
    flat = grads.flatten()
    norm = float(np.sqrt(flat @ flat))
    if norm <= clip_norm:
        return grads
    return grads.scaled(clip_norm / norm)


@dataclass(frozen=True)
class OptState:
    """Adam accumulators (flat, canonical parameter order) and hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0

    @classmethod
    def fresh(cls, params: ModelParams, **hyper) -> "OptState":
        n = params.num_params
        return cls(m=np.zeros(n), v=np.zeros(n), step_count=0, **hyper)


def adam_step(
    params: ModelParams, grads: Gradients, opt: OptState
) -> tuple[ModelParams, OptState]:
    """One bias-corrected Adam update; moments decay densely everywhere."""
    g = grads.flatten()
    p = params.flatten()
    t = opt.step_count + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
    m_hat = m / (1.0 - opt.beta1**t)
    v_hat = v / (1.0 - opt.beta2**t)
    p = p - opt.lr * m_hat / (np.sqrt(v_hat) + opt.adam_eps)
    return ModelParams.from_flat(p, like=params), replace(opt, m=m, v=v, step_count=t)


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to evaluate or bit-exactly resume a run."""

    config: ModelConfig
    params: ModelParams
    opt: OptState
    standardizers: StandardizerSet
    basin_ids: tuple
    basin_flow_std: np.ndarray
    epoch: int  # completed epochs
    split: SplitSpec
    seed: int
    batch_size: int
    epochs: int  # target epoch count of the run
    lookback: int
    epsilon: float


# --- binary container -------------------------------------------------------

_DTYPE_TAGS = {0: "<f8", 1: "<i8", 2: "u1"}
_TAG_FOR_KIND = {"f": 0, "i": 1, "u": 2}


def _write_block(chunks: list, name: str, array: np.ndarray) -> None:
    data = np.asarray(array)
    tag = _TAG_FOR_KIND[data.dtype.kind]
    data = data.astype(_DTYPE_TAGS[tag], copy=False)
    if data.ndim:
        data = np.ascontiguousarray(data)  # ascontiguousarray would promote 0-d to 1-d
    name_b = name.encode("utf-8")
    chunks.append(struct.pack("<I", len(name_b)))
    chunks.append(name_b)
    chunks.append(struct.pack("<BI", tag, data.ndim))
    chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b"")
    chunks.append(data.tobytes())


def _blocks_to_bytes(blocks: dict[str, np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, array in blocks.items():
        _write_block(chunks, name, array)
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def _bytes_to_blocks(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < 12:
        raise CorruptFile("file too short to be a checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile("checksum mismatch")
    if body[:4] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"bad magic {body[:4]!r}")
    (version,) = struct.unpack("<I", body[4:8])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"unsupported format version {version}")

    blocks: dict[str, np.ndarray] = {}
    offset = 8
    try:
        while offset < len(body):
            (name_len,) = struct.unpack_from("<I", body, offset)
            offset += 4
            name = body[offset : offset + name_len].decode("utf-8")
            offset += name_len
            tag, rank = struct.unpack_from("<BI", body, offset)
            offset += 5
            shape = struct.unpack_from(f"<{rank}Q", body, offset) if rank else ()
            offset += 8 * rank
            dtype = np.dtype(_DTYPE_TAGS[tag])
            count = int(np.prod(shape)) if rank else 1
            end = offset + count * dtype.itemsize
            if end > len(body):
                raise CorruptFile("block payload runs past end of file")
            blocks[name] = np.frombuffer(body[offset:end], dtype=dtype).reshape(shape).copy()
            offset = end
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"malformed block structure: {exc}") from exc
    return blocks


def _scalar(value, dtype) -> np.ndarray:
    return np.array(value, dtype=dtype)


def _text_block(items) -> np.ndarray:
    return np.frombuffer("\n".join(items).encode("utf-8"), dtype="u1").copy()


def _text_unblock(block: np.ndarray) -> list[str]:
    text = block.tobytes().decode("utf-8")
    return text.split("\n") if text else []


def _split_to_array(split: SplitSpec) -> np.ndarray:
    days = []
    for d in (split.train_start, split.train_end, split.eval_start, split.eval_end):
        days.extend((d.year, d.month, d.day))
    return np.array(days, dtype=np.int64)


def _split_from_array(arr: np.ndarray) -> SplitSpec:
    d = [date(int(arr[i]), int(arr[i + 1]), int(arr[i + 2])) for i in range(0, 12, 3)]
    return SplitSpec(train_start=d[0], train_end=d[1], eval_start=d[2], eval_end=d[3])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a checkpoint; round-trips bitwise through :func:`load_checkpoint`."""
    cfg = ckpt.config
    std = ckpt.standardizers
    blocks: dict[str, np.ndarray] = {
        "model_dims": np.array(
            [
                cfg.d_dyn,
                cfg.hidden_size,
                cfg.embedding_dim,
                cfg.num_basins,
                cfg.d_static,
                int(cfg.use_static),
                int(cfg.use_embedding),
            ],
            dtype=np.int64,
        ),
        "dropout_rate": _scalar(cfg.dropout_rate, np.float64),
        "w_ih": ckpt.params.w_ih,
        "w_hh": ckpt.params.w_hh,
        "b": ckpt.params.b,
        "head_w": ckpt.params.head_w,
        "head_b": _scalar(ckpt.params.head_b, np.float64),
        "embed": ckpt.params.embed,
        "opt_m": ckpt.opt.m,
        "opt_v": ckpt.opt.v,
        "opt_step": _scalar(ckpt.opt.step_count, np.int64),
        "opt_hyper": np.array(
            [ckpt.opt.lr, ckpt.opt.beta1, ckpt.opt.beta2, ckpt.opt.adam_eps, ckpt.opt.clip_norm],
            dtype=np.float64,
        ),
        "std_dyn_mean": std.dynamic.means,
        "std_dyn_std": std.dynamic.stds,
        "std_target_mean": std.target.means,
        "std_target_std": std.target.stds,
        "std_static_mean": std.static.means if std.static else np.zeros(0),
        "std_static_std": std.static.stds if std.static else np.zeros(0),
        "has_static_std": _scalar(int(std.static is not None), np.int64),
        "basin_ids": _text_block(ckpt.basin_ids),
        "basin_flow_std": ckpt.basin_flow_std,
        "epoch": _scalar(ckpt.epoch, np.int64),
        "split": _split_to_array(ckpt.split),
        "train_meta_i": np.array(
            [ckpt.seed, ckpt.batch_size, ckpt.epochs, ckpt.lookback], dtype=np.int64
        ),
        "train_epsilon": _scalar(ckpt.epsilon, np.float64),
    }
    try:
        Path(path).write_bytes(_blocks_to_bytes(blocks))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        VersionMismatch: wrong magic bytes or unsupported version.
        CorruptFile: truncated file or checksum/structure damage.
        IoFailure: unreadable path.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    blocks = _bytes_to_blocks(raw)
    try:
        dims = blocks["model_dims"]
        config = ModelConfig(
            d_dyn=int(dims[0]),
            hidden_size=int(dims[1]),
            embedding_dim=int(dims[2]),
            num_basins=int(dims[3]),
            d_static=int(dims[4]),
            dropout_rate=float(blocks["dropout_rate"]),
            use_static=bool(dims[5]),
            use_embedding=bool(dims[6]),
        )
        params = ModelParams(
            w_ih=blocks["w_ih"],
            w_hh=blocks["w_hh"],
            b=blocks["b"],
            head_w=blocks["head_w"],
            head_b=float(blocks["head_b"]),
            embed=blocks["embed"],
        )
        hyper = blocks["opt_hyper"]
        opt = OptState(
            m=blocks["opt_m"],
            v=blocks["opt_v"],
            step_count=int(blocks["opt_step"]),
            lr=float(hyper[0]),
            beta1=float(hyper[1]),
            beta2=float(hyper[2]),
            adam_eps=float(hyper[3]),
            clip_norm=float(hyper[4]),
        )
        static_std = None
        if int(blocks["has_static_std"]):
            static_std = Standardizer(
                means=blocks["std_static_mean"], stds=blocks["std_static_std"]
            )
        standardizers = StandardizerSet(
            dynamic=Standardizer(means=blocks["std_dyn_mean"], stds=blocks["std_dyn_std"]),
            target=Standardizer(means=blocks["std_target_mean"], stds=blocks["std_target_std"]),
            static=static_std,
        )
        meta = blocks["train_meta_i"]
        return Checkpoint(
            config=config,
            params=params,
            opt=opt,
            standardizers=standardizers,
            basin_ids=tuple(_text_unblock(blocks["basin_ids"])),
            basin_flow_std=blocks["basin_flow_std"],
            epoch=int(blocks["epoch"]),
            split=_split_from_array(blocks["split"]),
            seed=int(meta[0]),
            batch_size=int(meta[1]),
            epochs=int(meta[2]),
            lookback=int(meta[3]),
            epsilon=float(blocks["train_epsilon"]),
        )
    except KeyError as exc:
        raise CorruptFile(f"checkpoint missing block {exc}") from exc


# --- the training loop -------------------------------------------------------


def _fit_all_standardizers(records, split, use_static) -> StandardizerSet:
    return StandardizerSet(
        dynamic=fit_standardizer(records, split, "dynamic"),
        target=fit_standardizer(records, split, "target"),
        static=fit_standardizer(records, split, "static") if use_static else None,
    )


def _training_samples(records, split, std, lookback):
    """Per-basin train samples plus the basin flow stds the loss needs."""
    all_samples = []
    flow_std = np.zeros(len(records))
    for index, record in enumerate(records):
        samples = make_samples(record, split, "train", std, lookback, basin_index=index)
        if not samples:
            logger.warning("basin %s has no training samples; it stays untrained", record.basin_id)
            continue
        flow_std[index] = float(np.std(np.array([s.target for s in samples])))
        all_samples.extend(samples)
    return all_samples, flow_std


def train_run(
    records: list[BasinRecord],
    cfg: TrainConfig,
    resume_from: Checkpoint | None = None,
) -> tuple[Checkpoint, list[tuple[int, float]]]:
    """Run (or resume) a full training job.

    Deterministic given (records, cfg): parameter init and the per-epoch
    shuffle/dropout streams are pure functions of cfg.seed, so two runs
    with the same inputs produce bit-identical checkpoints, and resuming
    from epoch k reproduces the uninterrupted run exactly.

    Writes ``epoch_NNNN.ckpt``, ``final.ckpt`` and ``loss_log.csv`` under
    cfg.checkpoint_dir when it is set.

    Raises:
        NonFiniteActivation: divergence, annotated with epoch/batch/basins.
        IncompatibleCheckpoint: resume checkpoint does not match records/cfg.
    """
    records = sorted(records, key=lambda r: r.basin_id)
    basin_ids = tuple(r.basin_id for r in records)

    if resume_from is None:
        split = cfg.split
        split.check_lookback(cfg.lookback)
        std = _fit_all_standardizers(records, split, cfg.use_static)
        model_cfg = ModelConfig(
            d_dyn=5,
            hidden_size=cfg.hidden_size,
            embedding_dim=cfg.embedding_dim,
            num_basins=len(records),
            d_static=records[0].attributes.values.shape[0] if cfg.use_static else 0,
            dropout_rate=cfg.dropout,
            use_static=cfg.use_static,
            use_embedding=cfg.use_embedding,
        )
        params = init_params(model_cfg, derive_seed(cfg.seed, _SEED_INIT))
        opt = OptState.fresh(
            params,
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            adam_eps=cfg.adam_eps,
            clip_norm=cfg.clip_norm,
        )
        start_epoch = 0
        seed = cfg.seed
        samples, flow_std = _training_samples(records, split, std, cfg.lookback)
    else:
        ck = resume_from
        if ck.basin_ids != basin_ids:
            raise IncompatibleCheckpoint("checkpoint basin table does not match the data root")
        std = ck.standardizers
        model_cfg = ck.config
        params = ck.params
        opt = ck.opt
        start_epoch = ck.epoch
        seed = ck.seed
        split = ck.split
        split.check_lookback(ck.lookback)
        samples, _ = _training_samples(records, split, std, ck.lookback)
        flow_std = ck.basin_flow_std
        cfg = replace(
            cfg,
            mode={(0, 0): "none", (1, 0): "static", (0, 1): "embedding", (1, 1): "both"}[
                (int(model_cfg.use_static), int(model_cfg.use_embedding))
            ],
            split=ck.split,
            lookback=ck.lookback,
            hidden_size=model_cfg.hidden_size,
            embedding_dim=model_cfg.embedding_dim,
            dropout=model_cfg.dropout_rate,
            epsilon=ck.epsilon,
            lr=ck.opt.lr,
            beta1=ck.opt.beta1,
            beta2=ck.opt.beta2,
            adam_eps=ck.opt.adam_eps,
            clip_norm=ck.opt.clip_norm,
            batch_size=ck.batch_size,
            seed=ck.seed,
        )

    loss_cfg = LossConfig(basin_flow_std=flow_std, epsilon=cfg.epsilon)
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "loss_log.csv"
        log_mode = "a" if (resume_from is not None and log_path.exists()) else "w"
        log_file = open(log_path, log_mode)
        if log_mode == "w":
            log_file.write("epoch,mean_train_loss\n")
    else:
        log_file = None

    def make_checkpoint(epoch):
        return Checkpoint(
            config=model_cfg,
            params=params,
            opt=opt,
            standardizers=std,
            basin_ids=basin_ids,
            basin_flow_std=flow_std,
            epoch=epoch,
            split=split,
            seed=seed,
            batch_size=cfg.batch_size,
            epochs=cfg.epochs,
            lookback=cfg.lookback,
            epsilon=cfg.epsilon,
        )

    log: list[tuple[int, float]] = []
    ckpt = make_checkpoint(start_epoch)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            shuffle_seed, dropout_seed = _epoch_seeds(seed, epoch)
            batches = make_batches(samples, cfg.batch_size, shuffle_seed)
            dropout_rng = Xoshiro256StarStar(dropout_seed)
            total = 0.0
            count = 0
            for batch_no, batch in enumerate(batches):
                mask = None
                if model_cfg.dropout_rate > 0.0:
                    mask = draw_dropout_mask(
                        dropout_rng, model_cfg.hidden_size, model_cfg.dropout_rate
                    )
                inputs, indices = assemble_batch(batch.samples, params, model_cfg)
                targets = np.fromiter(
                    (s.target for s in batch.samples), dtype=np.float64, count=len(batch)
                )
                try:
                    preds, tape = forward_batch(inputs, params, model_cfg, mask, indices)
                    loss, d_pred = nse_star_loss(preds, targets, indices, loss_cfg)
                    if not np.isfinite(loss):
                        raise NonFiniteActivation("non-finite loss")
                except NonFiniteActivation as exc:
                    basins = sorted({basin_ids[i] for i in indices})
                    raise NonFiniteActivation(
                        f"divergence at epoch {epoch + 1}, batch {batch_no + 1}, "
                        f"basins {basins}: {exc}"
                    ) from exc
                grads, _ = backward_batch(tape, d_pred, params, model_cfg)
                grads = clip_gradients(grads, opt.clip_norm)
                params, opt = adam_step(params, grads, opt)
                total += loss * len(batch)
                count += len(batch)
            mean_loss = total / count
            log.append((epoch + 1, mean_loss))
            if log_file is not None:
                log_file.write(f"{epoch + 1},{mean_loss!r}\n")
                log_file.flush()
            logger.info("epoch %d/%d mean train loss %.6f", epoch + 1, cfg.epochs, mean_loss)
            ckpt = make_checkpoint(epoch + 1)
            if out_dir is not None:
                save_checkpoint(out_dir / f"epoch_{epoch + 1:04d}.ckpt", ckpt)
    finally:
        if log_file is not None:
            log_file.close()

    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", ckpt)
    return ckpt, log
