"""Joint rainfall-runoff LSTM toolkit with learned per-site embeddings."""

__version__ = "0.1.0"

from .config import TrainConfig
from .eval import EvalReport, evaluate, nse
from .ingest import BasinRecord, load_collection
from .net import ModelConfig, ModelParams, forward, init_params
from .pipeline import SplitSpec, Standardizer, fit_standardizer, make_batches, make_samples
from .train import Checkpoint, load_checkpoint, nse_star_loss, save_checkpoint, train_run

__all__ = [
    "BasinRecord",
    "Checkpoint",
    "EvalReport",
    "ModelConfig",
    "ModelParams",
    "SplitSpec",
    "Standardizer",
    "TrainConfig",
    "evaluate",
    "fit_standardizer",
    "forward",
    "init_params",
    "load_checkpoint",
    "load_collection",
    "make_batches",
    "make_samples",
    "nse",
    "nse_star_loss",
    "save_checkpoint",
    "train_run",
    "__version__",
]
