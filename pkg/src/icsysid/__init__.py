"""In-context system identification: meta-train a sequence model over random
dynamical-system classes, then adapt it to systems, shifted classes, and
longer prediction horizons."""

from .datapipe import SequenceBatch, SplitDataset, batch_from_sequences, excite, make_batch, make_split_dataset
from .metrics import QuantileBand, abs_error_quantiles, eval_on_stream, rmse, sequence_rmse
from .model import TransformerConfig, TransformerParams, decode, encode, forward, init_params
from .sysgen import (
    ClassSpec,
    LtiSystem,
    PoleRegion,
    StaticNet,
    SystemInstance,
    sample_from_class,
    sample_lti,
    sample_pwh,
    sample_wh,
    simulate,
)
from .train import OptimState, TrainConfig, TrainRecord, adamw_step, adapt, meta_train, mse_loss

__version__ = "0.1.0"

__all__ = [
    "ClassSpec",
    "LtiSystem",
    "OptimState",
    "PoleRegion",
    "QuantileBand",
    "SequenceBatch",
    "SplitDataset",
    "StaticNet",
    "SystemInstance",
    "TrainConfig",
    "TrainRecord",
    "TransformerConfig",
    "TransformerParams",
    "abs_error_quantiles",
    "adamw_step",
    "adapt",
    "batch_from_sequences",
    "decode",
    "encode",
    "eval_on_stream",
    "excite",
    "forward",
    "init_params",
    "make_batch",
    "make_split_dataset",
    "meta_train",
    "mse_loss",
    "rmse",
    "sample_from_class",
    "sample_lti",
    "sample_pwh",
    "sample_wh",
    "sequence_rmse",
    "simulate",
]
