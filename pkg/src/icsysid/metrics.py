"""Evaluation metrics: RMSE, absolute-error quantile bands, stream losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datapipe import make_batch
from .errors import ConfigError, ShapeError
from .model import TransformerParams
from .sysgen import ClassSpec
from .train import TrainConfig, evaluate

_STREAM_TAG = 707


@dataclass
class QuantileBand:
    """Per-time-step lower/upper quantiles of the absolute simulation error."""

    q_lo: np.ndarray  # (n,)
    q_hi: np.ndarray  # (n,)
    population: int

    def __post_init__(self) -> None:
        if np.any(self.q_lo > self.q_hi):
            raise ConfigError("quantile band has q_lo > q_hi somewhere")


def rmse(yhat: np.ndarray, y: np.ndarray) -> float:
    """Root mean squared error pooled over every element of the arrays."""
    yhat, y = np.asarray(yhat), np.asarray(y)
    if yhat.shape != y.shape:
        raise ShapeError(f"rmse shapes disagree: {yhat.shape} vs {y.shape}")
    err = yhat.astype(np.float64) - y.astype(np.float64)
    return float(np.sqrt(np.mean(err * err)))


def sequence_rmse(yhat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sequence RMSE over leading axis 0; aggregate test scores as its mean."""
    yhat, y = np.asarray(yhat), np.asarray(y)
    if yhat.shape != y.shape:
        raise ShapeError(f"rmse shapes disagree: {yhat.shape} vs {y.shape}")
    err = yhat.astype(np.float64) - y.astype(np.float64)
    return np.sqrt((err * err).reshape(err.shape[0], -1).mean(axis=1))


def abs_error_quantiles(
    errors: np.ndarray, q_lo: float = 0.25, q_hi: float = 0.75
) -> QuantileBand:
    """Empirical per-time-step quantiles of |error| over a population.

    `errors` has shape (population, n); quantiles interpolate linearly
    between closest order statistics.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2 or errors.shape[0] < 2:
        raise ConfigError(f"need a (population >= 2, n) error array, got {errors.shape}")
    if not 0.0 <= q_lo <= q_hi <= 1.0:
        raise ConfigError(f"need 0 <= q_lo <= q_hi <= 1, got ({q_lo}, {q_hi})")
    magnitude = np.abs(errors)
    lo = np.quantile(magnitude, q_lo, axis=0, method="linear")
    hi = np.quantile(magnitude, q_hi, axis=0, method="linear")
    return QuantileBand(q_lo=lo, q_hi=hi, population=errors.shape[0])


def eval_on_stream(
    params: TransformerParams, class_spec: ClassSpec, n_batches: int, cfg: TrainConfig
) -> float:
    """Mean loss over seed-pinned fresh batches; parameters are left untouched."""
    if n_batches < 1:
        raise ConfigError(f"n_batches must be >= 1, got {n_batches}")
    rng = np.random.default_rng([cfg.seed, _STREAM_TAG])
    batches = [make_batch(class_spec, cfg.b, cfg.N, cfg.m, rng) for _ in range(n_batches)]
    return evaluate(params, batches)


def write_quantile_band_csv(path, pre: QuantileBand, post: QuantileBand) -> None:
    """Columns step,q25_pre,q75_pre,q25_post,q75_post (step is 1-based)."""
    if len(pre.q_lo) != len(post.q_lo):
        raise ShapeError("pre/post bands cover different horizons")
    lines = ["step,q25_pre,q75_pre,q25_post,q75_post"]
    for k in range(len(pre.q_lo)):
        cells = (pre.q_lo[k], pre.q_hi[k], post.q_lo[k], post.q_hi[k])
        lines.append(f"{k + 1}," + ",".join(repr(float(c)) for c in cells))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
