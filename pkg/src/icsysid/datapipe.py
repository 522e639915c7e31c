"""Normalized context/query sequence batches from freshly sampled systems.

Every output sequence is normalized to zero mean and unit variance over its
own full length, so a constant-zero predictor scores a mean-squared error
of one; inputs are white Gaussian and left as generated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .sysgen import ClassSpec, SystemInstance, sample_from_class, simulate

DEGENERATE_STD = 1e-12
_MAX_RESAMPLE = 100


@dataclass
class SequenceBatch:
    """b sequences split at index m into context and query segments."""

    u_ctx: np.ndarray    # (b, m, n_u)
    y_ctx: np.ndarray    # (b, m, n_y)
    u_query: np.ndarray  # (b, n, n_u)
    y_query: np.ndarray  # (b, n, n_y)

    @property
    def size(self) -> int:
        return self.u_ctx.shape[0]


@dataclass
class SplitDataset:
    """Ordered train/val/test partitions of (u, y) sequences, each (N, 1)."""

    train: list[tuple[np.ndarray, np.ndarray]]
    val: list[tuple[np.ndarray, np.ndarray]]
    test: list[tuple[np.ndarray, np.ndarray]]


def excite(N: int, n_u: int, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian excitation, i.i.d. standard normal entries, shape (N, n_u)."""
    if N < 1:
        raise ConfigError(f"sequence length must be >= 1, got {N}")
    return rng.standard_normal((N, n_u))


def normalize(y: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance rescaling using the sequence's own statistics."""
    return (y - y.mean()) / y.std()


def _simulate_normalized(
    system: SystemInstance, N: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray] | None:
    """One excitation/response pair, or None when the response is degenerate."""
    u = excite(N, 1, rng)
    y = simulate(system, u[:, 0])
    if y.std() < DEGENERATE_STD:
        return None
    return u, normalize(y)[:, None]


def make_batch(
    spec: ClassSpec, b: int, N: int, m: int, rng: np.random.Generator
) -> SequenceBatch:
    """Sample b fresh systems, excite, simulate, normalize, and split at m."""
    if b < 1:
        raise ConfigError(f"batch size must be >= 1, got {b}")
    if not 1 <= m < N:
        raise ConfigError(f"need 1 <= m < N, got m={m}, N={N}")
    us = np.empty((b, N, 1))
    ys = np.empty((b, N, 1))
    for i in range(b):
        for _ in range(_MAX_RESAMPLE):
            system = sample_from_class(spec, rng)
            pair = _simulate_normalized(system, N, rng)
            if pair is not None:
                break
        else:
            raise NumericError(f"degenerate output for {_MAX_RESAMPLE} sampled systems")
        us[i], ys[i] = pair
    return SequenceBatch(
        u_ctx=us[:, :m], y_ctx=ys[:, :m], u_query=us[:, m:], y_query=ys[:, m:]
    )


def make_split_dataset(
    system: SystemInstance,
    n_seq: int,
    N: int,
    split: tuple[int, int, int],
    rng: np.random.Generator,
) -> SplitDataset:
    """n_seq independent excitations of one system, partitioned train/val/test.

    The system state is reset before every sequence; each output is normalized
    with its own full-length statistics.
    """
    n_train, n_val, n_test = split
    if n_train + n_val + n_test != n_seq:
        raise ConfigError(f"split {split} does not sum to n_seq={n_seq}")
    sequences = []
    for _ in range(n_seq):
        for _ in range(_MAX_RESAMPLE):
            system.reset()
            pair = _simulate_normalized(system, N, rng)
            if pair is not None:
                break
        else:
            raise NumericError(f"degenerate output after {_MAX_RESAMPLE} excitations")
        sequences.append(pair)
    return SplitDataset(
        train=sequences[:n_train],
        val=sequences[n_train : n_train + n_val],
        test=sequences[n_train + n_val :],
    )


def batch_from_sequences(
    sequences: list[tuple[np.ndarray, np.ndarray]], m: int
) -> SequenceBatch:
    """Stack stored (u, y) sequences into one batch split at index m."""
    if not sequences:
        raise ConfigError("cannot build a batch from zero sequences")
    N = sequences[0][0].shape[0]
    if not 1 <= m < N:
        raise ShapeError(f"need 1 <= m < N, got m={m}, N={N}")
    us = np.stack([u for u, _ in sequences])
    ys = np.stack([y for _, y in sequences])
    return SequenceBatch(
        u_ctx=us[:, :m], y_ctx=ys[:, :m], u_query=us[:, m:], y_query=ys[:, m:]
    )
