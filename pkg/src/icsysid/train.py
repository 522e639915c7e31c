"""AdamW optimization, the resampling meta-training loop, and adaptation.

Meta-training draws a brand-new batch of systems at every iteration and
tracks a seed-pinned validation pool; adaptation fine-tunes all weights on
minibatches from a fixed dataset with validation-based early stopping.
Both return the best-validation snapshot alongside the final weights.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datapipe import SequenceBatch, SplitDataset, batch_from_sequences, make_batch
from .errors import ConfigError, NumericError, ShapeError
from .model import TransformerConfig, TransformerParams, forward, init_params, resize_decoder_context
from .sysgen import ClassSpec

_INIT_TAG = 101
_DATA_TAG = 202
_VAL_TAG = 303
_EXTRA_TAG = 404
_ADAPT_TAG = 505
_DROPOUT_TAG = 606


@dataclass(frozen=True)
class TrainConfig:
    b: int = 8
    N: int = 150
    m: int = 100
    max_iters: int = 1000
    base_lr: float = 3e-4
    warmup_frac: float = 0.02
    lr_floor_frac: float = 0.1
    eval_every: int = 100
    patience: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    dtype: str = "float32"
    val_systems: int = 64

    def __post_init__(self) -> None:
        if not 1 <= self.m < self.N:
            raise ConfigError(f"need 1 <= m < N, got m={self.m}, N={self.N}")
        if self.b < 1 or self.max_iters < 0:
            raise ConfigError("b must be >= 1 and max_iters >= 0")
        if self.eval_every < 1 or self.patience < 1:
            raise ConfigError("eval_every and patience must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.val_systems < 1:
            raise ConfigError("val_systems must be >= 1")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class OptimState:
    """AdamW moments and hyper-parameters; moments are created lazily."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimState":
        return cls(lr=cfg.base_lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   eps=cfg.eps, weight_decay=cfg.weight_decay)


@dataclass
class TrainRecord:
    """Loss histories plus the best-validation and final parameter snapshots."""

    train_losses: list[float]
    val_iters: list[int]
    val_losses: list[float]
    extra_losses: dict[str, list[float]]
    best_iter: int
    best_val_loss: float
    wall_time: float
    best_params: TransformerParams
    final_params: TransformerParams
    stopped_early: bool = False

    def write_loss_csv(self, path) -> None:
        """Columns iter,train_loss,val_loss; val_loss empty between evaluations."""
        val_at = dict(zip(self.val_iters, self.val_losses))
        lines = ["iter,train_loss,val_loss"]
        if 0 in val_at:
            lines.append(f"0,,{val_at[0]!r}")
        for i, tl in enumerate(self.train_losses, start=1):
            v = val_at.get(i)
            lines.append(f"{i},{tl!r},{'' if v is None else repr(v)}")
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def mse_loss(pred: ad.Tensor, target) -> ad.Tensor:
    """Mean over all elements of the squared error."""
    if not isinstance(target, ad.Tensor):
        target = ad.Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes disagree: {pred.shape} vs {target.shape}")
    diff = ad.sub(pred, target)
    return ad.mean_all(ad.mul(diff, diff))


def _decays(name: str) -> bool:
    # weight matrices decay; biases and layer-norm gains are exempt
    return not name.endswith((".b", ".g"))


def adamw_step(
    tensors: dict[str, ad.Tensor], state: OptimState, lr: float | None = None
) -> None:
    """One decoupled-weight-decay Adam update over every tensor with a gradient.

    Moments use the parameters' own dtype; decay is applied directly to the
    weights, not through the gradient.
    """
    step_lr = state.lr if lr is None else lr
    items = [(name, t) for name, t in sorted(tensors.items()) if t.grad is not None]
    for name, t in items:
        if not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, t in items:
        g = t.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay != 0.0 and _decays(name):
            update = update + state.weight_decay * t.data
        t.data = t.data - step_lr * update


def clip_grad_norm(tensors: dict[str, ad.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    grads = [t.grad for t in tensors.values() if t.grad is not None]
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for t in tensors.values():
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first 2% of iterations, then cosine decay to the floor."""
    warmup = max(1, round(cfg.warmup_frac * cfg.max_iters))
    if it <= warmup:
        return cfg.base_lr * it / warmup
    floor = cfg.base_lr * cfg.lr_floor_frac
    progress = (it - warmup) / max(1, cfg.max_iters - warmup)
    return floor + 0.5 * (cfg.base_lr - floor) * (1.0 + math.cos(math.pi * progress))


def evaluate(params: TransformerParams, batches: list[SequenceBatch]) -> float:
    """Mean squared error over the pooled elements of `batches`; no gradients,
    parameters untouched."""
    frozen = params.detached()
    total, count = 0.0, 0
    for batch in batches:
        yhat = forward(frozen, batch.u_ctx, batch.y_ctx, batch.u_query)
        err = yhat.data - batch.y_query.astype(yhat.data.dtype)
        total += float((err * err).sum())
        count += err.size
    return total / count


def pinned_batches(
    spec: ClassSpec, cfg: TrainConfig, n_systems: int, rng: np.random.Generator
) -> list[SequenceBatch]:
    """A frozen pool of n_systems (system, excitation) pairs, batched by cfg.b."""
    batches = []
    remaining = n_systems
    while remaining > 0:
        k = min(cfg.b, remaining)
        batches.append(make_batch(spec, k, cfg.N, cfg.m, rng))
        remaining -= k
    return batches


class _BestTracker:
    """Best-validation bookkeeping shared by the two training loops."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_iter = 0
        self.best_loss = math.inf
        self.best_params: TransformerParams | None = None
        self.evals_since_best = 0

    def observe(self, it: int, loss: float, params: TransformerParams) -> None:
        if loss < self.best_loss:
            self.best_iter, self.best_loss = it, loss
            self.best_params = params.copy()
            self.evals_since_best = 0
        else:
            self.evals_since_best += 1

    @property
    def exhausted(self) -> bool:
        return self.evals_since_best >= self.patience


def _prepare_params(
    model_cfg: TransformerConfig, cfg: TrainConfig, init: TransformerParams | None
) -> TransformerParams:
    if init is None:
        rng = np.random.default_rng([cfg.seed, _INIT_TAG])
        return init_params(model_cfg, rng, cfg.np_dtype)
    from dataclasses import replace

    if replace(init.config, n_ctx_dec=model_cfg.n_ctx_dec) != model_cfg:
        raise ConfigError(
            "warm-start checkpoint architecture does not match the model config "
            "(only n_ctx_dec may differ)"
        )
    if init.config.n_ctx_dec != model_cfg.n_ctx_dec:
        params = resize_decoder_context(init, model_cfg.n_ctx_dec)
    else:
        params = init.copy()
    if params.dtype != cfg.np_dtype:
        params = params.astype(cfg.np_dtype)
    return params


def _train_step(
    params: TransformerParams,
    state: OptimState,
    batch: SequenceBatch,
    cfg: TrainConfig,
    lr: float,
    dropout_rng: np.random.Generator,
) -> float:
    params.zero_grad()
    yhat = forward(params, batch.u_ctx, batch.y_ctx, batch.u_query,
                   rng=dropout_rng, training=True)
    loss = mse_loss(yhat, batch.y_query)
    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        return loss_val
    loss.backward()
    clip_grad_norm(params.tensors, cfg.grad_clip)
    adamw_step(params.tensors, state, lr=lr)
    return loss_val


def meta_train(
    cfg: TrainConfig,
    class_spec: ClassSpec,
    model_cfg: TransformerConfig,
    init: TransformerParams | None = None,
    val_spec: ClassSpec | None = None,
    extra_eval_specs: dict[str, ClassSpec] | None = None,
) -> TrainRecord:
    """Meta-train on freshly resampled batches; evaluate on pinned pools.

    `init` warm-starts from existing weights (the decoder positional table is
    regenerated when the horizon changed). `val_spec` optionally points the
    validation pool at a different class; `extra_eval_specs` adds named
    side streams evaluated on the same schedule.
    """
    t_start = time.perf_counter()
    params = _prepare_params(model_cfg, cfg, init)
    state = OptimState.from_config(cfg)
    val_batches = pinned_batches(
        val_spec or class_spec, cfg, cfg.val_systems,
        np.random.default_rng([cfg.seed, _VAL_TAG]),
    )
    extra_batches = {
        name: pinned_batches(
            spec, cfg, cfg.val_systems,
            np.random.default_rng([cfg.seed, _EXTRA_TAG, zlib.crc32(name.encode())]),
        )
        for name, spec in sorted((extra_eval_specs or {}).items())
    }
    data_rng = np.random.default_rng([cfg.seed, _DATA_TAG])
    dropout_rng = np.random.default_rng([cfg.seed, _DROPOUT_TAG])

    train_losses: list[float] = []
    val_iters: list[int] = []
    val_losses: list[float] = []
    extra_losses: dict[str, list[float]] = {name: [] for name in extra_batches}
    tracker = _BestTracker(cfg.patience)
    stopped_early = False

    def run_eval(it: int) -> None:
        loss = evaluate(params, val_batches)
        val_iters.append(it)
        val_losses.append(loss)
        for name, batches in extra_batches.items():
            extra_losses[name].append(evaluate(params, batches))
        tracker.observe(it, loss, params)

    if cfg.max_iters > 0:
        run_eval(0)
    for it in range(1, cfg.max_iters + 1):
        batch = make_batch(class_spec, cfg.b, cfg.N, cfg.m, data_rng)
        try:
            loss_val = _train_step(params, state, batch, cfg, lr_at(it, cfg), dropout_rng)
        except NumericError:
            stopped_early = True
            break
        if not math.isfinite(loss_val):
            stopped_early = True
            break
        train_losses.append(loss_val)
        if it % cfg.eval_every == 0:
            run_eval(it)
            if tracker.exhausted:
                stopped_early = True
                break
    best_params = tracker.best_params if tracker.best_params is not None else params.copy()
    return TrainRecord(
        train_losses=train_losses,
        val_iters=val_iters,
        val_losses=val_losses,
        extra_losses=extra_losses,
        best_iter=tracker.best_iter,
        best_val_loss=tracker.best_loss,
        wall_time=time.perf_counter() - t_start,
        best_params=best_params,
        final_params=params,
        stopped_early=stopped_early,
    )


def adapt(
    init: TransformerParams, dataset: SplitDataset, cfg: TrainConfig
) -> TrainRecord:
    """Fine-tune all weights on dataset.train with early stopping on dataset.val.

    Minibatches are drawn with replacement; the returned best snapshot
    reproduces the recorded best validation loss exactly. The test partition
    is never read.
    """
    t_start = time.perf_counter()
    if not (dataset.train and dataset.val and dataset.test):
        raise ConfigError("adaptation needs non-empty train, val and test partitions")
    params = init.copy()
    if params.dtype != cfg.np_dtype:
        params = params.astype(cfg.np_dtype)
    N = dataset.train[0][0].shape[0]
    n_query = N - cfg.m
    if n_query < 1:
        raise ConfigError(f"context m={cfg.m} leaves no query steps in length-{N} sequences")
    if cfg.m > params.config.n_ctx_enc or n_query > params.config.n_ctx_dec:
        raise ShapeError(
            f"sequences (m={cfg.m}, n={n_query}) exceed model capacity "
            f"({params.config.n_ctx_enc}, {params.config.n_ctx_dec})"
        )
    state = OptimState.from_config(cfg)
    val_batch = batch_from_sequences(dataset.val, cfg.m)
    train_u = np.stack([u for u, _ in dataset.train])
    train_y = np.stack([y for _, y in dataset.train])
    rng = np.random.default_rng([cfg.seed, _ADAPT_TAG])
    dropout_rng = np.random.default_rng([cfg.seed, _DROPOUT_TAG])

    train_losses: list[float] = []
    val_iters: list[int] = []
    val_losses: list[float] = []
    tracker = _BestTracker(cfg.patience)
    stopped_early = False

    def run_eval(it: int) -> None:
        loss = evaluate(params, [val_batch])
        val_iters.append(it)
        val_losses.append(loss)
        tracker.observe(it, loss, params)

    if cfg.max_iters > 0:
        run_eval(0)
    for it in range(1, cfg.max_iters + 1):
        idx = rng.integers(0, len(dataset.train), size=cfg.b)
        batch = SequenceBatch(
            u_ctx=train_u[idx, : cfg.m],
            y_ctx=train_y[idx, : cfg.m],
            u_query=train_u[idx, cfg.m :],
            y_query=train_y[idx, cfg.m :],
        )
        try:
            loss_val = _train_step(params, state, batch, cfg, lr_at(it, cfg), dropout_rng)
        except NumericError:
            stopped_early = True
            break
        if not math.isfinite(loss_val):
            stopped_early = True
            break
        train_losses.append(loss_val)
        if it % cfg.eval_every == 0:
            run_eval(it)
            if tracker.exhausted:
                stopped_early = True
                break
    best_params = tracker.best_params if tracker.best_params is not None else params.copy()
    return TrainRecord(
        train_losses=train_losses,
        val_iters=val_iters,
        val_losses=val_losses,
        extra_losses={},
        best_iter=tracker.best_iter,
        best_val_loss=tracker.best_loss,
        wall_time=time.perf_counter() - t_start,
        best_params=best_params,
        final_params=params,
        stopped_early=stopped_early,
    )
