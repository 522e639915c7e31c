"""Encoder-decoder sequence model for simulating dynamical systems in context.

The encoder ingests the (input, output) context window; the decoder consumes
the query input under a causal mask, cross-attends over the encoder memory,
and emits the predicted query output in a single pass. Blocks are pre-norm
residual with GELU MLPs; positional information comes from fixed sinusoidal
tables that are never trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_ctx_enc: int = 100
    n_ctx_dec: int = 50
    n_u: int = 1
    n_y: int = 1
    d_ff: int | None = None  # defaults to 4 * d_model
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.n_layers < 1 or self.d_model < 1 or self.d_ff < 1:
            raise ConfigError("n_layers, d_model and d_ff must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.n_ctx_enc < 1 or self.n_ctx_dec < 1:
            raise ConfigError("context capacities must be >= 1")
        if self.n_u < 1 or self.n_y < 1:
            raise ConfigError("channel counts must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


def sinusoidal_table(length: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Fixed sin/cos positional table, shape (length, d_model)."""
    position = np.arange(length, dtype=np.float64)[:, None]
    half = (d_model + 1) // 2
    freq = np.exp(-math.log(10000.0) * (2.0 * np.arange(half) / d_model))[None, :]
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(position * freq)
    table[:, 1::2] = np.cos(position * freq[:, : d_model // 2])
    return table.astype(dtype)


@dataclass
class TransformerParams:
    """All named weights plus the fixed (non-learned) positional tables."""

    config: TransformerConfig
    tensors: dict[str, ad.Tensor]
    enc_pos: np.ndarray = field(repr=False)
    dec_pos: np.ndarray = field(repr=False)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "TransformerParams":
        tensors = {
            name: ad.Tensor(np.array(t.data), requires_grad=True)
            for name, t in self.tensors.items()
        }
        return TransformerParams(
            config=self.config,
            tensors=tensors,
            enc_pos=np.array(self.enc_pos),
            dec_pos=np.array(self.dec_pos),
        )

    def detached(self) -> "TransformerParams":
        """Read-only view sharing the same arrays; forwards build no graph."""
        tensors = {name: t.detach() for name, t in self.tensors.items()}
        return TransformerParams(
            config=self.config, tensors=tensors, enc_pos=self.enc_pos, dec_pos=self.dec_pos
        )

    def astype(self, dtype) -> "TransformerParams":
        tensors = {
            name: ad.Tensor(t.data.astype(dtype), requires_grad=True)
            for name, t in self.tensors.items()
        }
        return TransformerParams(
            config=self.config,
            tensors=tensors,
            enc_pos=self.enc_pos.astype(dtype),
            dec_pos=self.dec_pos.astype(dtype),
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


@dataclass
class EncoderMemory:
    """Embedding sequence produced by the encoder, shape (b, m, d_model)."""

    zeta: ad.Tensor


def _attention_names(prefix: str) -> list[str]:
    return [f"{prefix}.{proj}.{suffix}" for proj in ("q", "k", "v", "o") for suffix in ("w", "b")]


def parameter_names(cfg: TransformerConfig) -> list[str]:
    """Stable, versioned tensor naming shared with the checkpoint container."""
    names = ["enc.in.w", "enc.in.b"]
    for i in range(cfg.n_layers):
        names += [f"enc.{i}.ln1.g", f"enc.{i}.ln1.b"]
        names += _attention_names(f"enc.{i}.attn")
        names += [f"enc.{i}.ln2.g", f"enc.{i}.ln2.b"]
        names += [f"enc.{i}.mlp.fc1.w", f"enc.{i}.mlp.fc1.b",
                  f"enc.{i}.mlp.fc2.w", f"enc.{i}.mlp.fc2.b"]
    names += ["enc.ln.g", "enc.ln.b", "dec.in.w", "dec.in.b"]
    for i in range(cfg.n_layers):
        names += [f"dec.{i}.ln1.g", f"dec.{i}.ln1.b"]
        names += _attention_names(f"dec.{i}.self")
        names += [f"dec.{i}.ln2.g", f"dec.{i}.ln2.b"]
        names += _attention_names(f"dec.{i}.cross")
        names += [f"dec.{i}.ln3.g", f"dec.{i}.ln3.b"]
        names += [f"dec.{i}.mlp.fc1.w", f"dec.{i}.mlp.fc1.b",
                  f"dec.{i}.mlp.fc2.w", f"dec.{i}.mlp.fc2.b"]
    names += ["dec.ln.g", "dec.ln.b", "head.w", "head.b"]
    return names


def _tensor_shape(name: str, cfg: TransformerConfig) -> tuple[int, ...]:
    d, f = cfg.d_model, cfg.d_ff
    if name == "enc.in.w":
        return (cfg.n_u + cfg.n_y, d)
    if name == "dec.in.w":
        return (cfg.n_u, d)
    if name == "head.w":
        return (d, cfg.n_y)
    if name == "head.b":
        return (cfg.n_y,)
    last = name.rsplit(".", 2)
    if name.endswith(("ln1.g", "ln1.b", "ln2.g", "ln2.b", "ln3.g", "ln3.b", "ln.g", "ln.b", "in.b")):
        return (d,)
    if last[-2] == "fc1":
        return (d, f) if last[-1] == "w" else (f,)
    if last[-2] == "fc2":
        return (f, d) if last[-1] == "w" else (d,)
    # attention projections
    return (d, d) if name.endswith(".w") else (d,)


def init_params(
    cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float64
) -> TransformerParams:
    """Weights ~ N(0, 0.02^2) with residual-output projections shrunk by
    1/sqrt(2 n_layers); biases zero; layer-norm gain one."""
    residual_scale = 1.0 / math.sqrt(2.0 * cfg.n_layers)
    tensors: dict[str, ad.Tensor] = {}
    for name in parameter_names(cfg):
        shape = _tensor_shape(name, cfg)
        if name.endswith(".w"):
            data = rng.normal(0.0, 0.02, size=shape)
            if name.endswith(("o.w", "fc2.w")):
                data = data * residual_scale
        elif name.endswith(".g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = ad.Tensor(data.astype(dtype), requires_grad=True)
    return TransformerParams(
        config=cfg,
        tensors=tensors,
        enc_pos=sinusoidal_table(cfg.n_ctx_enc, cfg.d_model, dtype),
        dec_pos=sinusoidal_table(cfg.n_ctx_dec, cfg.d_model, dtype),
    )


def resize_decoder_context(params: TransformerParams, n_ctx_dec: int) -> TransformerParams:
    """Copy of `params` whose decoder positional table is regenerated at a new
    length; every learned weight is carried over verbatim."""
    out = params.copy()
    out.config = replace(params.config, n_ctx_dec=n_ctx_dec)
    out.dec_pos = sinusoidal_table(n_ctx_dec, params.config.d_model, params.dtype)
    return out


def _attention(
    p: dict[str, ad.Tensor],
    prefix: str,
    x_q: ad.Tensor,
    x_kv: ad.Tensor,
    cfg: TransformerConfig,
    causal: bool,
    rng: np.random.Generator | None,
    training: bool,
) -> ad.Tensor:
    q = ad.split_heads(ad.linear(x_q, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"]), cfg.n_heads)
    k = ad.split_heads(ad.linear(x_kv, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"]), cfg.n_heads)
    v = ad.split_heads(ad.linear(x_kv, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"]), cfg.n_heads)
    d_head = cfg.d_model // cfg.n_heads
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    mask = None
    if causal:
        t_q, t_k = x_q.shape[1], x_kv.shape[1]
        mask = np.tril(np.ones((t_q, t_k), dtype=bool))
    probs = ad.softmax(scores, mask, scale_by=1.0 / math.sqrt(d_head))
    probs = ad.dropout(probs, cfg.dropout, rng, training)
    out = ad.linear(ad.merge_heads(ad.matmul(probs, v)),
                    p[f"{prefix}.o.w"], p[f"{prefix}.o.b"])
    return ad.dropout(out, cfg.dropout, rng, training)


def _mlp(
    p: dict[str, ad.Tensor],
    prefix: str,
    x: ad.Tensor,
    cfg: TransformerConfig,
    rng: np.random.Generator | None,
    training: bool,
) -> ad.Tensor:
    h = ad.gelu(ad.linear(x, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
    h = ad.linear(h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])
    return ad.dropout(h, cfg.dropout, rng, training)


def _as_input(x, name: str, channels: int, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3 or x.shape[2] != channels:
        raise ShapeError(f"{name} must have shape (b, t, {channels}), got {x.shape}")
    return x


def encode(
    params: TransformerParams,
    u_ctx,
    y_ctx,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> EncoderMemory:
    """Embed the (u, y) context window into the memory sequence."""
    cfg = params.config
    p = params.tensors
    u_ctx = _as_input(u_ctx, "u_ctx", cfg.n_u, params.dtype)
    y_ctx = _as_input(y_ctx, "y_ctx", cfg.n_y, params.dtype)
    if u_ctx.shape[:2] != y_ctx.shape[:2]:
        raise ShapeError(f"context shapes disagree: {u_ctx.shape} vs {y_ctx.shape}")
    m = u_ctx.shape[1]
    if m > cfg.n_ctx_enc:
        raise ShapeError(f"context length {m} exceeds encoder capacity {cfg.n_ctx_enc}")
    x = ad.Tensor(np.concatenate([u_ctx, y_ctx], axis=2))
    h = ad.linear(x, p["enc.in.w"], p["enc.in.b"])
    h = ad.add(h, ad.Tensor(params.enc_pos[None, :m]))
    h = ad.dropout(h, cfg.dropout, rng, training)
    for i in range(cfg.n_layers):
        attn_in = ad.layer_norm(h, p[f"enc.{i}.ln1.g"], p[f"enc.{i}.ln1.b"])
        h = ad.add(h, _attention(p, f"enc.{i}.attn", attn_in, attn_in, cfg, False, rng, training))
        mlp_in = ad.layer_norm(h, p[f"enc.{i}.ln2.g"], p[f"enc.{i}.ln2.b"])
        h = ad.add(h, _mlp(p, f"enc.{i}.mlp", mlp_in, cfg, rng, training))
    zeta = ad.layer_norm(h, p["enc.ln.g"], p["enc.ln.b"])
    return EncoderMemory(zeta=zeta)


def decode(
    params: TransformerParams,
    memory: EncoderMemory,
    u_query,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> ad.Tensor:
    """Predict the query output from the query input and the encoder memory.

    Decoder self-attention is causally masked, so prediction k sees only
    query inputs 1..k (plus the whole memory).
    """
    cfg = params.config
    p = params.tensors
    u_query = _as_input(u_query, "u_query", cfg.n_u, params.dtype)
    n = u_query.shape[1]
    if n > cfg.n_ctx_dec:
        raise ShapeError(f"query length {n} exceeds decoder capacity {cfg.n_ctx_dec}")
    h = ad.linear(ad.Tensor(u_query), p["dec.in.w"], p["dec.in.b"])
    h = ad.add(h, ad.Tensor(params.dec_pos[None, :n]))
    h = ad.dropout(h, cfg.dropout, rng, training)
    for i in range(cfg.n_layers):
        self_in = ad.layer_norm(h, p[f"dec.{i}.ln1.g"], p[f"dec.{i}.ln1.b"])
        h = ad.add(h, _attention(p, f"dec.{i}.self", self_in, self_in, cfg, True, rng, training))
        cross_in = ad.layer_norm(h, p[f"dec.{i}.ln2.g"], p[f"dec.{i}.ln2.b"])
        h = ad.add(h, _attention(p, f"dec.{i}.cross", cross_in, memory.zeta, cfg, False, rng, training))
        mlp_in = ad.layer_norm(h, p[f"dec.{i}.ln3.g"], p[f"dec.{i}.ln3.b"])
        h = ad.add(h, _mlp(p, f"dec.{i}.mlp", mlp_in, cfg, rng, training))
    h = ad.layer_norm(h, p["dec.ln.g"], p["dec.ln.b"])
    return ad.linear(h, p["head.w"], p["head.b"])


def forward(
    params: TransformerParams,
    u_ctx,
    y_ctx,
    u_query,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> ad.Tensor:
    """Full context-to-prediction pass: encode then decode."""
    memory = encode(params, u_ctx, y_ctx, rng=rng, training=training)
    return decode(params, memory, u_query, rng=rng, training=training)
