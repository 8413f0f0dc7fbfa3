"""Toy decoder-only transformer.

Pre-norm residual blocks, learned absolute positions, tied input/output
embeddings, and a two-matrix feed-forward (up-projection, GELU,
down-projection).  The down-projection of block ``i`` is stored as
``layer.{i}.ffn.down`` so LoRA can target it by name.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_len: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ff <= self.d_model:
            raise ValueError(f"d_ff={self.d_ff} must exceed d_model={self.d_model}")
        for field in ("vocab_size", "n_layers", "max_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")

    def to_dict(self):
        return asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape table, in initialization order."""
    d, f = config.d_model, config.d_ff
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_len, d)}
    for i in range(config.n_layers):
        p = f"layer.{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for w in "qkvo":
            shapes[f"{p}.attn.{w}"] = (d, d)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ffn.up"] = (d, f)
        shapes[f"{p}.ffn.up_bias"] = (f,)
        shapes[f"{p}.ffn.down"] = (f, d)
        shapes[f"{p}.ffn.down_bias"] = (d,)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count (output projection is tied, so not counted)."""
    V, d, f, L, T = config.vocab_size, config.d_model, config.d_ff, config.n_layers, config.max_len
    per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d
    return V * d + T * d + L * per_layer + 2 * d


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """N(0, 0.02) matrices, zero biases, unit layer-norm gains."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def forward(params, input_ids, mask, config: ModelConfig, adapters=None, positions=None) -> Tensor:
    """Logits [B, T, V] for token ids [B, T] under a boolean attention mask.

    ``mask`` is [T, T] (shared) or [B, T, T] (per row); entry (i, j) True lets
    position i attend to j.  ``adapters`` is an optional LoRA AdapterSet whose
    deltas are applied to the matching weights on the fly.  ``positions``
    ([B, T] ints) overrides the default 0..T-1 position ids, which lets one row
    hold several packed sequences.
    """
    ids = np.asarray(input_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, T = ids.shape
    if T > config.max_len:
        raise ValueError(f"input length {T} exceeds max_len {config.max_len}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (T, T):
        raise ValueError(f"attention mask shape {mask.shape} does not match length {T}")
    allowed = mask[:, None] if mask.ndim == 3 else mask

    H = config.n_heads
    d = config.d_model
    dh = d // H
    if positions is None:
        positions = np.broadcast_to(np.arange(T), (B, T))
    else:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != (B, T):
            raise ValueError(f"positions shape {positions.shape} does not match inputs {(B, T)}")
    x = ag.add(ag.embedding_lookup(params["tok_emb"], ids), ag.embedding_lookup(params["pos_emb"], positions))
    inv_sqrt = 1.0 / math.sqrt(dh)

    for i in range(config.n_layers):
        p = f"layer.{i}"
        h = ag.layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        q = ag.permute(ag.reshape(_linear(h, params, f"{p}.attn.q", adapters), (B, T, H, dh)), (0, 2, 1, 3))
        k = ag.permute(ag.reshape(_linear(h, params, f"{p}.attn.k", adapters), (B, T, H, dh)), (0, 2, 3, 1))
        v = ag.permute(ag.reshape(_linear(h, params, f"{p}.attn.v", adapters), (B, T, H, dh)), (0, 2, 1, 3))
        att = ag.masked_softmax(ag.scale(ag.matmul(q, k), inv_sqrt), allowed)
        ctx = ag.reshape(ag.permute(ag.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        x = ag.add(x, _linear(ctx, params, f"{p}.attn.o", adapters))

        h = ag.layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
        u = ag.gelu(ag.add_bias(_linear(h, params, f"{p}.ffn.up", adapters), params[f"{p}.ffn.up_bias"]))
        x = ag.add(x, ag.add_bias(_linear(u, params, f"{p}.ffn.down", adapters), params[f"{p}.ffn.down_bias"]))

    x = ag.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    return ag.matmul(x, ag.transpose(params["tok_emb"]))


def _linear(x, params, name, adapters):
    out = ag.matmul(x, params[name])
    if adapters is not None and name in adapters.targets:
        out = ag.add(out, adapters.delta_apply(name, x))
    return out


def attention_weights(params, input_ids, mask, config: ModelConfig, layer: int = 0) -> np.ndarray:
    """Post-softmax attention of one layer, [B, H, T, T] (diagnostics/tests)."""
    ids = np.atleast_2d(np.asarray(input_ids, dtype=np.int64))
    B, T = ids.shape
    H, d = config.n_heads, config.d_model
    dh = d // H
    mask = np.asarray(mask, dtype=bool)
    allowed = mask[:, None] if mask.ndim == 3 else mask
    with ag.no_grad():
        x = params["tok_emb"].data[ids] + params["pos_emb"].data[:T]
        for i in range(layer + 1):
            p = f"layer.{i}"
            h = ag.layer_norm(Tensor(x), params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"]).data
            q = (h @ params[f"{p}.attn.q"].data).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = (h @ params[f"{p}.attn.k"].data).reshape(B, T, H, dh).transpose(0, 2, 3, 1)
            att = ag.masked_softmax(Tensor(q @ k / math.sqrt(dh)), allowed).data
            if i == layer:
                return att
            v = (h @ params[f"{p}.attn.v"].data).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            x = x + ((att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)) @ params[f"{p}.attn.o"].data
            h = ag.layer_norm(Tensor(x), params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"]).data
            u = ag.gelu(Tensor(h @ params[f"{p}.ffn.up"].data + params[f"{p}.ffn.up_bias"].data)).data
            x = x + u @ params[f"{p}.ffn.down"].data + params[f"{p}.ffn.down_bias"].data
    raise AssertionError("unreachable")
