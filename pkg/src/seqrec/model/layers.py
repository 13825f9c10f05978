"""Pre-norm Transformer blocks over a parameter dict.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names so a
checkpoint is just that map plus a config.
"""

from __future__ import annotations

import numpy as np

from ..numerics import Tape, Tensor


def _param(rng, shape, std, dtype, name):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True, name=name)


def _const(value, shape, dtype, name):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)


def init_layer_norm(params, name, d, dtype):
    params[f"{name}.g"] = _const(1.0, (d,), dtype, f"{name}.g")
    params[f"{name}.b"] = _const(0.0, (d,), dtype, f"{name}.b")


def init_attention(params, name, d, rng, dtype):
    std = 1.0 / np.sqrt(d)
    for w in ("q", "k", "v", "o"):
        params[f"{name}.w{w}"] = _param(rng, (d, d), std, dtype, f"{name}.w{w}")
        params[f"{name}.b{w}"] = _const(0.0, (d,), dtype, f"{name}.b{w}")


def init_ffn(params, name, d, d_ff, rng, dtype):
    params[f"{name}.w1"] = _param(rng, (d, d_ff), 1.0 / np.sqrt(d), dtype, f"{name}.w1")
    params[f"{name}.b1"] = _const(0.0, (d_ff,), dtype, f"{name}.b1")
    params[f"{name}.w2"] = _param(rng, (d_ff, d), 1.0 / np.sqrt(d_ff), dtype, f"{name}.w2")
    params[f"{name}.b2"] = _const(0.0, (d,), dtype, f"{name}.b2")


def init_encoder(params, prefix, layers, d, d_ff, rng, dtype):
    for i in range(layers):
        name = f"{prefix}.{i}"
        init_layer_norm(params, f"{name}.ln1", d, dtype)
        init_attention(params, f"{name}.attn", d, rng, dtype)
        init_layer_norm(params, f"{name}.ln2", d, dtype)
        init_ffn(params, f"{name}.ffn", d, d_ff, rng, dtype)
    init_layer_norm(params, f"{prefix}.ln_f", d, dtype)


def init_decoder(params, prefix, layers, d, d_ff, rng, dtype):
    for i in range(layers):
        name = f"{prefix}.{i}"
        init_layer_norm(params, f"{name}.ln1", d, dtype)
        init_attention(params, f"{name}.attn", d, rng, dtype)
        init_layer_norm(params, f"{name}.lnx", d, dtype)
        init_attention(params, f"{name}.xattn", d, rng, dtype)
        init_layer_norm(params, f"{name}.ln2", d, dtype)
        init_ffn(params, f"{name}.ffn", d, d_ff, rng, dtype)
    init_layer_norm(params, f"{prefix}.ln_f", d, dtype)


def layer_norm(tape: Tape, p, name, x):
    return tape.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"], eps=1e-5)


def linear(tape: Tape, x, w, b):
    return tape.add(tape.matmul(x, w), b)


def _split_heads(tape, x, heads):
    b, t, d = x.shape
    return tape.transpose(tape.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(tape: Tape, p, name, xq, xkv, mask, heads: int):
    """``mask`` broadcasts to (B, heads, Lq, Lk); True marks a visible key."""
    b, tq, d = xq.shape
    q = _split_heads(tape, linear(tape, xq, p[f"{name}.wq"], p[f"{name}.bq"]), heads)
    k = _split_heads(tape, linear(tape, xkv, p[f"{name}.wk"], p[f"{name}.bk"]), heads)
    v = _split_heads(tape, linear(tape, xkv, p[f"{name}.wv"], p[f"{name}.bv"]), heads)
    att = tape.scaled_dot_product_attention(q, k, v, mask)
    merged = tape.reshape(tape.transpose(att, (0, 2, 1, 3)), (b, tq, d))
    return linear(tape, merged, p[f"{name}.wo"], p[f"{name}.bo"])


def feed_forward(tape: Tape, p, name, x, activation: str):
    h = tape.relu_or_gelu(linear(tape, x, p[f"{name}.w1"], p[f"{name}.b1"]), activation)
    return linear(tape, h, p[f"{name}.w2"], p[f"{name}.b2"])


def encoder_stack(tape: Tape, p, prefix, x, mask, layers: int, heads: int, dropout: float,
                  activation: str = "relu") -> Tensor:
    for i in range(layers):
        name = f"{prefix}.{i}"
        h = layer_norm(tape, p, f"{name}.ln1", x)
        x = tape.add(x, tape.dropout(multi_head_attention(tape, p, f"{name}.attn", h, h, mask, heads), dropout))
        h = layer_norm(tape, p, f"{name}.ln2", x)
        x = tape.add(x, tape.dropout(feed_forward(tape, p, f"{name}.ffn", h, activation), dropout))
    return layer_norm(tape, p, f"{prefix}.ln_f", x)


def decoder_stack(tape: Tape, p, prefix, x, memory, self_mask, cross_mask, layers: int, heads: int,
                  dropout: float, activation: str = "relu") -> Tensor:
    for i in range(layers):
        name = f"{prefix}.{i}"
        h = layer_norm(tape, p, f"{name}.ln1", x)
        x = tape.add(x, tape.dropout(multi_head_attention(tape, p, f"{name}.attn", h, h, self_mask, heads), dropout))
        h = layer_norm(tape, p, f"{name}.lnx", x)
        x = tape.add(x, tape.dropout(
            multi_head_attention(tape, p, f"{name}.xattn", h, memory, cross_mask, heads), dropout))
        h = layer_norm(tape, p, f"{name}.ln2", x)
        x = tape.add(x, tape.dropout(feed_forward(tape, p, f"{name}.ffn", h, activation), dropout))
    return layer_norm(tape, p, f"{prefix}.ln_f", x)


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def padding_mask(key_valid: np.ndarray) -> np.ndarray:
    """(B, Lk) validity -> (B, 1, 1, Lk) attention mask."""
    return key_valid[:, None, None, :]
