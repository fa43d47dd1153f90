"""Seeded pre-norm decoder-only transformer with full instrumentation.

Weight stream
-------------
Weights come from a counter-based SplitMix64 stream so any implementation can
regenerate them without a shared RNG library. The ``i``-th draw (``i`` counted
from 0 across the whole layout) is::

    z = seed + (i + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)
    u = (z >> 11) * 2**-53                            in [0, 1)
    w = float32((2 * u - 1) * gain / sqrt(fan_in))

Matrices are filled row-major in this order::

    tok_embed   [vocab, d]          gain 1, fan_in 1
    pos_embed   [max_seq_len, d]    gain 0.5, fan_in 1
    for each block 1..L:
        w_q     [d, d]              gain 2, fan_in d
        w_k     [d, d]              gain 2, fan_in d
        w_v     [d, d]              gain 1, fan_in d
        w_o     [d, d]              gain 1, fan_in d
        w_up    [d, 4d]             gain 1, fan_in d
        w_down  [4d, d]             gain 1, fan_in 4d
    w_lm        [d, vocab]          gain 1, fan_in d

The block is ``x += attn(ln(x)); x += w_down @ gelu(w_up @ ln(x))`` with a
parameter-free LayerNorm (eps 1e-5), tanh-approximated GELU and no biases.
Activations are stored as float32; every matmul accumulates in float64.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .base import Cache, ForwardTrace, InstrumentedModel, LayerTrace, ModelConfig, as_tokens

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
LN_EPS = 1e-5
ATTN_BLOCK = 64


def splitmix64_uniform(seed: int, start: int, count: int) -> np.ndarray:
    """Draws ``start .. start+count-1`` of the stream as float64 in [0, 1)."""
    i = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.full(count, seed, dtype=np.uint64) + i * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def weight_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, int], float, int]]:
    d, v, ff = cfg.d_model, cfg.vocab_size, 4 * cfg.d_model
    layout = [
        ("tok_embed", (v, d), 1.0, 1),
        ("pos_embed", (cfg.max_seq_len, d), 0.5, 1),
    ]
    for layer in range(1, cfg.n_layers + 1):
        layout += [
            (f"blocks.{layer}.w_q", (d, d), 2.0, d),
            (f"blocks.{layer}.w_k", (d, d), 2.0, d),
            (f"blocks.{layer}.w_v", (d, d), 1.0, d),
            (f"blocks.{layer}.w_o", (d, d), 1.0, d),
            (f"blocks.{layer}.w_up", (d, ff), 1.0, d),
            (f"blocks.{layer}.w_down", (ff, d), 1.0, ff),
        ]
    layout.append(("w_lm", (d, v), 1.0, d))
    return layout


def _layer_norm64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    inner = x * x
    inner *= 0.044715 * _GELU_C
    inner += _GELU_C
    inner *= x
    np.tanh(inner, out=inner)
    inner += 1.0
    inner *= x
    inner *= 0.5
    return inner


class KVCache(Cache):
    def __init__(self, owner: int, cfg: ModelConfig):
        super().__init__(owner=owner)
        shape = (cfg.max_seq_len, cfg.d_model)
        self.keys = [np.zeros(shape, dtype=np.float32) for _ in range(cfg.n_layers)]
        self.values = [np.zeros(shape, dtype=np.float32) for _ in range(cfg.n_layers)]

    def copy(self) -> "KVCache":
        out = object.__new__(KVCache)
        out.owner = self.owner
        out.tokens = list(self.tokens)
        out.keys = [k.copy() for k in self.keys]
        out.values = [v.copy() for v in self.values]
        return out


class ToyTransformer(InstrumentedModel):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.layout = weight_layout(config)
        self._w32: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape, gain, fan_in in self.layout:
            n = shape[0] * shape[1]
            u = splitmix64_uniform(config.seed, offset, n)
            w = ((2.0 * u - 1.0) * (gain / math.sqrt(fan_in))).astype(np.float32)
            w = w.reshape(shape)
            w.setflags(write=False)
            self._w32[name] = w
            offset += n
        self._w64 = {k: v.astype(np.float64) for k, v in self._w32.items()}
        for w in self._w64.values():
            w.setflags(write=False)

    @property
    def unembedding(self) -> np.ndarray:
        return self._w32["w_lm"]

    def weights(self, name: str) -> np.ndarray:
        return self._w32[name]

    def final_norm(self, h: np.ndarray) -> np.ndarray:
        return _layer_norm64(np.asarray(h, dtype=np.float32))

    def logit_lens(self, h) -> np.ndarray:
        h = np.asarray(h)
        if h.shape == (self.config.d_model,):
            return self.final_norm(h) @ self._w64["w_lm"]
        return super().logit_lens(h)

    def weight_bytes(self) -> bytes:
        return b"".join(self._w32[name].astype("<f4").tobytes() for name, *_ in self.layout)

    def dump_weights(self, path: str | Path) -> None:
        Path(path).write_bytes(self.weight_bytes())

    def new_cache(self) -> KVCache:
        return KVCache(self.instance_id, self.config)

    def _mm(self, x: np.ndarray, name: str) -> np.ndarray:
        return (x.astype(np.float64) @ self._w64[name]).astype(np.float32)

    def _run(self, chunk: np.ndarray, cache: KVCache | None,
             masked: frozenset[int] = frozenset(), keep_streams: bool = False):
        cfg = self.config
        start = cache.length if cache is not None else 0
        T = chunk.size
        S = start + T
        M, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
        if cache is None:
            keys = [np.zeros((S, d), dtype=np.float32) for _ in range(cfg.n_layers)]
            values = [np.zeros((S, d), dtype=np.float32) for _ in range(cfg.n_layers)]
        else:
            keys, values = cache.keys, cache.values

        qpos = start + np.arange(T)
        kpos = np.arange(S)
        allowed = kpos[None, :] <= qpos[:, None]
        if masked:
            visible = ~np.isin(kpos, list(masked))
            allowed &= visible[None, :] | (kpos[None, :] == qpos[:, None])
        bias = np.where(allowed, 0.0, -np.inf)
        scale = 1.0 / math.sqrt(dh)

        x = self._w32["tok_embed"][chunk] + self._w32["pos_embed"][start:S]
        embed_last = x[-1].copy()
        streams = [x.copy()] if keep_streams else None
        layer_traces = []
        for layer in range(1, cfg.n_layers + 1):
            p = f"blocks.{layer}."
            h = _layer_norm64(x).astype(np.float32)
            q = self._mm(h, p + "w_q")
            keys[layer - 1][start:S] = self._mm(h, p + "w_k")
            values[layer - 1][start:S] = self._mm(h, p + "w_v")
            qh = (q.astype(np.float64) * scale).reshape(T, M, dh).transpose(1, 0, 2)
            kh = np.ascontiguousarray(
                keys[layer - 1][:S].astype(np.float64).reshape(S, M, dh).transpose(1, 2, 0))
            vh = np.ascontiguousarray(
                values[layer - 1][:S].astype(np.float64).reshape(S, M, dh).transpose(1, 0, 2))
            ctx64 = np.empty((M, T, dh))
            # query rows in blocks; a block only needs keys up to its last row
            for b0 in range(0, T, ATTN_BLOCK):
                b1 = min(T, b0 + ATTN_BLOCK)
                kend = start + b1
                sc = qh[:, b0:b1] @ kh[:, :, :kend]
                sc += bias[b0:b1, :kend]
                if b1 == T:
                    last_scores = sc[:, -1, :].copy()
                sc -= sc.max(axis=-1, keepdims=True)
                np.exp(sc, out=sc)
                sc *= 1.0 / sc.sum(axis=-1, keepdims=True)
                ctx64[:, b0:b1] = sc @ vh[:, :kend]
            last_probs = sc[:, -1, :].copy()
            ctx = ctx64.transpose(1, 0, 2).reshape(T, d).astype(np.float32)
            x = x + self._mm(ctx, p + "w_o")
            ffn_in = x
            up = _gelu((_layer_norm64(x).astype(np.float32).astype(np.float64)
                        @ self._w64[p + "w_up"])).astype(np.float32)
            mlp = self._mm(up, p + "w_down")
            x = x + mlp
            if keep_streams:
                streams.append(x.copy())
            layer_traces.append(LayerTrace(
                ffn_in=ffn_in[-1].copy(),
                ffn_out=x[-1].copy(),
                mlp_out=mlp[-1].copy(),
                attn=last_probs,
                attn_scores=last_scores,
            ))
        if cache is not None:
            cache.tokens.extend(int(t) for t in chunk)
        final_hidden = x[-1].copy()
        trace = ForwardTrace(
            position=S - 1,
            layers=tuple(layer_traces),
            embed=embed_last,
            final_hidden=final_hidden,
            logits=self.logit_lens(final_hidden),
        )
        return trace, streams

    def _trace_prefix(self, tokens, masked_positions):
        trace, _ = self._run(tokens, None, masked_positions)
        return trace

    def _step(self, cache, token):
        trace, _ = self._run(np.array([token], dtype=np.int64), cache)
        return trace

    def prefill(self, tokens):
        arr = as_tokens(tokens, self.config)
        cache = self.new_cache()
        trace, _ = self._run(arr, cache)
        return trace, cache

    def residual_streams(self, tokens) -> np.ndarray:
        """Residual stream at every position: shape ``[L + 1, T, d]``."""
        arr = as_tokens(tokens, self.config)
        _, streams = self._run(arr, None, keep_streams=True)
        return np.stack(streams)


def build_toy_model(cfg: ModelConfig | None = None) -> ToyTransformer:
    return ToyTransformer(cfg if cfg is not None else ModelConfig())
