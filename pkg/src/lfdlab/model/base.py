"""Instrumented decoder-only model contract and the trace types it produces."""

from __future__ import annotations

import abc
import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import (
    CacheMismatchError,
    ConfigInvalidError,
    DimensionMismatchError,
    PositionOutOfRangeError,
    SequenceTooLongError,
)

_instance_ids = itertools.count(1)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 4
    d_model: int = 64
    vocab_size: int = 256
    max_seq_len: int = 512
    seed: int = 0
    eos_token: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigInvalidError(f"{name} must be a positive integer, got {value!r}")
        if self.n_layers % 2:
            raise ConfigInvalidError(f"n_layers must be even, got {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ConfigInvalidError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigInvalidError("seed must fit in 64 unsigned bits")
        if not 0 <= self.eos_token < self.vocab_size:
            raise ConfigInvalidError(f"eos_token {self.eos_token} outside vocabulary")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "seed": self.seed,
            "eos_token": self.eos_token,
        }


@dataclass(frozen=True)
class LayerTrace:
    """Activations of one block at the traced position.

    ``ffn_in`` is the residual stream entering the FFN sublayer, ``ffn_out``
    the residual stream leaving it (the block output), and ``mlp_out`` the
    raw FFN sublayer output that gets added to the stream. ``attn`` holds one
    softmax row per head over positions ``0..position``; ``attn_scores`` are
    the pre-softmax scores of the same rows.
    """

    ffn_in: np.ndarray
    ffn_out: np.ndarray
    mlp_out: np.ndarray
    attn: np.ndarray
    attn_scores: np.ndarray


@dataclass(frozen=True)
class ForwardTrace:
    position: int
    layers: tuple[LayerTrace, ...]
    embed: np.ndarray
    final_hidden: np.ndarray
    logits: np.ndarray

    def hidden(self, layer: int) -> np.ndarray:
        """Residual stream after block ``layer`` (1-based); 0 is the embedding."""
        if layer == 0:
            return self.embed
        return self.layers[layer - 1].ffn_out

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.position).encode())
        for arr in self._arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _arrays(self):
        yield self.embed
        for lt in self.layers:
            yield from (lt.ffn_in, lt.ffn_out, lt.mlp_out, lt.attn, lt.attn_scores)
        yield self.final_hidden
        yield self.logits


@dataclass
class Cache:
    """Prefix state for incremental decoding; owned by a single decoder."""

    owner: int
    tokens: list[int] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.tokens)


def as_tokens(tokens: Iterable[int], cfg: ModelConfig) -> np.ndarray:
    arr = np.asarray(list(tokens) if not isinstance(tokens, np.ndarray) else tokens,
                     dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D sequence")
    if arr.size > cfg.max_seq_len:
        raise SequenceTooLongError(f"{arr.size} tokens exceed max_seq_len={cfg.max_seq_len}")
    if (arr < 0).any() or (arr >= cfg.vocab_size).any():
        raise ValueError("token id outside vocabulary")
    return arr


class InstrumentedModel(abc.ABC):
    """A decoder-only LM that exposes per-layer activations.

    Implementations must be pure: identical token inputs give bit-identical
    traces. Instances are immutable after construction.
    """

    config: ModelConfig

    def __init__(self, config: ModelConfig):
        self.config = config
        self.instance_id = next(_instance_ids)

    @property
    @abc.abstractmethod
    def unembedding(self) -> np.ndarray:
        """The ``d_model x vocab_size`` output projection."""

    @abc.abstractmethod
    def final_norm(self, h: np.ndarray) -> np.ndarray:
        """Final normalization applied before unembedding, in float64."""

    @abc.abstractmethod
    def _trace_prefix(self, tokens: np.ndarray,
                      masked_positions: frozenset[int]) -> ForwardTrace:
        """Trace the last position of ``tokens``."""

    @abc.abstractmethod
    def _step(self, cache: Cache, token: int) -> ForwardTrace:
        """Process ``token`` at position ``cache.length`` and extend ``cache`` in place."""

    @abc.abstractmethod
    def new_cache(self) -> Cache:
        ...

    @abc.abstractmethod
    def weight_bytes(self) -> bytes:
        """Flat little-endian float32 dump of every weight in layout order."""

    def checksum(self) -> str:
        return hashlib.sha256(self.weight_bytes()).hexdigest()

    def logit_lens(self, h) -> np.ndarray:
        h = np.asarray(h)
        if h.shape != (self.config.d_model,):
            raise DimensionMismatchError(
                f"expected a vector of size {self.config.d_model}, got shape {h.shape}"
            )
        return self.final_norm(h) @ self.unembedding.astype(np.float64)

    def forward_trace(self, tokens: Sequence[int], position: int | None = None,
                      masked_positions: Iterable[int] = ()) -> ForwardTrace:
        """Trace ``position`` (default: the final token).

        ``masked_positions`` hides those key positions from attention in every
        layer (a query still attends to itself).
        """
        arr = as_tokens(tokens, self.config)
        if position is None:
            position = arr.size - 1
        if not 0 <= position < arr.size:
            raise PositionOutOfRangeError(f"position {position} outside 0..{arr.size - 1}")
        return self._trace_prefix(arr[: position + 1], frozenset(int(p) for p in masked_positions))

    def forward_step(self, cache: Cache, token: int) -> tuple[ForwardTrace, Cache]:
        if cache.owner != self.instance_id:
            raise CacheMismatchError("cache was built by a different model instance")
        if cache.length >= self.config.max_seq_len:
            raise SequenceTooLongError(f"cache already holds max_seq_len={self.config.max_seq_len} tokens")
        if not 0 <= int(token) < self.config.vocab_size:
            raise ValueError(f"token id {token} outside vocabulary")
        trace = self._step(cache, int(token))
        return trace, cache

    def prefill(self, tokens: Sequence[int]) -> tuple[ForwardTrace, Cache]:
        """Process a whole prompt, returning the final-token trace and a cache."""
        arr = as_tokens(tokens, self.config)
        cache = self.new_cache()
        trace = None
        for tok in arr:
            trace, cache = self.forward_step(cache, int(tok))
        return trace, cache
