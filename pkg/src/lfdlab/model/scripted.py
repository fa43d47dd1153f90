"""Hand-built deterministic model whose greedy continuation is scripted.

Given ``{query: answer}`` pairs and the answer cue of a prompt template, the
model finds the rightmost query in the sequence that is followed by the cue
and forces the continuation ``" " + answer`` followed by EOS. Every layer
carries a scaled one-hot residual pointing at the forced token, so the
logit lens at any depth agrees with the final prediction.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .base import Cache, ForwardTrace, InstrumentedModel, LayerTrace, ModelConfig, as_tokens


class ScriptedModel(InstrumentedModel):
    def __init__(self, answers: Mapping[str, str], cue: str,
                 config: ModelConfig | None = None, gain: float = 8.0):
        config = config or ModelConfig(d_model=256, n_heads=4, vocab_size=256)
        if config.d_model != config.vocab_size:
            raise ValueError("scripted model needs d_model == vocab_size")
        super().__init__(config)
        self.answers = {q.encode("utf-8"): (" " + a).encode("utf-8") for q, a in answers.items()}
        self.cue = cue.encode("utf-8")
        self.gain = float(gain)
        self._w_lm = np.eye(config.d_model, dtype=np.float32)
        self._w_lm.setflags(write=False)

    @property
    def unembedding(self) -> np.ndarray:
        return self._w_lm

    def final_norm(self, h: np.ndarray) -> np.ndarray:
        return np.asarray(h, dtype=np.float64)

    def weight_bytes(self) -> bytes:
        return self._w_lm.astype("<f4").tobytes()

    def new_cache(self) -> Cache:
        return Cache(owner=self.instance_id)

    def next_token(self, tokens) -> int:
        seq = bytes(int(t) for t in tokens)
        best = None
        for query, target in self.answers.items():
            marker = query + self.cue
            at = seq.rfind(marker)
            if at >= 0 and (best is None or at > best[0]):
                best = (at + len(marker), target)
        if best is None:
            return self.config.eos_token
        produced = seq[best[0]:]
        target = best[1]
        if len(produced) < len(target) and target.startswith(produced):
            return target[len(produced)]
        return self.config.eos_token

    def _trace(self, tokens: list[int], masked: frozenset[int]) -> ForwardTrace:
        cfg = self.config
        t = len(tokens)
        target = self.next_token(tokens)
        onehot = np.zeros(cfg.d_model, dtype=np.float32)
        onehot[target] = 1.0
        visible = np.array([p not in masked or p == t - 1 for p in range(t)])
        scores = np.where(visible, 0.0, -np.inf)
        row = visible / visible.sum()
        layers = []
        for layer in range(1, cfg.n_layers + 1):
            ffn_in = (onehot * (self.gain * (layer - 0.5) / cfg.n_layers)).astype(np.float32)
            ffn_out = (onehot * (self.gain * layer / cfg.n_layers)).astype(np.float32)
            layers.append(LayerTrace(
                ffn_in=ffn_in,
                ffn_out=ffn_out,
                mlp_out=ffn_out - ffn_in,
                attn=np.tile(row, (cfg.n_heads, 1)),
                attn_scores=np.tile(scores, (cfg.n_heads, 1)),
            ))
        final_hidden = layers[-1].ffn_out.copy()
        return ForwardTrace(
            position=t - 1,
            layers=tuple(layers),
            embed=np.zeros(cfg.d_model, dtype=np.float32),
            final_hidden=final_hidden,
            logits=self.logit_lens(final_hidden),
        )

    def _trace_prefix(self, tokens, masked_positions):
        return self._trace([int(x) for x in tokens], masked_positions)

    def _step(self, cache, token):
        cache.tokens.append(token)
        return self._trace(cache.tokens, frozenset())

    def prefill(self, tokens):
        # no per-position state to build, so only the last position is traced
        arr = as_tokens(tokens, self.config)
        cache = self.new_cache()
        cache.tokens.extend(int(t) for t in arr)
        return self._trace(cache.tokens, frozenset()), cache
