"""Layer fused decoding with IKS-based layer selection, plus baselines.

Layer indices are 1-based block indices (layer ``l`` is the output of block
``l``); 0 is the embedding output, which only the DoLA baseline may use.
Candidate ranges are half-open ``[lo, hi)``.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics
from .errors import EmptyCandidateSetError, LengthMismatchError, SequenceTooLongError
from .model import ForwardTrace, InstrumentedModel

SELECTION_MODES = ("dynamic", "fixed", "random")


@dataclass(frozen=True)
class IKSProfile:
    scores: np.ndarray
    position: int

    def score(self, layer: int) -> float:
        return float(self.scores[layer - 1])


@dataclass(frozen=True)
class FusionConfig:
    tau: float = 0.1
    s: int = 10
    candidate_range: tuple[int, int] | None = None
    even_only: bool = True
    selection_mode: str = "dynamic"
    fixed_layer: int | None = None
    per_step: bool = True
    max_new_tokens: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.s < 1:
            raise ValueError(f"s must be >= 1, got {self.s}")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.selection_mode == "fixed" and self.fixed_layer is None:
            raise ValueError("fixed selection needs fixed_layer")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def candidates(self, n_layers: int) -> list[int]:
        return candidate_layers(n_layers, self.candidate_range, self.even_only)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["candidate_range"] = list(self.candidate_range) if self.candidate_range else None
        return out


def candidate_layers(n_layers: int, candidate_range: tuple[int, int] | None = None,
                     even_only: bool = True, lowest: int = 1) -> list[int]:
    lo, hi = candidate_range if candidate_range is not None else (n_layers // 2, n_layers)
    lo, hi = max(lo, lowest), min(hi, n_layers + 1)
    layers = [l for l in range(lo, hi) if not (even_only and l % 2)]
    if not layers:
        raise EmptyCandidateSetError(
            f"no candidate layers in [{lo}, {hi}) (even_only={even_only}, L={n_layers})"
        )
    return layers


@dataclass
class DecodeResult:
    tokens: list[int]
    text: str
    selected_layers: list[int | None]
    fallbacks: list[bool]
    latency_ms: float = 0.0
    tokens_per_s: float = 0.0
    stopped_at_eos: bool = False

    @property
    def steps(self) -> int:
        return len(self.selected_layers)

    @property
    def fallback_count(self) -> int:
        return sum(self.fallbacks)


# -- scoring and selection -------------------------------------------------

def iks_profile(model: InstrumentedModel, trace: ForwardTrace) -> IKSProfile:
    """JSD between logit-lens distributions of each FFN's input and output."""
    if len(trace.layers) != model.config.n_layers:
        raise ValueError("trace does not cover every layer")
    p_in = numerics.softmax(np.stack([model.logit_lens(lt.ffn_in) for lt in trace.layers]))
    p_out = numerics.softmax(np.stack([model.logit_lens(lt.ffn_out) for lt in trace.layers]))
    return IKSProfile(np.asarray(numerics.jsd(p_in, p_out)), trace.position)


def select_layer(profile: IKSProfile, cfg: FusionConfig,
                 rng: np.random.Generator | None = None) -> int:
    n_layers = len(profile.scores)
    if cfg.selection_mode == "fixed":
        if not 1 <= cfg.fixed_layer <= n_layers:
            raise EmptyCandidateSetError(f"fixed layer {cfg.fixed_layer} outside 1..{n_layers}")
        return cfg.fixed_layer
    candidates = cfg.candidates(n_layers)
    if cfg.selection_mode == "random":
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        return int(candidates[rng.integers(len(candidates))])
    best = candidates[0]
    for layer in candidates[1:]:
        if profile.scores[layer - 1] < profile.scores[best - 1]:
            best = layer
    return best


# -- gating and fusion -----------------------------------------------------

def gate_threshold(p_final, tau: float, s: int) -> float:
    return min(tau * numerics.kth_max(p_final, 1), numerics.kth_max(p_final, s))


def fuse_gate(p_i, p_final, cfg: FusionConfig) -> np.ndarray | None:
    """Gated sum of two normalized log-probability vectors.

    Tokens whose intermediate log-probability falls below
    ``min(tau * max(p_final), s-th max(p_final))`` get ``-inf``. Returns
    ``None`` when no token survives.
    """
    p_i = np.asarray(p_i, dtype=np.float64)
    p_final = np.asarray(p_final, dtype=np.float64)
    if p_i.shape != p_final.shape:
        raise LengthMismatchError(f"shapes differ: {p_i.shape} vs {p_final.shape}")
    theta = gate_threshold(p_final, cfg.tau, cfg.s)
    keep = p_i >= theta
    if not keep.any():
        return None
    return np.where(keep, p_i + p_final, -np.inf)


def fused_distribution(f) -> np.ndarray:
    return numerics.softmax(f)


def argmax_first(x) -> int:
    # np.argmax returns the first maximal index: ties go to the smallest id
    return int(np.argmax(x))


# -- decoders --------------------------------------------------------------

StepFn = Callable[[ForwardTrace], tuple[int, "int | None", bool]]


def _generate(model: InstrumentedModel, prompt: Sequence[int], max_new_tokens: int,
              choose: StepFn) -> DecodeResult:
    cfg = model.config
    prompt = [int(t) for t in prompt]
    if len(prompt) + max_new_tokens - 1 > cfg.max_seq_len:
        raise SequenceTooLongError(
            f"prompt of {len(prompt)} tokens plus {max_new_tokens} new tokens "
            f"exceeds max_seq_len={cfg.max_seq_len}"
        )
    start = time.perf_counter()
    trace, cache = model.prefill(prompt)
    tokens: list[int] = []
    layers: list[int | None] = []
    fallbacks: list[bool] = []
    eos = False
    for step in range(max_new_tokens):
        token, layer, fell_back = choose(trace)
        layers.append(layer)
        fallbacks.append(fell_back)
        if token == cfg.eos_token:
            eos = True
            break
        tokens.append(token)
        if step + 1 < max_new_tokens:
            trace, cache = model.forward_step(cache, token)
    elapsed = time.perf_counter() - start
    return DecodeResult(
        tokens=tokens,
        text=bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace"),
        selected_layers=layers,
        fallbacks=fallbacks,
        latency_ms=elapsed * 1e3,
        tokens_per_s=len(tokens) / elapsed if elapsed > 0 else 0.0,
        stopped_at_eos=eos,
    )


def decode_greedy(model: InstrumentedModel, prompt: Sequence[int],
                  max_new_tokens: int = 16) -> DecodeResult:
    return _generate(model, prompt, max_new_tokens,
                     lambda trace: (argmax_first(trace.logits), None, False))


@dataclass
class LFDStep:
    """Everything one fused decoding step computed; used for replay checks."""

    profile: IKSProfile | None
    layer: int
    fused: np.ndarray | None
    token: int
    fallback: bool


def lfd_step(model: InstrumentedModel, trace: ForwardTrace, cfg: FusionConfig,
             rng: np.random.Generator | None = None, layer: int | None = None) -> LFDStep:
    profile = None
    if layer is None:
        if cfg.selection_mode == "dynamic":
            profile = iks_profile(model, trace)
            layer = select_layer(profile, cfg, rng)
        else:
            # fixed and random modes never look at the scores
            blank = IKSProfile(np.zeros(model.config.n_layers), trace.position)
            layer = select_layer(blank, cfg, rng)
    p_final = numerics.log_softmax(trace.logits)
    p_i = numerics.log_softmax(model.logit_lens(trace.hidden(layer)))
    fused = fuse_gate(p_i, p_final, cfg)
    if fused is None:
        return LFDStep(profile, layer, None, argmax_first(p_final), True)
    return LFDStep(profile, layer, fused, argmax_first(fused_distribution(fused)), False)


def decode_lfd(model: InstrumentedModel, prompt: Sequence[int],
               cfg: FusionConfig = FusionConfig(),
               on_step: Callable[[LFDStep], None] | None = None) -> DecodeResult:
    """Greedy decoding over the gated fusion of a selected layer and the final layer.

    The layer is re-selected every step unless ``cfg.per_step`` is false, in
    which case the first step's choice is reused. An empty gate falls back to
    the final-layer argmax and flags the step.
    """
    rng = np.random.default_rng(cfg.seed)
    held: list[int] = []

    def choose(trace):
        step = lfd_step(model, trace, cfg, rng, held[0] if held else None)
        if not cfg.per_step and not held:
            held.append(step.layer)
        if on_step is not None:
            on_step(step)
        return step.token, step.layer, step.fallback

    return _generate(model, prompt, cfg.max_new_tokens, choose)


def dola_premature_layer(model: InstrumentedModel, trace: ForwardTrace,
                         candidates: Sequence[int]) -> int:
    """Candidate whose logit-lens distribution is furthest (JSD) from the final one."""
    final = numerics.softmax(trace.logits)
    early = numerics.softmax(np.stack([model.logit_lens(trace.hidden(l)) for l in candidates]))
    scores = numerics.jsd(early, np.broadcast_to(final, early.shape))
    return int(candidates[int(np.argmax(scores))])


def decode_dola(model: InstrumentedModel, prompt: Sequence[int],
                candidate_range: tuple[int, int] | None = None, max_new_tokens: int = 16,
                tau: float = 0.1, s: int = 10, even_only: bool = True) -> DecodeResult:
    """Layer-contrast baseline: argmax of ``log p_final - log p_premature`` over
    the tokens that pass the same gate applied with the final distribution on
    both sides.
    """
    n_layers = model.config.n_layers
    if candidate_range is None:
        candidate_range = (0, n_layers)
    candidates = candidate_layers(n_layers, candidate_range, even_only, lowest=0)

    def choose(trace):
        layer = candidates[0] if len(candidates) == 1 else dola_premature_layer(
            model, trace, candidates)
        p_final = numerics.log_softmax(trace.logits)
        p_early = numerics.log_softmax(model.logit_lens(trace.hidden(layer)))
        theta = gate_threshold(p_final, tau, s)
        contrast = np.where(p_final >= theta, p_final - p_early, -np.inf)
        return argmax_first(contrast), layer, False

    return _generate(model, prompt, max_new_tokens, choose)
