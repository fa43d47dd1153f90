"""End-to-end evaluation: render, decode, check answer inclusion, aggregate."""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..analysis import bundle_for_sample, get_template
from ..decoding import DecodeResult, FusionConfig, decode_dola, decode_greedy, decode_lfd
from ..errors import LabError, PreconditionError
from ..model import InstrumentedModel, ModelConfig, ScriptedModel
from .corpus import Sample

SCHEMA_VERSION = 1
DECODERS = ("greedy", "lfd", "lfd-random", "lfd-fixed", "dola")
NOISE_LEVELS = (0, 4, 8, 12)
TIMING_FIELDS = ("latency_ms", "tokens_per_s")


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def answer_included(response: str, gold: Sequence[str]) -> bool:
    """True iff some normalized gold answer is a substring of the normalized response."""
    r = normalize_text(response)
    return any(g and g in r for g in map(normalize_text, gold))


@dataclass(frozen=True)
class DecoderConfig:
    kind: str = "lfd"
    tau: float = 0.1
    s: int = 10
    candidate_range: tuple[int, int] | None = None
    even_only: bool = True
    fixed_layer: int | None = None
    per_step: bool = True
    max_new_tokens: int = 16

    def __post_init__(self):
        if self.kind not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.kind!r}")

    def fusion(self, n_layers: int, seed: int = 0) -> FusionConfig:
        mode = {"lfd": "dynamic", "lfd-random": "random", "lfd-fixed": "fixed"}.get(self.kind, "dynamic")
        fixed = self.fixed_layer
        if mode == "fixed" and fixed is None:
            fixed = n_layers
        return FusionConfig(
            tau=self.tau, s=self.s, candidate_range=self.candidate_range,
            even_only=self.even_only, selection_mode=mode, fixed_layer=fixed,
            per_step=self.per_step, max_new_tokens=self.max_new_tokens, seed=seed,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["candidate_range"] = list(self.candidate_range) if self.candidate_range else None
        return out


def sample_seed(seed: int, sample_id: str) -> int:
    seq = np.random.SeedSequence([seed, zlib.crc32(sample_id.encode("utf-8"))])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def run_decoder(model: InstrumentedModel, tokens, dcfg: DecoderConfig, seed: int = 0) -> DecodeResult:
    if dcfg.kind == "greedy":
        return decode_greedy(model, tokens, dcfg.max_new_tokens)
    if dcfg.kind == "dola":
        return decode_dola(model, tokens, dcfg.candidate_range, dcfg.max_new_tokens,
                           dcfg.tau, dcfg.s, dcfg.even_only)
    return decode_lfd(model, tokens, dcfg.fusion(model.config.n_layers, seed))


@dataclass
class RunRecord:
    sample_id: str
    decoder: str
    config_hash: str
    seed: int
    noise_level: int
    tag: str
    response: str
    correct: bool
    prompt_tokens: int = 0
    generated_tokens: int = 0
    steps: int = 0
    selected_layers: list = field(default_factory=list)
    fallback_count: int = 0
    error: str | None = None
    latency_ms: float = 0.0
    tokens_per_s: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def to_json(self, include_timing: bool = False) -> dict:
        out = asdict(self)
        if not include_timing:
            for key in TIMING_FIELDS:
                out.pop(key)
        return out


@dataclass
class EvalReport:
    decoder: str
    noise_level: int
    config_hash: str
    seed: int
    n: int
    n_correct: int
    accuracy: float
    per_tag: dict
    n_failed: int
    total_steps: int
    fallback_steps: int
    layer_histogram: dict
    mean_latency_ms: float
    mean_tokens_per_s: float
    config: dict
    schema_version: int = SCHEMA_VERSION

    def to_json(self, include_timing: bool = True) -> dict:
        out = asdict(self)
        if not include_timing:
            out.pop("mean_latency_ms")
            out.pop("mean_tokens_per_s")
        return out


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _evaluate_sample(model, sample: Sample, dcfg, k, seed, pool, template, placement, chash):
    base = dict(sample_id=sample.id, decoder=dcfg.kind, config_hash=chash, seed=seed,
                noise_level=k, tag=sample.primary_tag)
    try:
        bundle = bundle_for_sample(sample, k, seed, pool, template, placement,
                                   model.config.max_seq_len)
        result = run_decoder(model, bundle.tokens, dcfg, sample_seed(seed, sample.id))
    except LabError as exc:
        return RunRecord(**base, response="", correct=False, error=f"{type(exc).__name__}: {exc}")
    return RunRecord(
        **base,
        response=result.text,
        correct=answer_included(result.text, sample.gold_answers),
        prompt_tokens=len(bundle.rendered),
        generated_tokens=len(result.tokens),
        steps=result.steps,
        selected_layers=list(result.selected_layers),
        fallback_count=result.fallback_count,
        latency_ms=result.latency_ms,
        tokens_per_s=result.tokens_per_s,
    )


def summarize(records: Sequence[RunRecord], dcfg: DecoderConfig, k: int, seed: int,
              chash: str, config: dict) -> EvalReport:
    n = len(records)
    n_correct = sum(r.correct for r in records)
    tags: dict[str, list[int]] = {}
    for r in records:
        tags.setdefault(r.tag, [0, 0])
        tags[r.tag][0] += 1
        tags[r.tag][1] += r.correct
    hist = Counter("none" if l is None else str(l) for r in records for l in r.selected_layers)
    ok = [r for r in records if r.error is None]
    return EvalReport(
        decoder=dcfg.kind,
        noise_level=k,
        config_hash=chash,
        seed=seed,
        n=n,
        n_correct=n_correct,
        accuracy=n_correct / n if n else 0.0,
        per_tag={t: {"n": c[0], "correct": c[1], "accuracy": c[1] / c[0]}
                 for t, c in sorted(tags.items())},
        n_failed=n - len(ok),
        total_steps=sum(r.steps for r in records),
        fallback_steps=sum(r.fallback_count for r in records),
        layer_histogram=dict(sorted(hist.items(), key=lambda kv: (kv[0] == "none", len(kv[0]), kv[0]))),
        mean_latency_ms=math.fsum(r.latency_ms for r in ok) / len(ok) if ok else 0.0,
        mean_tokens_per_s=math.fsum(r.tokens_per_s for r in ok) / len(ok) if ok else 0.0,
        config=config,
    )


def run_eval(model: InstrumentedModel, corpus: Sequence[Sample], dcfg: DecoderConfig,
             k: int = 0, seed: int = 0, pool: Sequence[str] = (), template: str = "compact",
             placement: str = "shuffled", workers: int = 1) -> tuple[EvalReport, list[RunRecord]]:
    """Evaluate one decoder at one noise level.

    Per-sample errors are recorded on the RunRecord and count as incorrect.
    Records come back in corpus order whatever ``workers`` is.
    """
    if k > len(pool):
        raise PreconditionError(f"noise level {k} exceeds noise pool size {len(pool)}")
    config = {
        "model": model.config.to_dict(),
        "model_kind": type(model).__name__,
        "model_checksum": model.checksum(),
        "decoder": dcfg.to_dict(),
        "noise_level": k,
        "seed": seed,
        "template": template,
        "placement": placement,
    }
    chash = config_hash(config)

    def one(sample):
        return _evaluate_sample(model, sample, dcfg, k, seed, pool, template, placement, chash)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(one, corpus))
    else:
        records = [one(s) for s in corpus]
    return summarize(records, dcfg, k, seed, chash, config), records


def write_records(records: Sequence[RunRecord], path: str | Path,
                  timing_path: str | Path | None = None) -> None:
    """RunRecords JSONL without timings (byte-stable); timings go to a sidecar."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    if timing_path is not None:
        with open(timing_path, "w", encoding="utf-8") as fh:
            for r in records:
                row = {"sample_id": r.sample_id, **{k: getattr(r, k) for k in TIMING_FIELDS}}
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def oracle_model(corpus, template: str = "compact", n_layers: int = 8,
                 max_seq_len: int = 512) -> ScriptedModel:
    """Scripted model that greedily emits each sample's first gold answer."""
    cue = get_template(template).cue
    cfg = ModelConfig(n_layers=n_layers, n_heads=4, d_model=256, vocab_size=256,
                      max_seq_len=max_seq_len)
    return ScriptedModel({s.query: s.gold_answers[0] for s in corpus}, cue, cfg)
