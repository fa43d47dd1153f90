"""Answer-ablation and noise-injection study of layer-wise behaviour.

Prompts are rendered byte-for-byte (token id == byte value) so answer spans
given as byte offsets into a document map exactly onto token positions.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics
from .errors import (
    EmptyCorpusError,
    NoAnswerSpansError,
    PreconditionError,
    SequenceTooLongError,
    SpanOutOfBoundsError,
    TemplateUnknownError,
)
from .model import InstrumentedModel

Z95 = 1.96
PLACEMENTS = ("before", "after", "shuffled")


@dataclass(frozen=True)
class Template:
    name: str
    header: str
    doc_prefix: str
    doc_suffix: str
    question_prefix: str
    cue: str


TEMPLATES = {
    "compact": Template(
        name="compact",
        header="Answer from the documents.\n",
        doc_prefix="- ",
        doc_suffix="\n",
        question_prefix="Q: ",
        cue="\nA:",
    ),
    "extractive": Template(
        name="extractive",
        header=("Read the documents and reply with the answer copied from one of them. "
                "Reply NONE if no document contains it.\n"),
        doc_prefix="Document [{index}] ",
        doc_suffix="\n",
        question_prefix="Question: ",
        cue=" Answer:",
    ),
}


def get_template(name: str) -> Template:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise TemplateUnknownError(f"unknown template {name!r}; known: {sorted(TEMPLATES)}") from None


def _is_char_boundary(raw: bytes, offset: int) -> bool:
    return offset == len(raw) or offset == 0 or (raw[offset] & 0xC0) != 0x80


@dataclass(frozen=True)
class Document:
    text: str
    answer_spans: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        raw = self.text.encode("utf-8")
        spans = tuple((int(s), int(e)) for s, e in self.answer_spans)
        prev_end = 0
        for start, end in spans:
            if not 0 <= start < end <= len(raw) or start < prev_end:
                raise SpanOutOfBoundsError(
                    f"span [{start}, {end}) invalid for a {len(raw)}-byte document "
                    "(spans must be nonempty, in bounds, sorted and disjoint)"
                )
            if not (_is_char_boundary(raw, start) and _is_char_boundary(raw, end)):
                raise SpanOutOfBoundsError(f"span [{start}, {end}) splits a UTF-8 character")
            prev_end = end
        object.__setattr__(self, "answer_spans", spans)

    def ablated(self) -> "Document":
        raw = self.text.encode("utf-8")
        kept, cursor = [], 0
        for start, end in self.answer_spans:
            kept.append(raw[cursor:start])
            cursor = end
        kept.append(raw[cursor:])
        return Document(b"".join(kept).decode("utf-8"))


@dataclass(frozen=True)
class PromptBundle:
    query: str
    documents: tuple[Document, ...]
    noise_docs: tuple[str, ...]
    template: str
    placement: str
    placement_seed: int
    order: tuple[tuple[str, int], ...]
    rendered: tuple[int, ...]
    span_map: tuple[tuple[int, int], ...]

    @property
    def tokens(self) -> np.ndarray:
        return np.asarray(self.rendered, dtype=np.int64)

    @property
    def span_positions(self) -> frozenset[int]:
        return frozenset(p for start, end in self.span_map for p in range(start, end))

    @property
    def text(self) -> str:
        return bytes(self.rendered).decode("utf-8")


def _placement_order(n_docs: int, n_noise: int, placement: str, seed: int):
    docs = [("doc", i) for i in range(n_docs)]
    noise = [("noise", j) for j in range(n_noise)]
    if placement == "before":
        return tuple(noise + docs)
    if placement == "after":
        return tuple(docs + noise)
    if placement == "shuffled":
        items = docs + noise
        perm = np.random.default_rng(seed).permutation(len(items))
        return tuple(items[i] for i in perm)
    raise ValueError(f"placement must be one of {PLACEMENTS}, got {placement!r}")


def _render(query, documents, noise_docs, template, order, max_seq_len):
    tpl = get_template(template)
    out = bytearray(tpl.header.encode("utf-8"))
    spans = []
    for index, (kind, i) in enumerate(order, start=1):
        out += tpl.doc_prefix.format(index=index).encode("utf-8")
        if kind == "doc":
            doc = documents[i]
            base = len(out)
            spans.extend((base + s, base + e) for s, e in doc.answer_spans)
            out += doc.text.encode("utf-8")
        else:
            out += noise_docs[i].encode("utf-8")
        out += tpl.doc_suffix.encode("utf-8")
    out += (tpl.question_prefix + query + tpl.cue).encode("utf-8")
    if max_seq_len is not None and len(out) > max_seq_len:
        raise SequenceTooLongError(f"rendered prompt has {len(out)} tokens > {max_seq_len}")
    return tuple(out), tuple(spans)


def render_prompt(query: str, documents: Sequence[Document], noise_docs: Sequence[str] = (),
                  template: str = "compact", placement_seed: int = 0,
                  placement: str = "shuffled", max_seq_len: int | None = None) -> PromptBundle:
    """Render query, documents and noise documents into a byte-token prompt."""
    get_template(template)
    documents = tuple(documents)
    noise_docs = tuple(noise_docs)
    order = _placement_order(len(documents), len(noise_docs), placement, placement_seed)
    rendered, spans = _render(query, documents, noise_docs, template, order, max_seq_len)
    return PromptBundle(query, documents, noise_docs, template, placement,
                        placement_seed, order, rendered, spans)


def rerender(bundle: PromptBundle, documents: Sequence[Document] | None = None,
             max_seq_len: int | None = None) -> PromptBundle:
    docs = bundle.documents if documents is None else tuple(documents)
    rendered, spans = _render(bundle.query, docs, bundle.noise_docs, bundle.template,
                              bundle.order, max_seq_len)
    return replace(bundle, documents=docs, rendered=rendered, span_map=spans)


def ablate(bundle: PromptBundle) -> PromptBundle:
    """Delete the answer spans from every document and re-render.

    Noise documents and their placement are kept as they were.
    """
    if not bundle.span_map:
        raise NoAnswerSpansError("prompt has no answer spans to ablate")
    return rerender(bundle, [d.ablated() for d in bundle.documents])


def draw_noise(pool: Sequence[str], k: int, seed: int, sample_id: str) -> tuple[tuple[str, ...], int]:
    """Pick ``k`` distinct noise texts and a placement seed for one sample.

    The stream depends on the sample id rather than its corpus index so
    results do not change when the corpus is reordered.
    """
    if k < 0:
        raise PreconditionError("noise level must be >= 0")
    if k > len(pool):
        raise PreconditionError(f"noise level {k} exceeds noise pool size {len(pool)}")
    rng = np.random.default_rng([seed, k, zlib.crc32(sample_id.encode("utf-8"))])
    idx = rng.choice(len(pool), size=k, replace=False) if k else []
    return tuple(pool[i] for i in idx), int(rng.integers(0, 2**63 - 1))


def bundle_for_sample(sample, k: int, seed: int, pool: Sequence[str] = (),
                      template: str = "compact", placement: str = "shuffled",
                      max_seq_len: int | None = None) -> PromptBundle:
    noise, placement_seed = draw_noise(pool, k, seed, sample.id)
    return render_prompt(sample.query, sample.documents, noise, template,
                         placement_seed, placement, max_seq_len)


# -- metrics ---------------------------------------------------------------

SIM_SITES = ("mlp_out", "ffn_out", "ffn_in")


def sim_hidden(model: InstrumentedModel, p: PromptBundle, phat: PromptBundle,
               site: str = "mlp_out") -> np.ndarray:
    """Per-layer cosine between final-token activations of ``p`` and ``phat``.

    ``site`` picks the activation: the FFN sublayer output (default) or the
    residual stream entering/leaving the FFN.
    """
    if site not in SIM_SITES:
        raise ValueError(f"site must be one of {SIM_SITES}")
    a = model.forward_trace(p.tokens)
    b = model.forward_trace(phat.tokens)
    return np.array([numerics.cosine(getattr(la, site), getattr(lb, site))
                     for la, lb in zip(a.layers, b.layers)])


def attention_shift(alpha, masked_scores, span_positions: Iterable[int]) -> float:
    """JSD between an attention row restricted to non-span positions and the
    softmax of ``masked_scores`` with the span filled with ``-inf``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    span = sorted(set(span_positions))
    keep = np.ones(alpha.shape[-1], dtype=bool)
    keep[span] = False
    kept = numerics.restrict(alpha, keep)
    masked = numerics.softmax(numerics.mask_positions(masked_scores, span))[..., keep]
    return numerics.jsd(kept, masked / masked.sum(axis=-1, keepdims=True))


DIFFATTN_MODES = ("propagated", "local")


def diff_attn(model: InstrumentedModel, p: PromptBundle, mode: str = "propagated") -> np.ndarray:
    """Per-layer head-averaged attention JSD at the final token when the answer
    spans are hidden from attention.

    ``propagated`` runs a second pass over the same tokens with the span keys
    masked in every layer, so upstream changes reach the compared row.
    ``local`` masks only the compared score row of the original pass; its
    renormalized rows coincide with the restricted original, so it measures
    numerical noise only and exists as a consistency check.
    """
    if not p.span_map:
        raise NoAnswerSpansError("DiffAttn requires answer spans")
    if mode not in DIFFATTN_MODES:
        raise ValueError(f"mode must be one of {DIFFATTN_MODES}")
    span = p.span_positions
    trace = model.forward_trace(p.tokens)
    masked = model.forward_trace(p.tokens, masked_positions=span) if mode == "propagated" else trace
    out = []
    for lt, lm in zip(trace.layers, masked.layers):
        shifts = attention_shift(lt.attn, lm.attn_scores, span)
        out.append(float(np.mean(shifts)))
    return np.array(out)


@dataclass(frozen=True)
class LayerProfile:
    mean: np.ndarray
    ci_half: np.ndarray
    n_samples: int
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def ci_low(self) -> np.ndarray:
        return self.mean - self.ci_half

    @property
    def ci_high(self) -> np.ndarray:
        return self.mean + self.ci_half

    def rows(self) -> list[dict]:
        return [
            {"layer": i + 1, "mean": float(m), "ci_low": float(m - h),
             "ci_high": float(m + h), "n": self.n_samples}
            for i, (m, h) in enumerate(zip(self.mean, self.ci_half))
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["layer", "mean", "ci_low", "ci_high", "n"],
                                lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def to_records(self) -> list[dict]:
        return [{**self.meta, **row} for row in self.rows()]


def aggregate(vectors: Sequence[np.ndarray]) -> LayerProfile:
    """Mean and normal-approximation 95% CI per layer.

    Uses ``math.fsum`` so the result does not depend on sample order.
    """
    if not vectors:
        raise EmptyCorpusError("nothing to aggregate")
    mat = np.asarray(vectors, dtype=np.float64)
    n = mat.shape[0]
    mean = np.array([math.fsum(col) / n for col in mat.T])
    if n == 1:
        return LayerProfile(mean, np.zeros_like(mean), 1)
    var = np.array([math.fsum((col - m) ** 2) / (n - 1) for col, m in zip(mat.T, mean)])
    return LayerProfile(mean, Z95 * np.sqrt(var / n), n)


METRICS = ("simhidden", "diffattn")


def sample_metric(model, sample, metric: str, k: int, seed: int, pool=(),
                  template: str = "compact", placement: str = "shuffled",
                  ablate_fn: Callable[[PromptBundle], PromptBundle] = ablate,
                  diffattn_mode: str = "propagated", site: str = "mlp_out") -> np.ndarray:
    bundle = bundle_for_sample(sample, k, seed, pool, template, placement,
                               model.config.max_seq_len)
    if not bundle.span_map:
        raise NoAnswerSpansError(f"sample {sample.id!r} has no answer spans")
    if metric == "simhidden":
        return sim_hidden(model, bundle, ablate_fn(bundle), site=site)
    if metric == "diffattn":
        return diff_attn(model, bundle, mode=diffattn_mode)
    raise ValueError(f"metric must be one of {METRICS}")


def profile(model: InstrumentedModel, corpus, metric: str, k: int = 0, seed: int = 0,
            pool: Sequence[str] = (), template: str = "compact", placement: str = "shuffled",
            ablate_fn: Callable[[PromptBundle], PromptBundle] = ablate,
            diffattn_mode: str = "propagated", site: str = "mlp_out") -> LayerProfile:
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpusError("corpus is empty")
    missing = [s.id for s in corpus if not any(d.answer_spans for d in s.documents)]
    if missing:
        raise NoAnswerSpansError(
            f"every sample needs answer spans; {len(missing)} sample(s) have none "
            f"(first: {missing[0]!r})"
        )
    vectors = [sample_metric(model, s, metric, k, seed, pool, template, placement,
                             ablate_fn, diffattn_mode, site) for s in corpus]
    prof = aggregate(vectors)
    return replace(prof, meta={"metric": metric, "noise_level": k})
