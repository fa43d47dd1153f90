"""JSONL corpus and noise-pool I/O with line-numbered validation errors."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..analysis import Document
from ..errors import ParseError, SchemaError, SpanOutOfBoundsError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    id: str
    query: str
    documents: tuple[Document, ...]
    gold_answers: tuple[str, ...]
    tags: tuple[str, ...] = ()

    @property
    def primary_tag(self) -> str:
        return self.tags[0] if self.tags else "untagged"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "query": self.query,
            "documents": [
                {"text": d.text, "answer_spans": [list(s) for s in d.answer_spans]}
                for d in self.documents
            ],
            "gold_answers": list(self.gold_answers),
            "tags": list(self.tags),
        }


def _require(obj: dict, key: str, kind, line: int):
    if key not in obj:
        raise SchemaError(line, key, "missing")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise SchemaError(line, key, f"expected {getattr(kind, '__name__', kind)}")
    return value


def sample_from_json(obj, line: int = 0) -> Sample:
    if not isinstance(obj, dict):
        raise SchemaError(line, "<root>", "expected a JSON object")
    sid = _require(obj, "id", (str, int), line)
    query = _require(obj, "query", str, line)
    raw_docs = _require(obj, "documents", list, line)
    if not raw_docs:
        raise SchemaError(line, "documents", "at least one document required")
    docs = []
    for i, raw in enumerate(raw_docs):
        where = f"documents[{i}]"
        if not isinstance(raw, dict) or not isinstance(raw.get("text"), str):
            raise SchemaError(line, f"{where}.text", "expected a string")
        spans = raw.get("answer_spans", [])
        if not isinstance(spans, list) or not all(
            isinstance(s, list) and len(s) == 2 and all(isinstance(x, int) for x in s)
            for s in spans
        ):
            raise SchemaError(line, f"{where}.answer_spans", "expected [[start, end), ...] integer pairs")
        try:
            docs.append(Document(raw["text"], tuple(tuple(s) for s in spans)))
        except SpanOutOfBoundsError as exc:
            raise SchemaError(line, f"{where}.answer_spans", str(exc)) from None
    gold = _require(obj, "gold_answers", list, line)
    if not gold or not all(isinstance(g, str) and g.strip() for g in gold):
        raise SchemaError(line, "gold_answers", "at least one non-empty answer string required")
    tags = obj.get("tags", [])
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise SchemaError(line, "tags", "expected a list of strings")
    return Sample(str(sid), query, tuple(docs), tuple(gold), tuple(tags))


def _json_lines(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                yield lineno, json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, exc.msg) from None


def load_corpus(path: str | Path) -> list[Sample]:
    samples, seen = [], {}
    for lineno, obj in _json_lines(path):
        sample = sample_from_json(obj, lineno)
        if sample.id in seen:
            raise SchemaError(lineno, "id", f"duplicate id {sample.id!r} (first on line {seen[sample.id]})")
        seen[sample.id] = lineno
        samples.append(sample)
    if not samples:
        log.warning("corpus %s is empty", path)
    return samples


def save_corpus(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def load_noise_pool(path: str | Path) -> list[str]:
    """One noise document per line: ``{"text": ...}`` objects or bare strings."""
    pool = []
    for lineno, obj in _json_lines(path):
        text = obj.get("text") if isinstance(obj, dict) else obj
        if not isinstance(text, str):
            raise SchemaError(lineno, "text", "expected a string")
        pool.append(text)
    return pool


def save_noise_pool(pool: Sequence[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text in pool:
            fh.write(json.dumps({"text": text}) + "\n")
