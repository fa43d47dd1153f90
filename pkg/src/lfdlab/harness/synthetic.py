"""Synthetic QA corpus with planted answers and a distractor pool.

Entity names are built from random syllables, so nothing in the corpus can
be known to a model in advance; the answer is only available in context.
"""

from __future__ import annotations

import numpy as np

from ..analysis import Document
from .corpus import Sample

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]
_RELATIONS = ["capital", "founder", "river", "mayor", "rival", "patron"]
_VERBS = ["trades salt with", "lies near", "borders", "feuds with", "sells wool to"]


def _name(rng: np.random.Generator, used: set[str]) -> str:
    while True:
        n = int(rng.integers(2, 4))
        word = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                       for _ in range(n))
        word = word.capitalize()
        if word not in used:
            used.add(word)
            return word


def _span(text: str, needle: str, start: int = 0) -> tuple[int, int]:
    raw = text.encode("utf-8")
    at = raw.index(needle.encode("utf-8"), len(text[:start].encode("utf-8")))
    return at, at + len(needle.encode("utf-8"))


def _bridge(rng, used, sid) -> Sample:
    rel = _RELATIONS[rng.integers(len(_RELATIONS))]
    subject, answer = _name(rng, used), _name(rng, used)
    prefix = f"The {rel} of {subject} is "
    text = prefix + answer + "."
    return Sample(
        id=sid,
        query=f"What is the {rel} of {subject}?",
        documents=(Document(text, (_span(text, answer, len(prefix)),)),),
        gold_answers=(answer,),
        tags=("bridge",),
    )


def _compare(rng, used, sid) -> Sample:
    a, b = _name(rng, used), _name(rng, used)
    ya, yb = rng.choice(np.arange(1200, 1900), size=2, replace=False)
    first = f"{a} was built in "
    middle = f"{ya} and {b} in "
    text = f"{first}{middle}{yb}."
    spans = (_span(text, str(ya), len(first)), _span(text, str(yb), len(first + middle)))
    return Sample(
        id=sid,
        query=f"Which is older, {a} or {b}?",
        documents=(Document(text, spans),),
        gold_answers=(a if ya < yb else b,),
        tags=("compare",),
    )


def generate_corpus(n: int, seed: int = 0, pool_size: int = 200) -> tuple[list[Sample], list[str]]:
    """``n`` samples (alternating bridge / compare) and ``pool_size`` noise texts."""
    rng = np.random.default_rng([seed, 0x5EED])
    used: set[str] = set()
    samples = []
    for i in range(n):
        make = _bridge if i % 2 == 0 else _compare
        samples.append(make(rng, used, f"s{i:05d}"))
    pool = []
    for _ in range(pool_size):
        verb = _VERBS[rng.integers(len(_VERBS))]
        pool.append(f"{_name(rng, used)} {verb} {_name(rng, used)}.")
    return samples, pool
