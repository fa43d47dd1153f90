import json
import logging
from dataclasses import replace

import pytest

from lfdlab.analysis import bundle_for_sample
from lfdlab.errors import ParseError, PreconditionError, SchemaError
from lfdlab.harness import (
    DecoderConfig,
    answer_included,
    config_hash,
    generate_corpus,
    load_corpus,
    load_noise_pool,
    oracle_model,
    read_records,
    run_eval,
    save_corpus,
    save_noise_pool,
    write_records,
)


def test_answer_included():
    assert answer_included("the Battle of San Jacinto.", ["Battle of San Jacinto"])
    assert not answer_included("18 minutes", ["Battle of San Jacinto"])
    assert not answer_included("", ["x"])
    assert answer_included("  BATTLE   of\nsan jacinto", ["battle of San Jacinto"])
    assert answer_included("no, it was Rome", ["Paris", "rome"])


def test_corpus_round_trip(tmp_path, small_corpus):
    samples, pool = small_corpus
    path = tmp_path / "c.jsonl"
    save_corpus(samples, path)
    assert load_corpus(path) == samples
    save_noise_pool(pool, tmp_path / "p.jsonl")
    assert load_noise_pool(tmp_path / "p.jsonl") == pool


def test_empty_corpus_warns(tmp_path, caplog):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with caplog.at_level(logging.WARNING):
        assert load_corpus(path) == []
    assert "empty" in caplog.text


def _write(tmp_path, rows):
    path = tmp_path / "c.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_schema_errors_carry_line_and_field(tmp_path):
    good = {"id": "a", "query": "q", "documents": [{"text": "t", "answer_spans": []}],
            "gold_answers": ["t"]}
    bad = {k: v for k, v in good.items() if k != "gold_answers"}
    bad["id"] = "b"
    with pytest.raises(SchemaError) as info:
        load_corpus(_write(tmp_path, [good, bad]))
    assert info.value.line == 2 and info.value.field == "gold_answers"
    oob = dict(good, documents=[{"text": "t", "answer_spans": [[0, 5]]}])
    with pytest.raises(SchemaError):
        load_corpus(_write(tmp_path, [oob]))
    with pytest.raises(SchemaError):
        load_corpus(_write(tmp_path, [good, good]))
    (tmp_path / "broken.jsonl").write_text('{"id": \n')
    with pytest.raises(ParseError):
        load_corpus(tmp_path / "broken.jsonl")


def test_synthetic_corpus_spans_locate_answers():
    samples, pool = generate_corpus(20, seed=1, pool_size=30)
    assert len(pool) == 30 and len({s.id for s in samples}) == 20
    for s in samples:
        spans = [d.text.encode()[a:b].decode() for d in s.documents for a, b in d.answer_spans]
        if s.primary_tag == "bridge":
            assert spans == [s.gold_answers[0]]
        else:
            # compare: the spans are the two years and the gold is the older item
            assert s.primary_tag == "compare" and len(spans) == 2
            older = min(spans, key=int)
            assert f"{s.gold_answers[0]} was built in {older}" in s.documents[0].text \
                or f"{s.gold_answers[0]} in {older}" in s.documents[0].text
    assert generate_corpus(20, seed=1, pool_size=30) == (samples, pool)


def test_synthetic_prompts_fit_context(small_corpus):
    samples, pool = small_corpus
    for s in samples:
        assert len(bundle_for_sample(s, 12, 0, pool).rendered) <= 512 - 16


def test_oracle_corpus_accuracy(small_corpus):
    samples, pool = small_corpus
    model = oracle_model(samples)
    for kind in ("greedy", "lfd-fixed"):
        report, records = run_eval(model, samples, DecoderConfig(kind), k=4, pool=pool)
        assert report.accuracy == 1.0, kind
        assert all(r.correct and r.error is None for r in records)


def test_run_eval_precondition(toy_model, small_corpus):
    samples, pool = small_corpus
    with pytest.raises(PreconditionError):
        run_eval(toy_model, samples, DecoderConfig("greedy"), k=len(pool) + 1, pool=pool)


def test_run_eval_report_consistency(toy_model, small_corpus, tmp_path):
    samples, pool = small_corpus
    dcfg = DecoderConfig("lfd", max_new_tokens=4)
    report, records = run_eval(toy_model, samples[:6], dcfg, k=4, seed=2, pool=pool)
    assert report.n == 6
    assert report.accuracy == sum(r.correct for r in records) / 6
    assert sum(t["n"] for t in report.per_tag.values()) == 6
    assert sum(report.layer_histogram.values()) == report.total_steps
    for r in records:
        assert r.correct == answer_included(r.response, next(
            s.gold_answers for s in samples if s.id == r.sample_id))
        assert r.latency_ms > 0
        assert r.tokens_per_s == pytest.approx(r.generated_tokens / (r.latency_ms / 1e3))
    again, records2 = run_eval(toy_model, samples[:6], dcfg, k=4, seed=2, pool=pool)
    assert again.to_json(include_timing=False) == report.to_json(include_timing=False)
    write_records(records, tmp_path / "a.jsonl")
    write_records(records2, tmp_path / "b.jsonl", tmp_path / "t.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len(read_records(tmp_path / "t.jsonl")) == 6
    assert "latency_ms" not in read_records(tmp_path / "a.jsonl")[0]


def test_workers_preserve_order(toy_model, small_corpus):
    samples, pool = small_corpus
    dcfg = DecoderConfig("greedy", max_new_tokens=2)
    _, serial = run_eval(toy_model, samples[:5], dcfg, k=2, pool=pool)
    _, threaded = run_eval(toy_model, samples[:5], dcfg, k=2, pool=pool, workers=3)
    assert [r.to_json() for r in serial] == [r.to_json() for r in threaded]


def test_config_hash_stable():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_per_sample_failures_are_recorded(toy_model, small_corpus):
    samples, pool = small_corpus
    long_query = replace(samples[0], query="x" * 600)
    report, records = run_eval(toy_model, [long_query, samples[1]],
                               DecoderConfig("greedy", max_new_tokens=2), pool=pool)
    assert report.n_failed == 1 and records[0].error.startswith("SequenceTooLongError")
    assert records[1].error is None
