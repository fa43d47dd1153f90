from .corpus import Sample, load_corpus, load_noise_pool, sample_from_json, save_corpus, save_noise_pool
from .evaluate import (
    DECODERS,
    NOISE_LEVELS,
    DecoderConfig,
    EvalReport,
    RunRecord,
    answer_included,
    config_hash,
    oracle_model,
    read_records,
    run_decoder,
    run_eval,
    write_records,
)
from .synthetic import generate_corpus

__all__ = [
    "DECODERS",
    "NOISE_LEVELS",
    "DecoderConfig",
    "EvalReport",
    "RunRecord",
    "Sample",
    "answer_included",
    "config_hash",
    "generate_corpus",
    "load_corpus",
    "load_noise_pool",
    "oracle_model",
    "read_records",
    "run_decoder",
    "run_eval",
    "sample_from_json",
    "save_corpus",
    "save_noise_pool",
    "write_records",
]
