"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import analysis
from ..decoding import iks_profile
from ..errors import LabError
from ..model import ModelConfig, build_toy_model
from .corpus import load_corpus, load_noise_pool, save_corpus, save_noise_pool
from .evaluate import (
    DECODERS,
    NOISE_LEVELS,
    DecoderConfig,
    oracle_model,
    read_records,
    run_decoder,
    run_eval,
    write_records,
)
from .synthetic import generate_corpus

log = logging.getLogger("lfdlab")

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("need at least one non-negative integer")
    return values


def parse_layers(value: str | None, n_layers: int, decoder: str) -> tuple[tuple[int, int] | None, bool]:
    """Map a ``--layers`` value to ``(candidate_range, even_only)``."""
    if value is None:
        return ((0, n_layers), True) if decoder == "dola" else (None, True)
    named = {
        "latter-half-even": ((n_layers // 2, n_layers), True),
        "latter-half": ((n_layers // 2, n_layers), False),
        "all-even": ((0, n_layers), True),
        "all": ((0, n_layers), False),
    }
    if value in named:
        return named[value]
    parts = value.split(":")
    try:
        if len(parts) in (2, 3) and (len(parts) == 2 or parts[2] == "even"):
            return (int(parts[0]), int(parts[1])), len(parts) == 3
    except ValueError:
        pass
    raise UsageError(f"--layers must be one of {sorted(named)} or LO:HI[:even], got {value!r}")


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    g.add_argument("--model", choices=["toy", "oracle"], default="toy")
    g.add_argument("--n-layers", type=int, default=8)
    g.add_argument("--n-heads", type=int, default=4)
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--max-seq-len", type=int, default=512)


def _add_data_args(p, corpus_required=True):
    g = p.add_argument_group("data")
    g.add_argument("--corpus", required=corpus_required)
    g.add_argument("--noise-pool")
    g.add_argument("--template", choices=sorted(analysis.TEMPLATES), default="compact")
    g.add_argument("--placement", choices=analysis.PLACEMENTS, default="shuffled")


def _add_decoder_args(p):
    g = p.add_argument_group("decoder")
    g.add_argument("--decoder", choices=DECODERS, default="lfd")
    g.add_argument("--tau", type=float, default=0.1)
    g.add_argument("--s", type=int, default=10)
    g.add_argument("--layers", default=None,
                   help="latter-half-even (LFD default), latter-half, all-even (DoLA default), all, or LO:HI[:even]")
    g.add_argument("--fixed-layer", type=int, default=None, help="lfd-fixed layer (default: final layer)")
    g.add_argument("--max-new-tokens", type=int, default=16)
    g.add_argument("--per-prompt", action="store_true", help="select the fusion layer once per prompt")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lfdlab", description="Layer fused decoding laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-model", help="build the seeded toy model and print its checksum")
    _add_model_args(p)
    p.add_argument("--dump", help="write little-endian float32 weights here")

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus and noise pool")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--pool-size", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pool-out", required=True)

    for name in ("profile-simhidden", "profile-diffattn", "profile-iks"):
        p = sub.add_parser(name, help=f"per-layer {name.split('-')[1]} profile over a corpus")
        _add_model_args(p)
        _add_data_args(p)
        p.add_argument("--noise-levels", type=_int_list, default=list(NOISE_LEVELS))
        p.add_argument("--out-dir", help="write CSV and JSON profiles here")
        if name == "profile-simhidden":
            p.add_argument("--site", choices=analysis.SIM_SITES, default="mlp_out")
        if name == "profile-diffattn":
            p.add_argument("--mode", choices=analysis.DIFFATTN_MODES, default="propagated")

    p = sub.add_parser("decode", help="decode a single prompt")
    _add_model_args(p)
    _add_decoder_args(p)
    _add_data_args(p, corpus_required=False)
    p.add_argument("--prompt", help="raw prompt text")
    p.add_argument("--sample-id", help="render this corpus sample instead of --prompt")
    p.add_argument("--noise-level", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a decoder over a corpus")
    _add_model_args(p)
    _add_decoder_args(p)
    _add_data_args(p)
    p.add_argument("--noise-levels", type=_int_list, default=list(NOISE_LEVELS))
    p.add_argument("--out-dir", help="write RunRecords JSONL, timings and report JSON here")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("compare", help="join two RunRecord files into a per-sample diff table")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="CSV destination (default stdout)")
    return parser


def _model(args, corpus=None):
    cfg = ModelConfig(n_layers=args.n_layers, n_heads=args.n_heads, d_model=args.d_model,
                      max_seq_len=args.max_seq_len, seed=args.seed)
    if args.model == "oracle":
        if corpus is None:
            raise UsageError("--model oracle needs --corpus")
        return oracle_model(corpus, getattr(args, "template", "compact"),
                            n_layers=args.n_layers, max_seq_len=args.max_seq_len)
    return build_toy_model(cfg)


def _pool(args, levels) -> list[str]:
    if args.noise_pool:
        return load_noise_pool(args.noise_pool)
    if any(k > 0 for k in levels):
        raise LabError("noise levels above 0 need --noise-pool")
    return []


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _decoder_config(args, n_layers: int) -> DecoderConfig:
    rng, even = parse_layers(args.layers, n_layers, args.decoder)
    return DecoderConfig(kind=args.decoder, tau=args.tau, s=args.s, candidate_range=rng,
                         even_only=even, fixed_layer=args.fixed_layer,
                         per_step=not args.per_prompt, max_new_tokens=args.max_new_tokens)


def cmd_gen_model(args) -> int:
    model = _model(args)
    if args.dump:
        model.dump_weights(args.dump)
    _emit({"checksum": model.checksum(), "config": model.config.to_dict(),
           "n_params": len(model.weight_bytes()) // 4})
    return 0


def cmd_gen_corpus(args) -> int:
    samples, pool = generate_corpus(args.n, args.seed, args.pool_size)
    save_corpus(samples, args.out)
    save_noise_pool(pool, args.pool_out)
    _emit({"samples": len(samples), "pool": len(pool), "corpus": args.out, "noise_pool": args.pool_out})
    return 0


def _write_profile(out_dir, stem, prof):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(prof.to_csv(), encoding="utf-8")
    (out / f"{stem}.json").write_text(json.dumps(prof.to_records(), indent=2) + "\n", encoding="utf-8")


def cmd_profile(args) -> int:
    corpus = load_corpus(args.corpus)
    pool = _pool(args, args.noise_levels)
    model = _model(args, corpus)
    metric = args.command.split("-", 1)[1]
    results = []
    for k in args.noise_levels:
        if metric == "iks":
            if not corpus:
                raise LabError("corpus is empty")
            vectors = []
            for s in corpus:
                bundle = analysis.bundle_for_sample(s, k, args.seed, pool, args.template,
                                                    args.placement, model.config.max_seq_len)
                vectors.append(iks_profile(model, model.forward_trace(bundle.tokens)).scores)
            prof = analysis.aggregate(vectors)
            prof = analysis.LayerProfile(prof.mean, prof.ci_half, prof.n_samples,
                                         {"metric": "iks", "noise_level": k})
        else:
            prof = analysis.profile(model, corpus, metric, k, args.seed, pool, args.template,
                                    args.placement,
                                    diffattn_mode=getattr(args, "mode", "propagated"),
                                    site=getattr(args, "site", "mlp_out"))
        if args.out_dir:
            _write_profile(args.out_dir, f"{metric}_k{k}", prof)
        results.extend(prof.to_records())
    _emit(results)
    return 0


def cmd_decode(args) -> int:
    corpus = load_corpus(args.corpus) if args.corpus else None
    model = _model(args, corpus)
    if args.sample_id is not None:
        if corpus is None:
            raise UsageError("--sample-id needs --corpus")
        match = [s for s in corpus if s.id == args.sample_id]
        if not match:
            raise LabError(f"sample {args.sample_id!r} not in corpus")
        pool = _pool(args, [args.noise_level])
        bundle = analysis.bundle_for_sample(match[0], args.noise_level, args.seed, pool,
                                            args.template, args.placement, model.config.max_seq_len)
        tokens = bundle.tokens
    elif args.prompt is not None:
        tokens = np.frombuffer(args.prompt.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    else:
        raise UsageError("decode needs --prompt or --sample-id")
    dcfg = _decoder_config(args, model.config.n_layers)
    result = run_decoder(model, tokens, dcfg, args.seed)
    _emit({
        "decoder": dcfg.kind,
        "text": result.text,
        "tokens": result.tokens,
        "selected_layers": result.selected_layers,
        "fallbacks": result.fallbacks,
        "stopped_at_eos": result.stopped_at_eos,
        "latency_ms": result.latency_ms,
        "tokens_per_s": result.tokens_per_s,
    })
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    pool = _pool(args, args.noise_levels)
    model = _model(args, corpus)
    dcfg = _decoder_config(args, model.config.n_layers)
    reports = []
    for k in args.noise_levels:
        report, records = run_eval(model, corpus, dcfg, k, args.seed, pool, args.template,
                                   args.placement, args.workers)
        if args.out_dir:
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            stem = f"{dcfg.kind}_k{k}"
            write_records(records, out / f"records_{stem}.jsonl", out / f"timings_{stem}.jsonl")
            (out / f"report_{stem}.json").write_text(
                json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        log.info("%s k=%d accuracy=%.4f", dcfg.kind, k, report.accuracy)
        reports.append(report.to_json())
    _emit(reports[0] if len(reports) == 1 else reports)
    return 0


def cmd_compare(args) -> int:
    a = {r["sample_id"]: r for r in read_records(args.a)}
    b = {r["sample_id"]: r for r in read_records(args.b)}
    ids = list(a) + [i for i in b if i not in a]
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "correct_a", "correct_b", "status", "response_a", "response_b"])
        counts: dict[str, int] = {}
        for sid in ids:
            ra, rb = a.get(sid), b.get(sid)
            if ra is None or rb is None:
                status = "missing_a" if ra is None else "missing_b"
            else:
                status = {(True, True): "both", (True, False): "a_only",
                          (False, True): "b_only", (False, False): "neither"}[(ra["correct"], rb["correct"])]
            counts[status] = counts.get(status, 0) + 1
            writer.writerow([sid, ra and ra["correct"], rb and rb["correct"], status,
                             ra and ra["response"], rb and rb["response"]])
    finally:
        if fh is not sys.stdout:
            fh.close()
    print(json.dumps(counts, sort_keys=True), file=sys.stderr)
    return 0


COMMANDS = {
    "gen-model": cmd_gen_model,
    "gen-corpus": cmd_gen_corpus,
    "profile-simhidden": cmd_profile,
    "profile-diffattn": cmd_profile,
    "profile-iks": cmd_profile,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lfdlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LabError, OSError, ValueError) as exc:
        print(f"lfdlab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
