"""Command-line entry point.

Exit codes: 0 success, 2 partial failure, 1 fatal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import __version__
from .config import ConfigError, PipelineConfig
from .datasets import DatasetError, apply_quotas, dataset_digest, load_dataset, parse_dataset_arg
from .environment import EpisodeTrace, evaluate, rescore, run_batch
from .gateway import AuthError, BackendError, BackendSpec, CacheCorruptionError, Gateway, ResponseCache
from .jsonl import JSONLError, file_digest, iter_jsonl, read_jsonl, read_sidecar, write_jsonl, write_sidecar
from .objectives import ObjectiveError, PairLogProbs, TokenLogProbTrace, dpo_loss, implicit_reward_margin, sft_loss
from .preferences import (
    CandidateSet,
    MissingPredecessorError,
    build_preferences,
    build_sft,
    manifest_digest,
    plan_round,
    reference_for_round,
    round_dir,
    sample_batch,
)
from .retrieval import DECOMPOSED_UNION, SINGLE_QUERY, Corpus, CorpusError, answer_recall, ingest_corpus

log = logging.getLogger("decomprag")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


class CLIError(RuntimeError):
    pass


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.cache_dir:
        overrides["cache_dir"] = args.cache_dir
    if args.concurrency:
        overrides["concurrency"] = args.concurrency
    if args.seed is not None:
        overrides["seed"] = args.seed
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _gateway(cfg: PipelineConfig) -> Gateway:
    return Gateway(ResponseCache(cfg.cache_dir), max_concurrency=cfg.concurrency)


def _backends(cfg: PipelineConfig) -> tuple[BackendSpec, BackendSpec]:
    if cfg.decomposer is None or cfg.reader is None:
        raise CLIError("config must define both 'decomposer' and 'reader' backends")
    return cfg.decomposer, cfg.reader


def _corpus(args, cfg: PipelineConfig) -> Corpus:
    return Corpus.load(args.index or cfg.index_dir)


def _questions(specs: list[str], cfg: PipelineConfig, limit: int | None, eval_slice: bool):
    questions, reports = [], []
    for spec in specs or []:
        tag, path = parse_dataset_arg(spec)
        cap = limit if limit is not None else (cfg.eval_limits.get(tag) if eval_slice else None)
        qs, report = load_dataset(path, tag, cap)
        for idx, reason in report.dropped:
            log.warning("%s: record %d dropped: %s", path, idx, reason)
        questions.extend(qs)
        reports.append(report.to_dict())
    return questions, reports


def _lock(path: Path) -> FileLock:
    path.parent.mkdir(parents=True, exist_ok=True)
    return FileLock(str(path) + ".lock", timeout=0)


def _fmt(x) -> str:
    return "-" if x is None else f"{100 * x:.1f}"


def _print_summary(report: dict) -> None:
    overall = report["overall"]
    if overall["n"] == 0 and overall["errors"] == 0:
        print("no data")
        return
    print(f"{'dataset':<12} {'n':>5} {'EM':>6} {'Acc':>6} {'F1':>6} {'fmt-bad':>8} {'errors':>7}")
    rows = list(report["datasets"].items()) + [("overall", overall)]
    for name, r in rows:
        print(f"{name:<12} {r['n']:>5} {_fmt(r['em']):>6} {_fmt(r['acc']):>6} {_fmt(r['f1']):>6} {r['format_invalid']:>8} {r['errors']:>7}")


def _outcome(n_total: int, n_failed: int) -> int:
    if n_failed == 0:
        return EXIT_OK
    return EXIT_FATAL if n_failed == n_total else EXIT_PARTIAL


# commands -----------------------------------------------------------------


def cmd_ingest(args, cfg: PipelineConfig) -> int:
    index_dir = Path(args.index or cfg.index_dir)
    with open(args.corpus, encoding="utf-8") as f:
        corpus, stats = ingest_corpus(f)
    corpus.save(index_dir)
    print(f"{stats.passages} passages indexed ({stats.tokens} tokens)")
    print(f"digest {stats.digest}")
    return EXIT_OK


def cmd_run(args, cfg: PipelineConfig) -> int:
    questions, reports = _questions(args.dataset, cfg, args.limit, eval_slice=True)
    if not questions:
        write_jsonl(args.out, [])
        write_sidecar(args.out, "traces", cfg.digest(), datasets=reports)
        print("no data")
        return EXIT_OK
    decomposer, reader = _backends(cfg)
    corpus = _corpus(args, cfg)
    with _lock(Path(args.out)), _gateway(cfg) as gw:
        traces = run_batch(questions, decomposer=decomposer, reader=reader, corpus=corpus, config=cfg, gateway=gw)
        write_jsonl(args.out, [t.to_dict() for t in traces])
        report = evaluate(traces, {q.id: q.gold for q in questions})
        write_sidecar(args.out, "traces", cfg.digest(), datasets=reports, metrics=report, corpus_digest=corpus.digest)
        log.info("network requests: %d", gw.network_requests)
    _print_summary(report)
    failed = [t for t in traces if not t.ok]
    for t in failed[:3]:
        print(f"error [{t.question_id}]: {t.error}", file=sys.stderr)
    return _outcome(len(traces), len(failed))


def _sample(args, cfg: PipelineConfig, questions, out: Path, n: int, decomposer: BackendSpec | None = None) -> tuple[list[CandidateSet], dict]:
    default_decomposer, reader = _backends(cfg)
    decomposer = decomposer or default_decomposer
    corpus = _corpus(args, cfg)
    with _gateway(cfg) as gw:
        sets = sample_batch(questions, decomposer=decomposer, reader=reader, corpus=corpus, config=cfg, gateway=gw, n=n)
    write_jsonl(out, [cs.to_dict() for cs in sets])
    histogram: dict[str, int] = {}
    for cs in sets:
        for r in cs.rewards:
            histogram[str(r)] = histogram.get(str(r), 0) + 1
    meta = {
        "questions": len(sets),
        "candidates": sum(len(cs.candidates) for cs in sets),
        "failed_questions": sum(1 for cs in sets if cs.error),
        "reward_histogram": dict(sorted(histogram.items())),
        "dataset_digest": dataset_digest(questions),
        "corpus_digest": corpus.digest,
    }
    write_sidecar(out, "candidates", cfg.digest(), **meta)
    return sets, meta


def cmd_sample(args, cfg: PipelineConfig) -> int:
    n = args.n or cfg.n_samples
    if n < 2 and not args.sft_only:
        raise CLIError("preference building needs N >= 2 samples per question (pass --sft-only for SFT data)")
    questions, _ = _questions(args.dataset, cfg, args.limit, eval_slice=False)
    questions = apply_quotas(questions, cfg.quotas, cfg.seed)
    with _lock(Path(args.out)):
        sets, meta = _sample(args, cfg, questions, Path(args.out), n)
    print(f"{meta['candidates']} scored candidates for {meta['questions']} questions")
    print("reward histogram: " + ", ".join(f"u={k}: {v}" for k, v in meta["reward_histogram"].items()))
    return _outcome(len(sets), meta["failed_questions"])


def _read_candidates(path) -> list[CandidateSet]:
    out = []
    for line_no, obj in iter_jsonl(path):
        try:
            out.append(CandidateSet.from_dict(obj))
        except (KeyError, TypeError, ValueError) as err:
            raise JSONLError(path, line_no, f"not a candidate set ({err})") from None
    return out


def cmd_build_sft(args, cfg: PipelineConfig) -> int:
    sets = _read_candidates(args.candidates)
    examples, stats = build_sft(sets, keep_all=args.keep_all or cfg.sft_keep_all)
    write_jsonl(args.out, [e.to_dict() for e in examples])
    write_sidecar(args.out, "sft", cfg.digest(), source_sha256=file_digest(args.candidates), stats=stats.to_dict())
    print(f"kept {stats.kept}, dropped {stats.dropped} of {stats.questions} questions ({len(examples)} examples)")
    return EXIT_OK


def cmd_build_prefs(args, cfg: PipelineConfig) -> int:
    sets = _read_candidates(args.candidates)
    pairs, stats = build_preferences(sets, args.round)
    write_jsonl(args.out, [p.to_dict() for p in pairs])
    write_sidecar(args.out, "preferences", cfg.digest(), source_sha256=file_digest(args.candidates), round=args.round, stats=stats.to_dict())
    share = f" ({100 * stats.discarded / stats.questions:.0f}% discarded)" if stats.questions else ""
    print(f"{stats.pairs} pairs, {stats.discarded} discarded of {stats.questions} questions{share}")
    return EXIT_OK


def cmd_recall(args, cfg: PipelineConfig) -> int:
    questions, _ = _questions(args.dataset, cfg, args.limit, eval_slice=False)
    gold = {q.id: q.gold for q in questions}
    traces = [EpisodeTrace.from_dict(obj) for obj in read_jsonl(args.traces)]
    traces = [t for t in traces if t.ok and t.question_id in gold]
    corpus = _corpus(args, cfg)
    report = answer_recall(corpus, traces, gold, args.mode)
    print(f"mode: {report.mode}")
    if report.total == 0:
        print("no data")
    else:
        print(f"recall: {report.recall:.4f} ({report.recalled}/{report.total})")
    if args.json:
        print(json.dumps(report.to_dict()))
    return EXIT_OK


def _trace_arg(obj: dict, key: str, tokens_key: str, path, line_no: int) -> TokenLogProbTrace:
    values = obj.get(key)
    if not isinstance(values, list):
        raise JSONLError(path, line_no, f"missing array {key!r}")
    try:
        return TokenLogProbTrace(tuple(values), obj.get(tokens_key))
    except (TypeError, ValueError) as err:
        raise JSONLError(path, line_no, f"{key}: {err}") from None


def read_pair_logprobs(path) -> list[tuple[dict, PairLogProbs]]:
    out = []
    for line_no, obj in iter_jsonl(path):
        try:
            pair = PairLogProbs(
                _trace_arg(obj, "chosen_policy", "chosen_tokens", path, line_no),
                _trace_arg(obj, "chosen_reference", "chosen_tokens", path, line_no),
                _trace_arg(obj, "rejected_policy", "rejected_tokens", path, line_no),
                _trace_arg(obj, "rejected_reference", "rejected_tokens", path, line_no),
            )
        except ObjectiveError as err:
            raise JSONLError(path, line_no, str(err)) from None
        out.append((obj, pair))
    return out


def cmd_loss_check(args, cfg: PipelineConfig) -> int:
    beta = cfg.beta
    manifest = None
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        beta = manifest["beta"]
    if args.beta is not None:
        beta = args.beta
    rows = read_pair_logprobs(args.pairs)
    if not rows:
        raise CLIError(f"{args.pairs} contains no pairs")
    if manifest is not None:
        for meta, _ in rows:
            if "round" in meta and meta["round"] != manifest["round"]:
                raise CLIError(f"pair {meta.get('pair_id')} is from round {meta['round']}, manifest is round {manifest['round']}")
    pairs = [p for _, p in rows]
    margins = [implicit_reward_margin(p, beta) for p in pairs]
    report = {
        "pairs": len(pairs),
        "beta": beta,
        "dpo_loss": dpo_loss(pairs, beta),
        "mean_margin": math.fsum(margins) / len(margins),
        "positive_margin_fraction": sum(1 for m in margins if m > 0) / len(margins),
    }
    if args.sft:
        traces = []
        for line_no, obj in iter_jsonl(args.sft):
            traces.append(_trace_arg(obj, "logprobs", "tokens", args.sft, line_no))
        report["sft_loss"] = sft_loss(traces)
    for k, v in report.items():
        print(f"{k}: {v!r}" if isinstance(v, float) else f"{k}: {v}")
    return EXIT_OK


def cmd_round(args, cfg: PipelineConfig) -> int:
    m = args.round
    reference, _ = reference_for_round(m, cfg)
    decomposer, _ = _backends(cfg)
    if "{reference}" in decomposer.model:
        decomposer = dataclasses.replace(decomposer, model=decomposer.model.replace("{reference}", reference))
    if cfg.n_samples < 2:
        raise CLIError("a DPO round needs n_samples >= 2")
    out_dir = round_dir(cfg.runs_dir, m)
    questions, _ = _questions(args.dataset, cfg, args.limit, eval_slice=False)
    questions = apply_quotas(questions, cfg.quotas, cfg.seed)
    with _lock(Path(cfg.runs_dir) / "runs"):
        sets, meta = _sample(args, cfg, questions, out_dir / "candidates.jsonl", cfg.n_samples, decomposer)
        pairs, stats = build_preferences(sets, m)
        prefs_path = write_jsonl(out_dir / "prefs.jsonl", [p.to_dict() for p in pairs])
        write_sidecar(prefs_path, "preferences", cfg.digest(), round=m, stats=stats.to_dict())
        manifest = plan_round(
            m, cfg, dataset_digest=meta["dataset_digest"], decomposer=decomposer,
            artifacts={"candidates.jsonl": file_digest(out_dir / "candidates.jsonl"), "prefs.jsonl": file_digest(prefs_path)},
        )
    print(f"round {m}: {stats.pairs} pairs, {stats.discarded} discarded, {meta['failed_questions']} failed questions")
    print(f"wrote {out_dir}/manifest.json")
    print("next: train with DPO on prefs.jsonl")
    print(f"  reference model : {manifest['reference_model']}")
    print(f"  beta            : {manifest['beta']}")
    print(f"  save policy as  : {manifest['output_model']}")
    print(f"then serve it and run round {m + 1}")
    return _outcome(len(sets), meta["failed_questions"])


def cmd_verify(args, cfg: PipelineConfig) -> int:
    digest = cfg.digest()
    problems = 0
    for name in args.files:
        path = Path(name)
        issues = []
        if path.name == "manifest.json":
            manifest = json.loads(path.read_text(encoding="utf-8"))
            if manifest_digest(manifest) != manifest.get("digest"):
                issues.append("manifest digest does not match its content")
            if manifest.get("config_digest") != digest:
                issues.append("config digest differs from the current config")
        else:
            meta = read_sidecar(path)
            if meta is None:
                issues.append("no .meta.json sidecar")
            else:
                if meta["config_digest"] != digest:
                    issues.append("config digest differs from the current config")
                if meta["file_sha256"] != file_digest(path):
                    issues.append("file content changed since it was written")
                if meta["kind"] == "traces":
                    for obj in read_jsonl(path):
                        t = EpisodeTrace.from_dict(obj)
                        if t.ok and rescore(t) != t.reward:
                            issues.append(f"trace {t.question_id}: stored reward differs from recomputed reward")
        status = "ok" if not issues else "FAILED"
        print(f"{status}: {path}")
        for issue in issues:
            print(f"  - {issue}")
        problems += bool(issues)
    return EXIT_FATAL if problems else EXIT_OK


def cmd_cache(args, cfg: PipelineConfig) -> int:
    cache = ResponseCache(cfg.cache_dir)
    if args.action == "stats":
        s = cache.stats()
        print(f"{s['entries']} entries, {s['bytes']} bytes in {s['root']}")
    else:
        print(f"removed {cache.clear()} entries from {cache.root}")
    return EXIT_OK


# parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decomprag", description="Decompose multi-hop questions, answer them step by step over retrieved passages, and build SFT and DPO data.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="pipeline config (YAML or JSON)")
    p.add_argument("--cache-dir", help="response cache root (overrides config)")
    p.add_argument("--concurrency", type=int, help="global bound on in-flight requests")
    p.add_argument("--seed", type=int, help="seed for dataset quota sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_index(sp):
        sp.add_argument("--index", help="index directory (default: config index_dir)")
        return sp

    def with_dataset(sp, required=True):
        sp.add_argument("--dataset", action="append", required=required, metavar="[TAG=]PATH",
                        help="dataset file; repeatable")
        sp.add_argument("--limit", type=int, help="keep the first N questions per file")
        return sp

    sp = with_index(sub.add_parser("ingest", help="index a JSON-lines passage corpus"))
    sp.add_argument("corpus")
    sp.set_defaults(func=cmd_ingest)

    sp = with_dataset(with_index(sub.add_parser("run", help="decompose, answer and score each question")))
    sp.add_argument("--out", required=True, help="trace JSON-lines output")
    sp.set_defaults(func=cmd_run)

    sp = with_dataset(with_index(sub.add_parser("sample", help="sample and score N decompositions per question")))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, help="samples per question (default: config n_samples)")
    sp.add_argument("--sft-only", action="store_true", help="allow N=1 (SFT data only)")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("build-sft", help="rejection-sampling SFT dataset from candidates")
    sp.add_argument("--candidates", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--keep-all", action="store_true", help="keep every candidate with u >= 0.5")
    sp.set_defaults(func=cmd_build_sft)

    sp = sub.add_parser("build-prefs", help="best/worst-of-N preference pairs from candidates")
    sp.add_argument("--candidates", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--round", type=int, required=True)
    sp.set_defaults(func=cmd_build_prefs)

    sp = with_dataset(with_index(sub.add_parser("recall", help="passage-level answer recall of traces")))
    sp.add_argument("--traces", required=True)
    sp.add_argument("--mode", choices=[SINGLE_QUERY, DECOMPOSED_UNION], default=DECOMPOSED_UNION)
    sp.add_argument("--json", action="store_true", help="also print the report as JSON")
    sp.set_defaults(func=cmd_recall)

    sp = sub.add_parser("loss-check", help="evaluate SFT/DPO losses on scored log-probabilities")
    sp.add_argument("--pairs", required=True, help="JSON-lines of pair log-probabilities")
    sp.add_argument("--sft", help="JSON-lines of SFT target log-probabilities")
    sp.add_argument("--manifest", help="round manifest (supplies beta and round)")
    sp.add_argument("--beta", type=float)
    sp.set_defaults(func=cmd_loss_check)

    sp = with_dataset(with_index(sub.add_parser("round", help="one iterative DPO data round")))
    sp.add_argument("round", type=int)
    sp.set_defaults(func=cmd_round)

    sp = sub.add_parser("verify", help="check output files against the current config")
    sp.add_argument("files", nargs="+")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("cache", help="inspect or clear the response cache")
    sp.add_argument("action", choices=["stats", "clear"])
    sp.set_defaults(func=cmd_cache)
    return p


FATAL_ERRORS = (
    AuthError,
    BackendError,
    CacheCorruptionError,
    CLIError,
    ConfigError,
    CorpusError,
    DatasetError,
    JSONLError,
    MissingPredecessorError,
    ObjectiveError,
    FileNotFoundError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except Timeout as err:
        print(f"error: another command holds the lock {err.lock_file}", file=sys.stderr)
    except FATAL_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
    return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
