"""Command-line entry point: data generation, training, normalization, evaluation."""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .corpus import (
    KnowledgeBase,
    MentionRecord,
    load_corpus,
    load_keywords,
    load_kb,
    save_corpus,
)
from .encoder import EmptyInputError
from .evaluation import (
    accuracy,
    bench_throughput,
    delimiter_implication,
    edit_distance_baseline,
    implication_accuracy,
    kfold,
    majority_implication,
    recall_at_k,
    recall_order,
    result_accuracy,
    tfidf_baseline,
)
from .fusion import NormalizationResult
from .kar import save_pairs
from .mtcg import KbIndex, MtcgModel
from .negatives import STRATEGIES, make_sampler, sample_online
from .pipeline import MODES, Pipeline, build_vocab, fit_kar, fit_mtcg
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger("termnorm")

DEFAULT_KS = "1,2,5,10"


def _dump_json(obj, path: Path | None) -> None:
    text = json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _write_lines(lines: Sequence[str], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_mentions(path: str | Path) -> list[str]:
    """Mentions from a text file (one per line) or a corpus JSON-lines file."""
    path = Path(path)
    lines = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    lines = [line for line in lines if line]
    if not lines:
        raise EmptyInputError(f"{path}: no mentions")
    if lines[0].startswith("{"):
        return [json.loads(line)["mention"] for line in lines]
    return lines


def _load_results(path: str | Path) -> list[NormalizationResult]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [NormalizationResult.from_json(line) for line in lines if line.strip()]


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_seed(args.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig) -> None:
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None or not args.spec:
        spec.seed = cfg.seed
    data = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.kb.save(out / "kb.tsv")
    save_corpus(data.train, out / "train.jsonl")
    save_corpus(data.test, out / "test.jsonl")
    data.keywords.save(out / "keywords.tsv")
    (out / "spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    log.info("wrote %d terminologies, %d train and %d test mentions to %s",
             len(data.kb), len(data.train), len(data.test), out)


def cmd_train_mtcg(args, cfg: RunConfig) -> None:
    kb = load_kb(args.kb)
    train = load_corpus(args.train, kb)
    strategy = args.neg_strategy or cfg.neg_strategy
    keywords = load_keywords(args.keywords) if args.keywords else None
    model, history, negatives = fit_mtcg(kb, train, cfg.encoder, cfg.mtcg, strategy, keywords)
    model_dir = Path(args.model_dir)
    model.save(model_dir / "mtcg", {"neg_strategy": strategy, "train": cfg.mtcg.__dict__})
    KbIndex.build(model, kb).save(model_dir / "kb_index")
    _write_lines([json.dumps(h.__dict__, sort_keys=True) for h in history], model_dir / "mtcg_history.jsonl")
    (model_dir / "config.json").write_text(cfg.to_json(), encoding="utf-8")


def cmd_mine_negatives(args, cfg: RunConfig) -> None:
    kb = load_kb(args.kb)
    train = load_corpus(args.train, kb)
    strategy = args.strategy
    k_n = cfg.mtcg.k_n
    if strategy == "online":
        model = MtcgModel.load(Path(args.model_dir) / "mtcg")
        assignment = sample_online(model, train, kb, k_n)
    else:
        keywords = load_keywords(args.keywords) if args.keywords else None
        assignment = make_sampler(strategy, kb, train, k_n, cfg.seed, keywords)(None)
    if assignment.flagged:
        log.warning("%d mentions have fewer than %d eligible negatives", len(assignment.flagged), k_n)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    assignment.save(args.out)


def cmd_train_kar(args, cfg: RunConfig) -> None:
    kb = load_kb(args.kb)
    train = load_corpus(args.train, kb)
    keywords = load_keywords(args.keywords)
    model_dir = Path(args.model_dir)
    mtcg = MtcgModel.load(model_dir / "mtcg")
    index = KbIndex.load(model_dir / "kb_index", kb)
    kar, history, pairs = fit_kar(
        mtcg, kb, train, keywords, cfg.encoder, cfg.kar, k=cfg.fusion.k_c, index=index,
        warm_start=cfg.kar_warm_start,
    )
    kar.save(model_dir / "kar", {"train": cfg.kar.__dict__})
    save_pairs(pairs, model_dir / "kar_pairs.jsonl")
    _write_lines([json.dumps({"epoch": i, "loss": v}) for i, v in enumerate(history)], model_dir / "kar_history.jsonl")


def _pipeline(args, cfg: RunConfig, kb: KnowledgeBase) -> Pipeline:
    return Pipeline.load(args.model_dir, kb, cfg.fusion)


def cmd_normalize(args, cfg: RunConfig) -> None:
    kb = load_kb(args.kb)
    mentions = read_mentions(args.input)
    pipe = _pipeline(args, cfg, kb)
    mode = args.mode or ("full" if pipe.kar is not None else "mtcg")
    results = pipe.normalize_batch(mentions, mode)
    n_flag = sum(r.flagged for r in results)
    if n_flag:
        log.warning("%d mentions flagged (fewer candidates than the rule needs)", n_flag)
    _write_lines([r.to_json() for r in results], Path(args.out))


def cmd_eval(args, cfg: RunConfig) -> None:
    kb = load_kb(args.kb)
    gold = load_corpus(args.gold, kb)
    results = _load_results(args.results)
    if len(results) != len(gold):
        raise ValueError(f"{len(results)} results for {len(gold)} gold mentions")
    ks = [int(k) for k in args.ks.split(",")]
    report = {"accuracy": result_accuracy(results, gold).to_dict()}
    lists = [recall_order(r) for r in results]
    if min(len(c) for c in lists) >= max(ks):
        report["recall_at_k"] = {str(k): v for k, v in recall_at_k(lists, gold, ks).items()}
    else:
        log.warning("candidate lists shorter than %d; Recall@k skipped", max(ks))
    report["implication"] = implication_accuracy([r.x for r in results], gold).to_dict()
    if args.baselines:
        mentions = [g.text for g in gold]
        base = {
            "tfidf": accuracy(tfidf_baseline(kb, mentions), gold).to_dict(),
            "edit_distance": accuracy(edit_distance_baseline(kb, mentions), gold).to_dict(),
            "implication_delimiter": implication_accuracy(delimiter_implication(mentions), gold).to_dict(),
        }
        if args.train:
            train = load_corpus(args.train, kb)
            base["implication_majority"] = implication_accuracy(
                majority_implication(train, len(gold)), gold).to_dict()
        report["baselines"] = base
    _dump_json(report, Path(args.out) if args.out else None)


def cmd_bench(args, cfg: RunConfig) -> None:
    kb = load_kb(args.kb)
    mentions = read_mentions(args.input)
    pipe = _pipeline(args, cfg, kb)
    mode = args.mode or ("full" if pipe.kar is not None else "mtcg")
    fp = {"n_layers": pipe.mtcg.cfg.n_layers, "d": pipe.mtcg.cfg.d, "kb_size": len(kb)}
    report = bench_throughput(lambda ms: pipe.normalize_batch(ms, mode), mentions,
                              args.warmup, args.repetitions, args.threads, fp)
    _dump_json(report.to_dict(), Path(args.out) if args.out else None)


def cmd_cv(args, cfg: RunConfig) -> None:
    kb = load_kb(args.kb)
    corpus = load_corpus(args.train, kb)
    keywords = load_keywords(args.keywords)
    split = kfold(len(corpus), args.folds, cfg.seed)
    vocab = build_vocab(kb, corpus)
    folds = []
    for f, (tr, va) in enumerate(split.splits()):
        train = [corpus[i] for i in tr]
        val = [corpus[i] for i in va]
        mtcg, _, _ = fit_mtcg(kb, train, cfg.encoder, cfg.mtcg, cfg.neg_strategy, keywords, vocab)
        index = KbIndex.build(mtcg, kb)
        kar = None
        if not args.no_kar:
            kar, _, _ = fit_kar(mtcg, kb, train, keywords, cfg.encoder, cfg.kar, k=cfg.fusion.k_c,
                                index=index, warm_start=cfg.kar_warm_start)
        pipe = Pipeline(mtcg, kb, index, kar, cfg.fusion)
        metrics = result_accuracy(pipe.normalize_batch([r.text for r in val], "mtcg" if kar is None else "full"), val)
        log.info("fold %d: %s", f, metrics)
        folds.append(metrics.to_dict())

    def summary(key):
        vals = [m[key] for m in folds if m[key] is not None]
        if not vals:
            return None
        return {"mean": statistics.fmean(vals), "stdev": statistics.stdev(vals) if len(vals) > 1 else 0.0}

    _dump_json({"folds": folds, "seed": cfg.seed, **{k: summary(k) for k in ("uni", "multi", "total")}},
               Path(args.out) if args.out else None)


def cmd_compare(args, cfg: RunConfig) -> None:
    from .experiment import ExperimentConfig, median_summary, run_seed

    seeds = args.seeds if args.seeds else [cfg.seed]
    results = [run_seed(s, ExperimentConfig()) for s in seeds]
    report = {"per_seed": [r.to_dict() for r in results], "median": median_summary(results)}
    if not args.timings:
        for r in report["per_seed"]:
            r.pop("seconds")
        report["median"].pop("seconds")
    _dump_json(report, Path(args.out) if args.out else None)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="termnorm", description="Procedure-mention normalization against a terminology KB.")
    p.add_argument("--seed", type=int, default=None, help="seed for every stochastic stage (overrides the config)")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--model-dir", default="model", help="directory holding trained models (default: model)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic KB, corpus split and keyword vocabulary")
    s.add_argument("--spec", help="generator spec JSON (defaults when omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-mtcg", help="train the candidate generator and index the KB")
    s.add_argument("--kb", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--keywords", help="keyword vocabulary (needed by --neg-strategy keyword)")
    s.add_argument("--neg-strategy", choices=STRATEGIES)
    s.set_defaults(func=cmd_train_mtcg)

    s = sub.add_parser("mine-negatives", help="dump a negative-sample assignment as JSON-lines")
    s.add_argument("--kb", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--keywords")
    s.add_argument("--strategy", choices=STRATEGIES, default="online")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mine_negatives)

    s = sub.add_parser("train-kar", help="train the keyword-attentive ranker on generator candidates")
    s.add_argument("--kb", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--keywords", required=True)
    s.set_defaults(func=cmd_train_kar)

    s = sub.add_parser("normalize", help="normalize mentions to JSON-lines results")
    s.add_argument("--kb", required=True)
    s.add_argument("--input", required=True, help="mentions, one per line, or a corpus JSON-lines file")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=MODES, help="default: full when a ranker is trained, else mtcg")
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("eval", help="score results against gold codes")
    s.add_argument("--kb", required=True)
    s.add_argument("--results", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--ks", default=DEFAULT_KS, help=f"Recall@k cutoffs (default {DEFAULT_KS})")
    s.add_argument("--baselines", action="store_true", help="also score tf-idf, edit-distance and implication baselines")
    s.add_argument("--train", help="training corpus for the majority implication baseline")
    s.add_argument("--out", help="report path (default: stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="measure normalization throughput")
    s.add_argument("--kb", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--threads", type=int, default=2)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("cv", help="k-fold cross-validation over a training corpus")
    s.add_argument("--kb", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--keywords", required=True)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--no-kar", action="store_true", help="evaluate the generator alone")
    s.add_argument("--out")
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("compare", help="synthetic-corpus comparison: negatives, ranker, baselines")
    s.add_argument("--seeds", type=int, nargs="*")
    s.add_argument("--timings", action="store_true", help="include wall-clock seconds in the report")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as e:
        print(f"termnorm {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
