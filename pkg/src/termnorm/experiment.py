"""Desk-scale comparison runs on the synthetic corpus.

One seed trains a random-negative and an online-mined candidate generator,
a ranker on top of the online model, and scores everything against the
string baselines on the held-out fold.
"""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import asdict, dataclass, field

from .evaluation import (
    accuracy,
    delimiter_implication,
    edit_distance_baseline,
    implication_accuracy,
    majority_implication,
    recall_at_k,
    result_accuracy,
    tfidf_baseline,
)
from .kar import KarTrainConfig
from .mtcg import KbIndex, MtcgTrainConfig, embed_corpus, predict_implication
from .pipeline import Pipeline, build_vocab, fit_kar, fit_mtcg
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)

RECALL_KS = (1, 2, 5, 10)


@dataclass
class ExperimentConfig:
    encoder: dict = field(default_factory=lambda: dict(n_layers=2, d=64, n_heads=4, d_ff=128, max_len=64))
    epochs: int = 10
    lr: float = 1e-3
    kar_lr: float = 1e-3
    kar_epochs: int = 20
    kar_pair_depth: int = 5  # generator candidates per training mention fed to the ranker
    warm_start: bool = True
    batch_size: int = 32
    k_c: int = 10


@dataclass
class SeedResult:
    seed: int
    recall_random: dict
    recall_online: dict
    total_full: float
    total_mtcg: float
    multi_full: float | None
    multi_mtcg: float | None
    total_tfidf: float
    total_edit: float
    implication_model: float
    implication_majority: float
    implication_delimiter: float
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def _recall(model, kb, test, k_c):
    index = KbIndex.build(model, kb)
    lists = index.recall(embed_corpus(model, [r.text for r in test]), k_c)
    return recall_at_k([cl.codes for cl in lists], test, RECALL_KS)


def run_seed(seed: int, cfg: ExperimentConfig | None = None, spec: SyntheticSpec | None = None) -> SeedResult:
    cfg = cfg or ExperimentConfig()
    t0 = time.perf_counter()
    spec = spec or SyntheticSpec(seed=seed)
    data = generate_synthetic(spec)
    kb, train, test = data.kb, data.train, data.test
    mentions = [r.text for r in test]
    vocab = build_vocab(kb, train)
    mcfg = MtcgTrainConfig(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed)

    random_model, _, _ = fit_mtcg(kb, train, cfg.encoder, mcfg, "random", data.keywords, vocab)
    recall_random = _recall(random_model, kb, test, cfg.k_c)
    log.info("seed %d random recall %s", seed, recall_random)

    online_model, _, _ = fit_mtcg(kb, train, cfg.encoder, mcfg, "online", data.keywords, vocab)
    index = KbIndex.build(online_model, kb)
    recall_online = _recall(online_model, kb, test, cfg.k_c)
    log.info("seed %d online recall %s", seed, recall_online)

    kcfg = KarTrainConfig(lr=cfg.kar_lr, epochs=cfg.kar_epochs, batch_size=cfg.batch_size, seed=seed)
    kar, _, _ = fit_kar(online_model, kb, train, data.keywords, cfg.encoder, kcfg, k=cfg.kar_pair_depth, index=index,
                        warm_start=cfg.warm_start)
    pipe = Pipeline(online_model, kb, index, kar)
    full = result_accuracy(pipe.normalize_batch(mentions, "full"), test)
    mtcg_only = result_accuracy(pipe.normalize_batch(mentions, "mtcg"), test)
    log.info("seed %d full %s / mtcg-only %s", seed, full, mtcg_only)

    tfidf = accuracy(tfidf_baseline(kb, mentions), test)
    edit = accuracy(edit_distance_baseline(kb, mentions), test)
    impl = implication_accuracy(predict_implication(online_model, mentions), test)
    major = implication_accuracy(majority_implication(train, len(test)), test)
    delim = implication_accuracy(delimiter_implication(mentions), test)
    return SeedResult(
        seed=seed,
        recall_random=recall_random,
        recall_online=recall_online,
        total_full=full.total,
        total_mtcg=mtcg_only.total,
        multi_full=full.multi,
        multi_mtcg=mtcg_only.multi,
        total_tfidf=tfidf.total,
        total_edit=edit.total,
        implication_model=impl.total,
        implication_majority=major.total,
        implication_delimiter=delim.total,
        seconds=time.perf_counter() - t0,
    )


def median_summary(results: list[SeedResult]) -> dict:
    """Per-field median across seeds (recall dicts are reduced per k)."""

    def med(values):
        values = [v for v in values if v is not None]
        return statistics.median(values) if values else None

    out = {"seeds": [r.seed for r in results]}
    for name in ("recall_random", "recall_online"):
        out[name] = {k: med([getattr(r, name)[k] for r in results]) for k in RECALL_KS}
    for name in SeedResult.__dataclass_fields__:
        if name not in ("seed", "recall_random", "recall_online"):
            out[name] = med([getattr(r, name) for r in results])
    return out
