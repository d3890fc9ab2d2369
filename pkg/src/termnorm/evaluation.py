"""Accuracy, Recall@k, k-fold splits, string baselines and throughput."""
from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .corpus import KnowledgeBase, MentionRecord, TfidfModel, edit_distance, implication_class, tfidf_fit
from .fusion import NormalizationResult
from .synthetic import CONNECTOR


@dataclass
class Metrics:
    uni: float
    multi: float | None
    total: float
    n_uni: int
    n_multi: int
    correct_uni: int
    correct_multi: int

    def to_dict(self) -> dict:
        return asdict(self)


def _pct(num: int, den: int) -> float | None:
    return 100.0 * num / den if den else None


def accuracy(selected: Sequence[Sequence[str]], gold: Sequence[MentionRecord]) -> Metrics:
    """Exact-set accuracy, stratified by gold-set size (1 vs more)."""
    if len(selected) != len(gold):
        raise ValueError(f"{len(selected)} predictions for {len(gold)} gold records")
    cu = cm = nu = nm = 0
    for pred, rec in zip(selected, gold):
        ok = set(pred) == set(rec.codes) and len(pred) == len(set(pred))
        if len(rec.codes) == 1:
            nu += 1
            cu += ok
        else:
            nm += 1
            cm += ok
    return Metrics(_pct(cu, nu) or 0.0, _pct(cm, nm), _pct(cu + cm, nu + nm) or 0.0, nu, nm, cu, cm)


def result_accuracy(results: Sequence[NormalizationResult], gold: Sequence[MentionRecord]) -> Metrics:
    for r, g in zip(results, gold):
        if r.mention != g.text:
            raise ValueError(f"result for {r.mention!r} is aligned with gold mention {g.text!r}")
    return accuracy([r.selected for r in results], gold)


def recall_at_k(
    candidates: Sequence[Sequence[str]], gold: Sequence[MentionRecord], ks: Sequence[int]
) -> dict[int, float]:
    """Fraction of mentions whose every gold code is within the top k."""
    if len(candidates) != len(gold):
        raise ValueError("candidate lists and gold records differ in length")
    kmax = max(ks)
    if any(len(c) < kmax for c in candidates):
        raise ValueError(f"every candidate list needs at least {kmax} entries")
    out = {}
    for k in sorted(ks):
        hits = sum(set(rec.codes) <= set(c[:k]) for c, rec in zip(candidates, gold))
        out[k] = hits / len(gold) if gold else 0.0
    return out


def recall_order(result: NormalizationResult) -> list[str]:
    """Candidate codes in recall order (ascending distance, then code)."""
    return [c.code for c in sorted(result.candidates, key=lambda c: (c.d, c.code))]


def results_from_gold(gold: Sequence[MentionRecord], kb: KnowledgeBase, k_c: int = 10) -> list[NormalizationResult]:
    """Results that reproduce the gold file; candidates are golds then KB order."""
    from .fusion import ScoredCandidate

    out = []
    for i, rec in enumerate(gold):
        codes = list(rec.codes) + [c for c in kb.codes if c not in rec.codes]
        cands = [ScoredCandidate(c, float(j), 1.0, 1.0, 1.0) for j, c in enumerate(codes[:max(k_c, len(rec.codes))])]
        out.append(NormalizationResult(rec.text, implication_class(len(rec.codes)), list(rec.codes), cands, id=i))
    return out


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldSplit:
    folds: list[list[int]]
    seed: int

    def splits(self) -> Iterator[tuple[list[int], list[int]]]:
        """(train indices, validation indices) per fold."""
        for i, val in enumerate(self.folds):
            train = sorted(j for f, fold in enumerate(self.folds) if f != i for j in fold)
            yield train, sorted(val)


def kfold(n: int, k: int = 5, seed: int = 0) -> FoldSplit:
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    folds = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(int(idx))
    return FoldSplit([sorted(f) for f in folds], seed)


# ---------------------------------------------------------------------------
# baselines


def tfidf_baseline(kb: KnowledgeBase, mentions: Sequence[str], model: TfidfModel | None = None) -> list[list[str]]:
    """Top-1 terminology by character tf-idf cosine (ties by code)."""
    model = model or tfidf_fit(kb)
    out = []
    for m in mentions:
        scores = model.scores(m)
        best = min(range(len(kb)), key=lambda j: (-scores[j], kb.codes[j]))
        out.append([kb.codes[best]])
    return out


def edit_distance_baseline(kb: KnowledgeBase, mentions: Sequence[str]) -> list[list[str]]:
    """Top-1 terminology by Levenshtein distance (ties by code)."""
    out = []
    for m in mentions:
        best = min(range(len(kb)), key=lambda j: (edit_distance(m, kb.texts[j]), kb.codes[j]))
        out.append([kb.codes[best]])
    return out


def delimiter_implication(mentions: Sequence[str]) -> list[int]:
    """Implication class guessed as ``1 + number of '+' separators`` (capped at 3)."""
    return [implication_class(1 + m.count(CONNECTOR)) for m in mentions]


def majority_implication(train: Sequence[MentionRecord], n: int) -> list[int]:
    counts = np.bincount([implication_class(r.implication) for r in train], minlength=4)
    return [int(np.argmax(counts))] * n


def implication_accuracy(pred: Sequence[int], gold: Sequence[MentionRecord]) -> Metrics:
    """Implication-class accuracy, stratified like :func:`accuracy`."""
    cu = cm = nu = nm = 0
    for p, rec in zip(pred, gold):
        ok = p == implication_class(rec.implication)
        if rec.implication == 1:
            nu, cu = nu + 1, cu + ok
        else:
            nm, cm = nm + 1, cm + ok
    return Metrics(_pct(cu, nu) or 0.0, _pct(cm, nm), _pct(cu + cm, nu + nm) or 0.0, nu, nm, cu, cm)


# ---------------------------------------------------------------------------
# throughput


@dataclass
class BenchReport:
    mentions_per_sec: float
    mentions_per_sec_threaded: float
    threads: int
    wall_time: float
    n_mentions: int
    repetitions: int
    n_layers: int
    d: int
    kb_size: int

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(fn: Callable[[], object]) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def bench_throughput(
    normalize: Callable[[Sequence[str]], object],
    mentions: Sequence[str],
    warmup: int = 1,
    repetitions: int = 3,
    threads: int = 2,
    fingerprint: dict | None = None,
) -> BenchReport:
    """Median mentions/second over ``repetitions`` after ``warmup`` runs.

    The threaded figure splits the mentions into ``threads`` chunks
    normalized concurrently.
    """
    if not mentions:
        raise ValueError("no mentions to benchmark")
    mentions = list(mentions)
    for _ in range(warmup):
        normalize(mentions)
    t0 = time.perf_counter()
    single = [_timed(lambda: normalize(mentions)) for _ in range(repetitions)]
    chunks = [mentions[i::threads] for i in range(threads)]

    def threaded():
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(normalize, [c for c in chunks if c]))

    multi = [_timed(threaded) for _ in range(repetitions)]
    wall = time.perf_counter() - t0
    fp = fingerprint or {}
    return BenchReport(
        mentions_per_sec=len(mentions) / statistics.median(single),
        mentions_per_sec_threaded=len(mentions) / statistics.median(multi),
        threads=threads,
        wall_time=wall,
        n_mentions=len(mentions),
        repetitions=repetitions,
        n_layers=int(fp.get("n_layers", 0)),
        d=int(fp.get("d", 0)),
        kb_size=int(fp.get("kb_size", 0)),
    )
