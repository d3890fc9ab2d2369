"""Negative-sample assignment strategies for training the candidate generator.

Every strategy returns, per mention, ``k_n`` knowledge-base codes that are not
among that mention's golds. When the eligible pool is too small the list is
topped up from seeded random sampling (or shortened when the KB itself is too
small) and the mention id is recorded in ``flagged``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import KeywordVocab, KnowledgeBase, MentionRecord, TfidfModel, category_of, tfidf_fit
from .mtcg import MtcgModel, code_ranks, embed_corpus, pairwise_distances, ranked

STRATEGIES = ("random", "tfidf", "tree", "keyword", "online")


@dataclass
class NegativeAssignment:
    negatives: dict[int, list[str]]
    flagged: set[int] = field(default_factory=set)

    def to_jsonl(self) -> str:
        lines = []
        for i in sorted(self.negatives):
            rec = {"mention": i, "negatives": self.negatives[i]}
            if i in self.flagged:
                rec["flagged"] = True
            lines.append(json.dumps(rec, ensure_ascii=False))
        return "".join(line + "\n" for line in lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NegativeAssignment":
        negatives, flagged = {}, set()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            negatives[int(rec["mention"])] = list(rec["negatives"])
            if rec.get("flagged"):
                flagged.add(int(rec["mention"]))
        return cls(negatives, flagged)


def _golds(corpus: Sequence[MentionRecord]) -> list[set[str]]:
    return [set(r.codes) for r in corpus]


def _draw(pool: list[str], k: int, rng: np.random.Generator) -> list[str]:
    if k >= len(pool):
        return [pool[i] for i in rng.permutation(len(pool))]
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]


def _top_up(chosen: list[str], gold: set[str], kb: KnowledgeBase, k_n: int, rng) -> list[str]:
    taken = set(chosen)
    rest = [c for c in kb.codes if c not in gold and c not in taken]
    return chosen + _draw(rest, k_n - len(chosen), rng)


def sample_random(
    kb: KnowledgeBase, golds: Sequence[set[str]], k_n: int, seed: int = 0
) -> NegativeAssignment:
    rng = np.random.default_rng(seed)
    out = NegativeAssignment({})
    for i, gold in enumerate(golds):
        pool = [c for c in kb.codes if c not in gold]
        out.negatives[i] = _draw(pool, k_n, rng)
        if len(pool) < k_n:
            out.flagged.add(i)
    return out


def sample_tfidf(
    kb: KnowledgeBase,
    mentions: Sequence[str],
    golds: Sequence[set[str]],
    k_n: int,
    model: TfidfModel | None = None,
) -> NegativeAssignment:
    """Highest tf-idf cosine non-gold terminologies; ties by ascending code."""
    model = model or tfidf_fit(kb)
    ranks = code_ranks(kb.codes)
    out = NegativeAssignment({})
    for i, (text, gold) in enumerate(zip(mentions, golds)):
        scores = np.asarray(model.scores(text))
        order = ranked(-scores, ranks)
        picks = [kb.codes[j] for j in order if kb.codes[j] not in gold][:k_n]
        out.negatives[i] = picks
        if len(picks) < k_n:
            out.flagged.add(i)
    return out


def sample_tree_coding(
    kb: KnowledgeBase, golds: Sequence[set[str]], k_n: int, seed: int = 0
) -> NegativeAssignment:
    """Uniform draws among non-gold codes sharing a gold's category prefix."""
    rng = np.random.default_rng(seed)
    out = NegativeAssignment({})
    for i, gold in enumerate(golds):
        cats = sorted({category_of(c) for c in gold})
        pool = [c for cat in cats for c in kb.tree.get(cat, []) if c not in gold]
        chosen = _draw(pool, k_n, rng)
        if len(chosen) < k_n:
            out.flagged.add(i)
            chosen = _top_up(chosen, gold, kb, k_n, rng)
        out.negatives[i] = chosen
    return out


def keyword_variants(text: str, vocab: KeywordVocab) -> list[tuple[str, tuple[int, int, str]]]:
    """Texts made by swapping one matched keyword for another of the same kind.

    Returns ``(variant, (start, end, replacement))`` in deterministic order.
    """
    from .kar import match_text

    out = []
    for start, end, kind in match_text(text, vocab):
        original = text[start:end]
        for term in vocab.terms(kind):
            if term != original:
                out.append((text[:start] + term + text[end:], (start, end, term)))
    return out


def sample_keyword_replace(
    kb: KnowledgeBase, golds: Sequence[set[str]], vocab: KeywordVocab, k_n: int, seed: int = 0
) -> NegativeAssignment:
    rng = np.random.default_rng(seed)
    by_text = {t.text: t.code for t in kb.terms}
    out = NegativeAssignment({})
    for i, gold in enumerate(golds):
        pool: list[str] = []
        for g in sorted(gold):
            for variant, _ in keyword_variants(kb.text(g), vocab):
                code = by_text.get(variant)
                if code is not None and code not in gold and code not in pool:
                    pool.append(code)
        chosen = _draw(pool, k_n, rng)
        if len(chosen) < k_n:
            out.flagged.add(i)
            chosen = _top_up(chosen, gold, kb, k_n, rng)
        out.negatives[i] = chosen
    return out


def nearest_non_gold(
    distances: np.ndarray, codes: Sequence[str], golds: Sequence[set[str]], k_n: int
) -> NegativeAssignment:
    ranks = code_ranks(codes)
    out = NegativeAssignment({})
    for i, (row, gold) in enumerate(zip(distances, golds)):
        picks = []
        for j in ranked(row, ranks):
            if len(picks) == k_n:
                break
            if codes[j] not in gold:
                picks.append(codes[j])
        out.negatives[i] = picks
        if len(picks) < k_n:
            out.flagged.add(i)
    return out


def sample_online(
    model: MtcgModel, corpus: Sequence[MentionRecord], kb: KnowledgeBase, k_n: int
) -> NegativeAssignment:
    """Hard negatives: the ``k_n`` KB entries nearest each mention that are not golds."""
    V_m = embed_corpus(model, [r.text for r in corpus])
    V_kb = embed_corpus(model, kb.texts)
    return nearest_non_gold(pairwise_distances(V_m, V_kb), kb.codes, _golds(corpus), k_n)


def make_sampler(
    strategy: str,
    kb: KnowledgeBase,
    corpus: Sequence[MentionRecord],
    k_n: int,
    seed: int = 0,
    keywords: KeywordVocab | None = None,
):
    """Initial-assignment callable for :func:`termnorm.mtcg.train_mtcg`.

    Online mining starts from a random assignment.
    """
    golds = _golds(corpus)
    if strategy in ("random", "online"):
        return lambda model: sample_random(kb, golds, k_n, seed)
    if strategy == "tfidf":
        return lambda model: sample_tfidf(kb, [r.text for r in corpus], golds, k_n)
    if strategy == "tree":
        return lambda model: sample_tree_coding(kb, golds, k_n, seed)
    if strategy == "keyword":
        if keywords is None:
            raise ValueError("keyword strategy needs a keyword vocabulary")
        return lambda model: sample_keyword_replace(kb, golds, keywords, k_n, seed)
    raise ValueError(f"unknown negative strategy {strategy!r}; choose from {STRATEGIES}")
