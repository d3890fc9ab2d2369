"""End-to-end recall, rank and fuse pipeline, plus the training driver."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import KeywordVocab, KnowledgeBase, MentionRecord
from .encoder import EncoderConfig, Vocabulary
from .fusion import FusionConfig, NormalizationResult, ScoredCandidate, score_candidates, select, sort_candidates
from .kar import KarModel, KarTrainConfig, kar_scores, make_training_pairs, train_kar
from .mtcg import KbIndex, MtcgModel, MtcgTrainConfig, class_probs, embed_corpus, train_mtcg
from .negatives import make_sampler

log = logging.getLogger(__name__)

MODES = ("full", "mtcg", "kar")


class EmptyKnowledgeBaseError(ValueError):
    pass


@dataclass
class Pipeline:
    mtcg: MtcgModel
    kb: KnowledgeBase
    index: KbIndex
    kar: KarModel | None = None
    fusion: FusionConfig | None = None

    def __post_init__(self):
        if self.fusion is None:
            self.fusion = FusionConfig()
        if len(self.kb) == 0 or not self.index.codes:
            raise EmptyKnowledgeBaseError("knowledge base is empty")
        if self.index.codes != self.kb.codes:
            raise ValueError("knowledge base does not match the embedding index")

    def normalize_batch(self, mentions: Sequence[str], mode: str = "full") -> list[NormalizationResult]:
        """Normalize many mentions.

        ``mode`` selects the ranking: ``full`` fuses recall and ranker scores,
        ``mtcg`` ranks by recall distance only, ``kar`` by ranker score only.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode != "mtcg" and self.kar is None:
            raise ValueError(f"mode {mode!r} needs a trained ranker")
        if not mentions:
            return []
        pooled, cls = embed_corpus(self.mtcg, mentions, with_cls=True)
        lists = self.index.recall(pooled, self.fusion.k_c)
        xs = [int(np.argmax(p)) + 1 for p in class_probs(self.mtcg, cls)]
        if mode == "mtcg":
            sr_all = [[0.0] * len(cl.codes) for cl in lists]
        else:
            inputs, spans = [], []
            for m, cl in zip(mentions, lists):
                start = len(inputs)
                inputs += [self.kar.build(m, self.kb.text(c)) for c in cl.codes]
                spans.append((start, len(inputs)))
            flat = kar_scores(self.kar, inputs)
            sr_all = [flat[a:b].tolist() for a, b in spans]
        results = []
        for i, (m, cl, x, sr) in enumerate(zip(mentions, lists, xs, sr_all)):
            cands = score_candidates(cl.codes, cl.distances, sr)
            if mode == "mtcg":
                cands = sort_candidates([ScoredCandidate(c.code, c.d, c.sc, c.sr, c.sc) for c in cands])
            elif mode == "kar":
                cands = sorted(cands, key=lambda c: (-c.sr, c.code))
            selected, flagged = select(cands, x, self.fusion.theta)
            results.append(NormalizationResult(m, x, selected, cands, flagged or (x == 3 and len(cands) < 3), i))
        return results

    def normalize(self, mention: str, mode: str = "full") -> NormalizationResult:
        return self.normalize_batch([mention], mode)[0]

    def save(self, model_dir: str | Path) -> None:
        model_dir = Path(model_dir)
        self.mtcg.save(model_dir / "mtcg")
        self.index.save(model_dir / "kb_index")
        if self.kar is not None:
            self.kar.save(model_dir / "kar")

    @classmethod
    def load(cls, model_dir: str | Path, kb: KnowledgeBase, fusion: FusionConfig | None = None) -> "Pipeline":
        model_dir = Path(model_dir)
        if len(kb) == 0:
            raise EmptyKnowledgeBaseError("knowledge base is empty")
        mtcg = MtcgModel.load(model_dir / "mtcg")
        index = KbIndex.load(model_dir / "kb_index", kb)
        kar = KarModel.load(model_dir / "kar") if (model_dir / "kar").exists() else None
        return cls(mtcg, kb, index, kar, fusion)


def build_vocab(kb: KnowledgeBase, corpus: Sequence[MentionRecord]) -> Vocabulary:
    return Vocabulary.from_texts([*kb.texts, *(r.text for r in corpus)])


def fit_mtcg(
    kb: KnowledgeBase,
    train: Sequence[MentionRecord],
    enc: dict,
    cfg: MtcgTrainConfig,
    strategy: str = "online",
    keywords: KeywordVocab | None = None,
    vocab: Vocabulary | None = None,
    on_epoch=None,
):
    vocab = vocab or build_vocab(kb, train)
    model = MtcgModel.init(EncoderConfig(vocab_size=len(vocab), **enc), vocab, seed=cfg.seed)
    sampler = make_sampler(strategy, kb, train, cfg.k_n, cfg.seed, keywords)
    history, negatives = train_mtcg(
        model, train, kb, cfg, sampler, online=(strategy == "online"), on_epoch=on_epoch
    )
    return model, history, negatives


def fit_kar(
    mtcg: MtcgModel,
    kb: KnowledgeBase,
    train: Sequence[MentionRecord],
    keywords: KeywordVocab,
    enc: dict,
    cfg: KarTrainConfig,
    k: int = 10,
    index: KbIndex | None = None,
    warm_start: bool = False,
):
    """Train a ranker on the generator's top-``k`` pairs.

    ``warm_start`` copies the generator's encoder weights into the ranker
    (encoder configs must match) instead of a random initialization.
    """
    pairs = make_training_pairs(mtcg, train, kb, k=k, append_missed=cfg.append_missed, index=index)
    cfg_enc = EncoderConfig(vocab_size=len(mtcg.vocab), **enc)
    if warm_start and cfg_enc != mtcg.cfg:
        raise ValueError("warm start needs identical encoder configs")
    encoder = {n: v for n, v in mtcg.params.items() if not n.startswith(mtcg.head_prefix)} if warm_start else None
    model = KarModel.init(cfg_enc, mtcg.vocab, keywords, seed=cfg.seed + 1, encoder=encoder)
    history = train_kar(model, pairs, train, kb, cfg)
    return model, history, pairs
