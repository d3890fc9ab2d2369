"""Keyword-attentive ranker: a cross-encoder over
``[CLS] [PS] [PT] mention [SEP] candidate [SEP]`` whose [PS]/[PT] rows may only
attend to procedure-site / procedure-type keyword tokens."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import SITE, TYPE, KeywordVocab, KnowledgeBase, MentionRecord, load_keywords
from .encoder import (
    CLS,
    PS,
    PT,
    SEP,
    EmptyInputError,
    EncoderConfig,
    ParamModel,
    Vocabulary,
    encode,
    init_encoder,
    length_buckets,
)
from .kernel import DTYPE, DimensionError, OptimizerState, adamw_step, backward, ffn
from .mtcg import KbIndex, MtcgModel, embed_corpus

log = logging.getLogger(__name__)

PS_POS, PT_POS = 1, 2
PREFIX_LEN = 3
PROB_EPS = 1e-12


@dataclass(frozen=True)
class KeywordSpan:
    start: int
    end: int
    kind: str


@dataclass(frozen=True)
class KarInput:
    ids: tuple[int, ...]
    segments: tuple[int, ...]
    spans: tuple[KeywordSpan, ...]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class PairExample:
    mention: int
    code: str
    label: int


def match_text(text: str, vocab: KeywordVocab) -> list[tuple[int, int, str]]:
    """Greedy left-to-right longest match, run separately for each kind.

    Returns ``(start, end, kind)`` character spans sorted by start, then kind.
    """
    spans = []
    for kind in (SITE, TYPE):
        terms = vocab.terms(kind)
        if not terms:
            continue
        lengths = sorted({len(t) for t in terms}, reverse=True)
        termset = set(terms)
        i = 0
        while i < len(text):
            for n in lengths:
                if i + n <= len(text) and text[i : i + n] in termset:
                    spans.append((i, i + n, kind))
                    i += n
                    break
            else:
                i += 1
    return sorted(spans, key=lambda s: (s[0], s[2]))


def match_keywords(chars: Sequence[str], vocab: KeywordVocab, offset: int = 0) -> list[KeywordSpan]:
    """Keyword spans over a character sequence, shifted into token coordinates."""
    return [KeywordSpan(s + offset, e + offset, k) for s, e, k in match_text("".join(chars), vocab)]


def build_input(mention: str, candidate: str, vocab: Vocabulary, keywords: KeywordVocab) -> KarInput:
    mention, candidate = mention.strip(), candidate.strip()
    if not mention or not candidate:
        raise EmptyInputError("mention and candidate must be non-empty")
    ids = [vocab.stoi[CLS], vocab.stoi[PS], vocab.stoi[PT]]
    ids += [vocab[ch] for ch in mention] + [vocab.stoi[SEP]]
    cand_offset = len(ids)
    ids += [vocab[ch] for ch in candidate] + [vocab.stoi[SEP]]
    segments = [0] * cand_offset + [1] * (len(ids) - cand_offset)
    spans = match_keywords(list(mention), keywords, PREFIX_LEN) + match_keywords(
        list(candidate), keywords, cand_offset
    )
    return KarInput(tuple(ids), tuple(segments), tuple(spans))


def build_mask(inp: KarInput, length: int | None = None) -> torch.Tensor:
    """Binary visibility matrix; rows are queries, columns keys.

    [PS] sees site spans plus itself, [PT] sees type spans plus itself, every
    other row sees all real tokens. With ``length`` the matrix is padded: pad
    columns are hidden and pad rows see only themselves.
    """
    l = len(inp)
    L = l if length is None else length
    mask = torch.zeros(L, L, dtype=DTYPE)
    mask[:l, :l] = 1.0
    mask[PS_POS, :] = 0.0
    mask[PT_POS, :] = 0.0
    mask[PS_POS, PS_POS] = 1.0
    mask[PT_POS, PT_POS] = 1.0
    for span in inp.spans:
        row = PS_POS if span.kind == SITE else PT_POS
        mask[row, span.start : span.end] = 1.0
    for i in range(l, L):
        mask[i, i] = 1.0
    return mask


def _stack(inputs: Sequence[KarInput]):
    L = max(len(x) for x in inputs)
    ids = torch.zeros(len(inputs), L, dtype=torch.long)
    seg = torch.zeros(len(inputs), L, dtype=torch.long)
    pad = torch.zeros(len(inputs), L, dtype=DTYPE)
    masks = torch.stack([build_mask(x, L) for x in inputs])
    for b, x in enumerate(inputs):
        ids[b, : len(x)] = torch.tensor(x.ids)
        seg[b, : len(x)] = torch.tensor(x.segments)
        pad[b, : len(x)] = 1.0
    return ids, seg, pad, masks


class KarModel(ParamModel):
    head_prefix = "head."

    @classmethod
    def init(cls, cfg: EncoderConfig, vocab: Vocabulary, keywords: KeywordVocab, seed: int = 0,
             encoder: dict[str, torch.Tensor] | None = None):
        """Fresh ranker; ``encoder`` optionally supplies starting encoder weights
        (e.g. a trained candidate generator sharing the same config and vocabulary)."""
        gen = torch.Generator().manual_seed(seed)
        params = init_encoder(cfg, gen)
        if encoder is not None:
            for k in params:
                if encoder[k].shape != params[k].shape:
                    raise DimensionError(f"warm-start tensor {k} has shape {tuple(encoder[k].shape)}")
                params[k] = encoder[k].clone()
        hidden = cfg.d
        params["head.w1"] = torch.randn(cfg.d, hidden, generator=gen, dtype=DTYPE) / math.sqrt(cfg.d)
        params["head.b1"] = torch.zeros(hidden, dtype=DTYPE)
        params["head.w2"] = torch.randn(hidden, 1, generator=gen, dtype=DTYPE) / math.sqrt(hidden)
        params["head.b2"] = torch.zeros(1, dtype=DTYPE)
        model = cls(cfg, vocab, params)
        model.keywords = keywords
        return model

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        super().save(directory, extra)
        self.keywords.save(Path(directory) / "keywords.tsv")

    @classmethod
    def load(cls, directory: str | Path) -> "KarModel":
        model = super().load(directory)
        model.keywords = load_keywords(Path(directory) / "keywords.tsv")
        return model

    def build(self, mention: str, candidate: str) -> KarInput:
        return build_input(mention, candidate, self.vocab, self.keywords)

    def logits(self, inputs: Sequence[KarInput], params: dict[str, torch.Tensor] | None = None,
               return_weights: bool = False):
        params = self.params if params is None else params
        ids, seg, pad, masks = _stack(inputs)
        H, weights = encode(params, self.cfg, ids, pad, segments=seg, mask=masks, return_weights=True)
        merged = H[:, :PREFIX_LEN, :].mean(dim=1)
        out = ffn(merged, self.head(params)).squeeze(-1)
        if return_weights:
            return out, weights
        return out


@torch.no_grad()
def kar_scores(model: KarModel, inputs: Sequence[KarInput]) -> np.ndarray:
    """Sigmoid scores, batched by length so each score is independent of the batch."""
    out = np.empty(len(inputs))
    for group in length_buckets([len(x) for x in inputs]):
        out[group] = torch.sigmoid(model.logits([inputs[i] for i in group])).numpy()
    return out


def kar_score(model: KarModel, inp: KarInput) -> float:
    return float(kar_scores(model, [inp])[0])


def kar_loss(y_hat, y):
    """Binary cross-entropy ``-[y ln p + (1 - y) ln(1 - p)]``.

    Probabilities at exactly 0 or 1 are clamped by ``PROB_EPS`` with a warning.
    """
    y_hat = torch.as_tensor(y_hat, dtype=DTYPE)
    if torch.any((y_hat <= 0) | (y_hat >= 1)):
        log.warning("kar_loss: probability outside (0, 1) clamped")
        y_hat = y_hat.clamp(PROB_EPS, 1 - PROB_EPS)
    y = torch.as_tensor(y, dtype=DTYPE)
    return -(y * torch.log(y_hat) + (1 - y) * torch.log(1 - y_hat))


def make_training_pairs(
    mtcg: MtcgModel,
    corpus: Sequence[MentionRecord],
    kb: KnowledgeBase,
    k: int = 10,
    append_missed: bool = True,
    index: KbIndex | None = None,
) -> list[PairExample]:
    index = index or KbIndex.build(mtcg, kb)
    lists = index.recall(embed_corpus(mtcg, [r.text for r in corpus]), k)
    pairs = []
    for i, (rec, cands) in enumerate(zip(corpus, lists)):
        gold = set(rec.codes)
        recalled = cands.codes
        pairs += [PairExample(i, c, int(c in gold)) for c in recalled]
        if append_missed:
            pairs += [PairExample(i, g, 1) for g in rec.codes if g not in recalled]
    return pairs


def save_pairs(pairs: Sequence[PairExample], path: str | Path) -> None:
    Path(path).write_text(
        "".join(json.dumps({"mention": p.mention, "code": p.code, "label": p.label}) + "\n" for p in pairs),
        encoding="utf-8",
    )


def load_pairs(path: str | Path) -> list[PairExample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(PairExample(int(rec["mention"]), rec["code"], int(rec["label"])))
    return out


@dataclass
class KarTrainConfig:
    lr: float = 2e-5
    weight_decay: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    append_missed: bool = True


def train_kar(
    model: KarModel,
    pairs: Sequence[PairExample],
    corpus: Sequence[MentionRecord],
    kb: KnowledgeBase,
    cfg: KarTrainConfig,
) -> list[float]:
    """Pointwise BCE training; returns the mean loss of each epoch."""
    if not pairs:
        raise ValueError("no training pairs")
    inputs = [model.build(corpus[p.mention].text, kb.text(p.code)) for p in pairs]
    labels = torch.tensor([float(p.label) for p in pairs], dtype=DTYPE)
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.params
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            leaves = {k: v.requires_grad_(True) for k, v in params.items()}
            z = model.logits([inputs[i] for i in idx], leaves)
            loss = F.binary_cross_entropy_with_logits(z, labels[idx])
            grads = backward(loss, leaves)
            for v in params.values():
                v.requires_grad_(False)
            adamw_step(params, grads, state)
            total += loss.item() * len(idx)
        history.append(total / len(pairs))
        log.info("kar epoch %d loss=%.4f", epoch, history[-1])
    return history
