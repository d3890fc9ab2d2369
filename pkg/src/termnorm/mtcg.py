"""Multi-task candidate generator: a bi-encoder trained with a triplet loss
plus an implication-number classifier on the mention's [CLS] vector."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
import torch

from .corpus import KnowledgeBase, MentionRecord, implication_class
from .encoder import (
    EmptyInputError,
    EncoderConfig,
    ParamModel,
    Vocabulary,
    cls_vector,
    encode,
    init_encoder,
    length_buckets,
    mean_pool,
    pad_batch,
    tokenize,
)
from .kernel import DTYPE, DimensionError, OptimizerState, adamw_step, backward, ffn, load_params, save_params

if TYPE_CHECKING:
    from .negatives import NegativeAssignment

log = logging.getLogger(__name__)

N_CLASSES = 3


@dataclass
class MtcgTrainConfig:
    margin: float = 1.0
    k_n: int = 4
    lr: float = 2e-5
    weight_decay: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.k_n < 1:
            raise ValueError("k_n must be at least 1")


@dataclass(frozen=True)
class CandidateList:
    mention: int
    candidates: tuple[tuple[str, float], ...]

    @property
    def codes(self) -> list[str]:
        return [c for c, _ in self.candidates]

    @property
    def distances(self) -> list[float]:
        return [d for _, d in self.candidates]


class MtcgModel(ParamModel):
    """Encoder weights plus the 3-way implication head, keyed in one dict."""

    @classmethod
    def init(cls, cfg: EncoderConfig, vocab: Vocabulary, seed: int = 0, head_hidden: int | None = None):
        gen = torch.Generator().manual_seed(seed)
        params = init_encoder(cfg, gen)
        hidden = head_hidden or cfg.d
        params["head.w1"] = torch.randn(cfg.d, hidden, generator=gen, dtype=DTYPE) / math.sqrt(cfg.d)
        params["head.b1"] = torch.zeros(hidden, dtype=DTYPE)
        params["head.w2"] = torch.randn(hidden, N_CLASSES, generator=gen, dtype=DTYPE) / math.sqrt(hidden)
        params["head.b2"] = torch.zeros(N_CLASSES, dtype=DTYPE)
        return cls(cfg, vocab, params)

    def tokens(self, texts: Sequence[str]):
        return [tokenize(t, self.vocab, wrap=True) for t in texts]

    def forward(self, texts: Sequence[str], params: dict[str, torch.Tensor] | None = None):
        """Padded batch encode; returns (mean-pooled vectors, [CLS] vectors)."""
        params = self.params if params is None else params
        ids, pad = pad_batch(self.tokens(texts))
        H = encode(params, self.cfg, ids, pad)
        return mean_pool(H, pad), cls_vector(H, ids, self.vocab)

    def class_logits(self, cls_vecs: torch.Tensor, params: dict[str, torch.Tensor] | None = None):
        return ffn(cls_vecs, self.head(params))


# ---------------------------------------------------------------------------
# losses


def euclidean(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    return torch.linalg.vector_norm(u - v, dim=-1)


def triplet_loss(v_m: torch.Tensor, v_p: torch.Tensor, v_n: torch.Tensor, margin: float = 1.0) -> torch.Tensor:
    """Elementwise ``max(0, D(m,p) + margin - D(m,n))``."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    return torch.clamp(euclidean(v_m, v_p) + margin - euclidean(v_m, v_n), min=0.0)


def implication_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Negated log-likelihood of the gold class; ``labels`` are 1-based."""
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, (labels - 1).unsqueeze(-1)).squeeze(-1)


def total_loss(triplet_part: torch.Tensor, class_part: torch.Tensor) -> torch.Tensor:
    return triplet_part + class_part


def batch_loss(
    model: MtcgModel,
    params: dict[str, torch.Tensor],
    mentions: Sequence[str],
    positives: Sequence[str],
    negatives: Sequence[str],
    labels: Sequence[int],
    margin: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean total loss over a batch of triples, encoding each distinct text once."""
    uniq = list(dict.fromkeys([*mentions, *positives, *negatives]))
    where = {t: i for i, t in enumerate(uniq)}
    pooled, cls = model.forward(uniq, params)
    m_idx = torch.tensor([where[t] for t in mentions])
    lt = triplet_loss(
        pooled[m_idx],
        pooled[torch.tensor([where[t] for t in positives])],
        pooled[torch.tensor([where[t] for t in negatives])],
        margin,
    ).mean()
    logits = model.class_logits(cls[m_idx], params)
    lc = implication_loss(logits, torch.tensor(labels)).mean()
    return total_loss(lt, lc), lt, lc


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    triplet_loss: float
    class_loss: float
    n_triples: int


def build_triples(
    corpus: Sequence[MentionRecord], negatives: dict[int, list[str]]
) -> list[tuple[int, str, str]]:
    """One (mention, gold, negative) triple per gold x assigned negative."""
    triples = []
    for i, rec in enumerate(corpus):
        if i not in negatives or not negatives[i]:
            raise ValueError(f"mention {i} has no assigned negatives")
        for g in rec.codes:
            for n in negatives[i]:
                triples.append((i, g, n))
    return triples


def train_epoch(
    model: MtcgModel,
    corpus: Sequence[MentionRecord],
    kb: KnowledgeBase,
    negatives: dict[int, list[str]],
    cfg: MtcgTrainConfig,
    state: OptimizerState,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStats:
    triples = build_triples(corpus, negatives)
    order = rng.permutation(len(triples))
    params = model.params
    tl = cl = 0.0
    for start in range(0, len(order), cfg.batch_size):
        chunk = [triples[j] for j in order[start : start + cfg.batch_size]]
        leaves = {k: v.requires_grad_(True) for k, v in params.items()}
        loss, lt, lc = batch_loss(
            model,
            leaves,
            [corpus[i].text for i, _, _ in chunk],
            [kb.text(g) for _, g, _ in chunk],
            [kb.text(n) for _, _, n in chunk],
            [implication_class(corpus[i].implication) for i, _, _ in chunk],
            cfg.margin,
        )
        grads = backward(loss, leaves)
        for v in params.values():
            v.requires_grad_(False)
        adamw_step(params, grads, state)
        tl += lt.item() * len(chunk)
        cl += lc.item() * len(chunk)
    n = max(1, len(triples))
    return EpochStats(epoch, tl / n, cl / n, len(triples))


def train_mtcg(
    model: MtcgModel,
    corpus: Sequence[MentionRecord],
    kb: KnowledgeBase,
    cfg: MtcgTrainConfig,
    sampler: Callable[[MtcgModel], "NegativeAssignment"],
    online: bool = False,
    on_epoch: Callable[[int, MtcgModel, dict[int, list[str]]], None] | None = None,
) -> tuple[list[EpochStats], dict[int, list[str]]]:
    """Run ``cfg.epochs`` epochs.

    ``sampler`` produces the initial negative assignment. With ``online`` the
    assignment is re-mined from the current model after every epoch and used
    for the next one. ``on_epoch`` sees the model and the assignment mined at
    the end of each epoch (the fixed assignment when not online).
    """
    from .negatives import sample_online

    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    negatives = sampler(model).negatives
    history = []
    for epoch in range(cfg.epochs):
        stats = train_epoch(model, corpus, kb, negatives, cfg, state, rng, epoch)
        log.info("epoch %d triplet=%.4f class=%.4f", epoch, stats.triplet_loss, stats.class_loss)
        history.append(stats)
        if online:
            negatives = sample_online(model, corpus, kb, cfg.k_n).negatives
        if on_epoch is not None:
            on_epoch(epoch, model, negatives)
    return history, negatives


# ---------------------------------------------------------------------------
# inference


@torch.no_grad()
def embed_corpus(model: MtcgModel, texts: Sequence[str], with_cls: bool = False):
    """Mean-pooled vectors, row i for text i, as a float64 numpy array.

    Texts are batched by token length so results equal one-at-a-time encodes
    bitwise.
    """
    if len(texts) == 0:
        raise EmptyInputError("no texts to embed")
    tokens = model.tokens(texts)
    pooled = np.empty((len(texts), model.cfg.d))
    cls = np.empty((len(texts), model.cfg.d))
    for group in length_buckets([len(t) for t in tokens]):
        ids, pad = pad_batch([tokens[i] for i in group])
        H = encode(model.params, model.cfg, ids, pad)
        pooled[group] = mean_pool(H, pad).numpy()
        cls[group] = H[:, 0, :].numpy()
    if with_cls:
        return pooled, cls
    return pooled


def pairwise_distances(Q: np.ndarray, X: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Euclidean distance matrix ``(len(Q), len(X))`` from explicit differences."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if Q.shape[1] != X.shape[1]:
        raise DimensionError(f"dimension mismatch: {Q.shape[1]} vs {X.shape[1]}")
    out = np.empty((len(Q), len(X)))
    for s in range(0, len(Q), chunk):
        diff = Q[s : s + chunk, None, :] - X[None, :, :]
        out[s : s + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def code_ranks(codes: Sequence[str]) -> np.ndarray:
    """Position of each code in ascending code order (the tie-break key)."""
    ranks = np.empty(len(codes), dtype=np.int64)
    ranks[np.argsort(np.asarray(codes, dtype=object), kind="stable")] = np.arange(len(codes))
    return ranks


def ranked(distances: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    """Indices sorted by distance ascending, ties by ascending code."""
    return np.lexsort((ranks, distances))


def recall_batch(
    queries: np.ndarray, kb_emb: np.ndarray, kb_codes: Sequence[str], k_c: int
) -> list[CandidateList]:
    if k_c > len(kb_codes):
        log.warning("k_c=%d exceeds KB size %d; clamping", k_c, len(kb_codes))
        k_c = len(kb_codes)
    D = pairwise_distances(queries, kb_emb)
    ranks = code_ranks(kb_codes)
    out = []
    for i, row in enumerate(D):
        top = ranked(row, ranks)[:k_c]
        out.append(CandidateList(i, tuple((kb_codes[j], float(row[j])) for j in top)))
    return out


def recall_candidates(
    query: np.ndarray, kb_emb: np.ndarray, kb_codes: Sequence[str], k_c: int, mention: int = 0
) -> CandidateList:
    cl = recall_batch(np.atleast_2d(query), kb_emb, kb_codes, k_c)[0]
    return CandidateList(mention, cl.candidates)


@torch.no_grad()
def class_probs(model: MtcgModel, cls: np.ndarray) -> np.ndarray:
    """Softmax over the three implication classes from [CLS] vectors."""
    return torch.softmax(model.class_logits(torch.from_numpy(cls)), dim=-1).numpy()


def implication_probs(model: MtcgModel, texts: Sequence[str]) -> np.ndarray:
    _, cls = embed_corpus(model, texts, with_cls=True)
    return class_probs(model, cls)


def predict_implication(model: MtcgModel, texts: Sequence[str]) -> list[int]:
    """Argmax class in {1,2,3}; ties go to the smaller class."""
    return [int(np.argmax(p)) + 1 for p in implication_probs(model, texts)]


@dataclass
class KbIndex:
    """Embedding snapshot of a knowledge base, tied to its content hash."""

    codes: list[str]
    embeddings: np.ndarray
    kb_hash: str

    @classmethod
    def build(cls, model: MtcgModel, kb: KnowledgeBase) -> "KbIndex":
        return cls(kb.codes, embed_corpus(model, kb.texts), kb.content_hash())

    def save(self, directory: str | Path) -> None:
        save_params(
            directory,
            {"embeddings": torch.from_numpy(self.embeddings)},
            {"kb_hash": self.kb_hash, "codes": self.codes},
        )

    @classmethod
    def load(cls, directory: str | Path, kb: KnowledgeBase) -> "KbIndex":
        params, meta = load_params(directory)
        if meta["kb_hash"] != kb.content_hash():
            raise ValueError(
                f"stale KB embeddings in {directory}: hash {meta['kb_hash'][:12]} "
                f"does not match the KB ({kb.content_hash()[:12]})"
            )
        return cls(list(meta["codes"]), params["embeddings"].numpy(), meta["kb_hash"])

    def recall(self, queries: np.ndarray, k_c: int) -> list[CandidateList]:
        return recall_batch(queries, self.embeddings, self.codes, k_c)


def config_dict(cfg) -> dict:
    return asdict(cfg)
