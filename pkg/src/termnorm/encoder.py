"""Character tokenizer and the small transformer encoder used by both models."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .kernel import DTYPE, DimensionError, init_layer_params, load_params, save_params, transformer_layer

PAD, UNK, CLS, SEP, PS, PT = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[PS]", "[PT]"
RESERVED = (PAD, UNK, CLS, SEP, PS, PT)


class EmptyInputError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


class Vocabulary:
    """Dense token-to-id map with the reserved tokens at ids 0..5."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        chars = sorted({ch for text in texts for ch in text.strip()})
        return cls(chars)

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens must come first, in order {RESERVED}")
        if len(set(lines)) != len(lines):
            raise ValueError(f"{path}: duplicate tokens")
        vocab = cls()
        for t in lines[len(RESERVED):]:
            vocab.add(t)
        return vocab


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    padding: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.padding):
            raise ValueError("ids and padding mask differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    def padded(self, length: int) -> "TokenSequence":
        extra = length - len(self)
        if extra < 0:
            raise ValueError("cannot pad to a shorter length")
        return TokenSequence(self.ids + (0,) * extra, self.padding + (0,) * extra)


def tokenize(text: str, vocab: Vocabulary, wrap: bool = True) -> TokenSequence:
    """One token per Unicode scalar; ``wrap`` adds ``[CLS]`` ... ``[SEP]``."""
    text = text.strip()
    if not text:
        raise EmptyInputError("cannot tokenize empty text")
    ids = [vocab[ch] for ch in text]
    if wrap:
        ids = [vocab.stoi[CLS], *ids, vocab.stoi[SEP]]
    return TokenSequence(tuple(ids), (1,) * len(ids))


def pad_batch(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    length = max(len(s) for s in seqs)
    rows = [s.padded(length) for s in seqs]
    ids = torch.tensor([r.ids for r in rows], dtype=torch.long)
    pad = torch.tensor([r.padding for r in rows], dtype=DTYPE)
    return ids, pad


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    d: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    renormalize_mask: bool = False

    def __post_init__(self):
        if self.d % self.n_heads:
            raise DimensionError(f"d={self.d} must be a multiple of n_heads={self.n_heads}")
        if self.d_ff <= 0 or self.n_layers < 0:
            raise ValueError("d_ff must be positive and n_layers non-negative")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def init_encoder(cfg: EncoderConfig, gen: torch.Generator) -> dict[str, torch.Tensor]:
    params = {
        "tok_emb": torch.randn(cfg.vocab_size, cfg.d, generator=gen, dtype=DTYPE) * 0.5,
        "pos_emb": torch.randn(cfg.max_len, cfg.d, generator=gen, dtype=DTYPE) * 0.1,
        "seg_emb": torch.randn(2, cfg.d, generator=gen, dtype=DTYPE) * 0.1,
    }
    for i in range(cfg.n_layers):
        for k, v in init_layer_params(cfg.d, cfg.n_heads, cfg.d_ff, gen).items():
            params[f"layer{i}.{k}"] = v
    return params


def layer_params(params: dict[str, torch.Tensor], i: int) -> dict[str, torch.Tensor]:
    prefix = f"layer{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def encode(
    params: dict[str, torch.Tensor],
    cfg: EncoderConfig,
    ids: torch.Tensor,
    padding: torch.Tensor,
    segments: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    """Hidden states ``(batch, l, d)`` for a padded id batch.

    Padded keys are blocked inside attention, so the hidden rows of real
    tokens do not depend on how much padding a batch carries. ``mask`` is the
    post-softmax visibility matrix applied in every layer.
    """
    if ids.dim() == 1:
        ids, padding = ids.unsqueeze(0), padding.unsqueeze(0)
        segments = None if segments is None else segments.unsqueeze(0)
    l = ids.shape[-1]
    if l > cfg.max_len:
        raise SequenceLengthError(f"sequence length {l} exceeds max_len {cfg.max_len}")
    H = params["tok_emb"][ids] + params["pos_emb"][:l]
    if segments is not None:
        H = H + params["seg_emb"][segments]
    else:
        H = H + params["seg_emb"][0]
    weights = []
    for i in range(cfg.n_layers):
        H, A = transformer_layer(
            H,
            layer_params(params, i),
            mask=mask,
            key_padding=padding,
            renormalize=cfg.renormalize_mask,
            return_weights=True,
        )
        weights.append(A)
    if return_weights:
        return H, weights
    return H


def mean_pool(H: torch.Tensor, padding: torch.Tensor) -> torch.Tensor:
    """Average of hidden rows over non-pad positions ([CLS]/[SEP] included)."""
    counts = padding.sum(-1, keepdim=True)
    if torch.any(counts == 0):
        raise EmptyInputError("cannot pool a sequence with no real tokens")
    return (H * padding.unsqueeze(-1)).sum(-2) / counts


def cls_vector(H: torch.Tensor, ids: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    if not torch.all(ids[..., 0] == vocab.stoi[CLS]):
        raise ValueError("sequence is not [CLS]-wrapped")
    return H[..., 0, :]


def length_buckets(lengths: Sequence[int]) -> list[list[int]]:
    """Group indices by sequence length, in order of first appearance.

    Batching only equal-length sequences keeps results bitwise identical to
    one-at-a-time evaluation.
    """
    groups: dict[int, list[int]] = {}
    for i, n in enumerate(lengths):
        groups.setdefault(n, []).append(i)
    return list(groups.values())


def n_params(params: dict[str, torch.Tensor]) -> int:
    return sum(math.prod(v.shape) for v in params.values())


class ParamModel:
    """Encoder config, vocabulary and a flat name -> tensor parameter dict."""

    head_prefix = "head."

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, params: dict[str, torch.Tensor]):
        if cfg.vocab_size != len(vocab):
            raise DimensionError("encoder vocab_size does not match the vocabulary")
        self.cfg = cfg
        self.vocab = vocab
        self.params = params

    def head(self, params: dict[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
        params = self.params if params is None else params
        n = len(self.head_prefix)
        return {k[n:]: v for k, v in params.items() if k.startswith(self.head_prefix)}

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        directory = Path(directory)
        save_params(directory, self.params, {"encoder": self.cfg.to_dict(), **(extra or {})})
        self.vocab.save(directory / "vocab.txt")

    @classmethod
    def load(cls, directory: str | Path):
        directory = Path(directory)
        params, meta = load_params(directory)
        return cls(EncoderConfig(**meta["encoder"]), Vocabulary.load(directory / "vocab.txt"), params)
