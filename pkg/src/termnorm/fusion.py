"""Fusion block: merge recall similarity with the ranker score and pick the
output terminologies using the predicted implication number."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DEGENERATE_SUM = 1e-12


@dataclass
class FusionConfig:
    k_c: int = 10
    theta: float = 0.8

    def __post_init__(self):
        if self.k_c < 3:
            raise ValueError("k_c must be at least 3")


@dataclass(frozen=True)
class ScoredCandidate:
    code: str
    d: float
    sc: float
    sr: float
    s: float


@dataclass
class NormalizationResult:
    mention: str
    x: int
    selected: list[str]
    candidates: list[ScoredCandidate]
    flagged: bool = False
    id: int | None = field(default=None)

    def to_json(self) -> str:
        rec = {
            "id": self.id,
            "mention": self.mention,
            "x": self.x,
            "selected": self.selected,
            "candidates": [
                {"code": c.code, "d": c.d, "sc": c.sc, "sr": c.sr, "s": c.s} for c in self.candidates
            ],
        }
        if self.flagged:
            rec["flagged"] = True
        return json.dumps(rec, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "NormalizationResult":
        rec = json.loads(line)
        cands = [ScoredCandidate(c["code"], c["d"], c["sc"], c["sr"], c["s"]) for c in rec.get("candidates", [])]
        return cls(rec["mention"], int(rec["x"]), list(rec["selected"]), cands, bool(rec.get("flagged", False)),
                   rec.get("id"))


def candidate_scores(distances: Sequence[float]) -> np.ndarray:
    """``sc_i = 1 - d_i / sum(d)``; all ones when the distances sum to ~0."""
    d = np.asarray(distances, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    total = d.sum()
    if total < DEGENERATE_SUM:
        return np.ones_like(d)
    return 1.0 - d / total


def fuse(sc, sr):
    return (np.asarray(sc) + np.asarray(sr)) / 2.0


def sort_candidates(cands: Sequence[ScoredCandidate]) -> list[ScoredCandidate]:
    """Descending fused score, ties by ascending code."""
    return sorted(cands, key=lambda c: (-c.s, c.code))


def select(cands: Sequence[ScoredCandidate], x: int, theta: float) -> tuple[list[str], bool]:
    """Output codes from a list sorted by descending ``s``.

    ``x < 3`` keeps the top ``x``. ``x == 3`` keeps the top three plus every
    later candidate with ``s > theta``. Returns ``(codes, flagged)``; the flag
    is set when fewer candidates exist than the rule asks for.
    """
    if x not in (1, 2, 3):
        raise ValueError(f"implication class must be 1, 2 or 3, got {x}")
    flagged = len(cands) < x
    if x < 3:
        return [c.code for c in cands[:x]], flagged
    head = [c.code for c in cands[:3]]
    tail = [c.code for c in cands[3:] if c.s > theta]
    return head + tail, flagged


def score_candidates(codes: Sequence[str], distances: Sequence[float], sr: Sequence[float]) -> list[ScoredCandidate]:
    sc = candidate_scores(distances)
    s = fuse(sc, np.asarray(sr, dtype=np.float64))
    return sort_candidates(
        [ScoredCandidate(c, float(d), float(a), float(b), float(f)) for c, d, a, b, f in zip(codes, distances, sc, sr, s)]
    )
