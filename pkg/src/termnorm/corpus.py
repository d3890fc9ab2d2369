"""Knowledge base, mention corpus and keyword vocabulary files, plus the
string-similarity baselines (character tf-idf and Levenshtein distance)."""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

SITE, TYPE = "site", "type"


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Terminology:
    code: str
    text: str


def category_of(code: str) -> str:
    """Tree-coding category: the code segment before the first dot."""
    return code.split(".", 1)[0]


@dataclass
class KnowledgeBase:
    terms: list[Terminology]
    index: dict[str, int] = field(init=False)
    tree: dict[str, list[str]] = field(init=False)

    def __post_init__(self):
        self.index = {}
        self.tree = {}
        for i, t in enumerate(self.terms):
            if not t.code or not t.text.strip():
                raise ValidationError(f"terminology {i} has an empty code or text")
            if t.code in self.index:
                raise ValidationError(f"duplicate code {t.code!r}")
            self.index[t.code] = i
            self.tree.setdefault(category_of(t.code), []).append(t.code)

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def codes(self) -> list[str]:
        return [t.code for t in self.terms]

    @property
    def texts(self) -> list[str]:
        return [t.text for t in self.terms]

    def text(self, code: str) -> str:
        return self.terms[self.index[code]].text

    def to_tsv(self) -> str:
        return "".join(f"{t.code}\t{t.text}\n" for t in self.terms)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def load_kb(path: str | Path) -> KnowledgeBase:
    terms, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ParseError(f"{path}:{lineno}: expected 'code<TAB>text'")
            code, text = parts[0].strip(), parts[1].strip()
            if code in seen:
                raise ParseError(f"{path}:{lineno}: duplicate code {code!r} (first on line {seen[code]})")
            seen[code] = lineno
            terms.append(Terminology(code, text))
    return KnowledgeBase(terms)


@dataclass(frozen=True)
class MentionRecord:
    text: str
    codes: tuple[str, ...]

    @property
    def implication(self) -> int:
        return len(self.codes)

    def to_json(self) -> str:
        return json.dumps({"mention": self.text, "codes": list(self.codes)}, ensure_ascii=False)


def implication_class(n_gold: int) -> int:
    """Implication label in {1, 2, 3}; three or more golds collapse to 3."""
    return min(max(n_gold, 1), 3)


def load_corpus(path: str | Path, kb: KnowledgeBase | None = None) -> list[MentionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            mention, codes = obj.get("mention"), obj.get("codes")
            if not isinstance(mention, str) or not mention.strip():
                raise ValidationError(f"{path}:{lineno}: 'mention' must be a non-empty string")
            if not isinstance(codes, list) or not codes or not all(isinstance(c, str) for c in codes):
                raise ValidationError(f"{path}:{lineno}: 'codes' must be a non-empty list of strings")
            records.append(MentionRecord(mention.strip(), tuple(codes)))
    if kb is not None:
        validate_corpus(records, kb)
    return records


def validate_corpus(records: Iterable[MentionRecord], kb: KnowledgeBase) -> None:
    unknown = sorted({c for r in records for c in r.codes if c not in kb.index})
    if unknown:
        raise ValidationError(f"unknown terminology codes: {', '.join(unknown)}")


def save_corpus(records: Iterable[MentionRecord], path: str | Path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


@dataclass(frozen=True)
class KeywordVocab:
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        seen = set()
        for term, kind in self.entries:
            if not term:
                raise ValidationError("keyword terms must be non-empty")
            if kind not in (SITE, TYPE):
                raise ValidationError(f"keyword kind must be site or type, got {kind!r}")
            if (term, kind) in seen:
                raise ValidationError(f"duplicate keyword entry {term!r} ({kind})")
            seen.add((term, kind))

    def terms(self, kind: str) -> list[str]:
        return [t for t, k in self.entries if k == kind]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{t}\t{k}\n" for t, k in self.entries), encoding="utf-8")


def load_keywords(path: str | Path) -> KeywordVocab:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'term<TAB>site|type'")
            entries.append((parts[0].strip(), parts[1].strip()))
    try:
        return KeywordVocab(tuple(entries))
    except ValidationError as exc:
        raise ParseError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# baselines


def char_ngrams(text: str) -> Counter:
    """Character unigrams and bigrams."""
    text = text.strip()
    grams = list(text) + [text[i : i + 2] for i in range(len(text) - 1)]
    return Counter(grams)


class TfidfModel:
    """Character uni+bigram tf-idf fitted on knowledge-base texts.

    idf is the smoothed ``ln((1 + N) / (1 + df)) + 1``, so n-grams unseen in
    the KB still carry weight and any non-empty string has a non-zero vector.
    """

    def __init__(self, documents: Sequence[str]):
        if not documents:
            raise ValueError("tf-idf needs at least one document")
        self.n_docs = len(documents)
        self.df: Counter = Counter()
        for doc in documents:
            self.df.update(set(char_ngrams(doc)))
        self.doc_vectors = [self.vectorize(doc) for doc in documents]

    def idf(self, gram: str) -> float:
        return math.log((1 + self.n_docs) / (1 + self.df.get(gram, 0))) + 1.0

    def vectorize(self, text: str) -> dict[str, float]:
        tf = char_ngrams(text)
        vec = {g: c * self.idf(g) for g, c in tf.items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        if norm == 0:
            return {}
        return {g: w / norm for g, w in vec.items()}

    @staticmethod
    def cosine(a: dict[str, float], b: dict[str, float]) -> float:
        if len(a) > len(b):
            a, b = b, a
        s = sum(w * b.get(g, 0.0) for g, w in a.items())
        return min(1.0, max(0.0, s))

    def similarity(self, a: str, b: str) -> float:
        return self.cosine(self.vectorize(a), self.vectorize(b))

    def scores(self, text: str) -> list[float]:
        """Cosine similarity of ``text`` against every fitted document."""
        q = self.vectorize(text)
        return [self.cosine(q, d) for d in self.doc_vectors]


def tfidf_fit(kb: KnowledgeBase) -> TfidfModel:
    return TfidfModel(kb.texts)


def tfidf_similarity(model: TfidfModel, a: str, b: str) -> float:
    return model.similarity(a, b)


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance over Unicode scalars (two-row DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]
