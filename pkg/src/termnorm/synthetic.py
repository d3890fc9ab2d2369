"""Seeded generator for procedure-normalization corpora.

Terminologies are ``site + qualifier + type + 术`` with tree codes grouped by
site. Mentions are paraphrases of their gold terminologies: site/type aliases,
lesion-word aliases, ignorable descriptors, verb-first reordering, and
multi-terminology mentions joined with ``+`` (or sharing one procedure type,
e.g. ``胆囊及胆管切除术``).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import SITE, TYPE, KeywordVocab, KnowledgeBase, MentionRecord, Terminology

CONNECTOR = "+"
SHARED_JOINER = "及"
SUFFIX = "术"
APPROACH = "经"

DEFAULT_SITES: list[tuple[str, list[str]]] = [
    ("脑膜", ["硬脑膜"]), ("丘脑", []), ("甲状腺", ["甲状腺体"]), ("甲状旁腺", []),
    ("肾上腺", ["肾上腺体"]), ("喉", ["喉部"]), ("气管", []), ("支气管", []),
    ("肺", ["肺部"]), ("胸膜", []), ("心包", []), ("食管", ["食道"]),
    ("胃", ["胃部"]), ("十二指肠", []), ("小肠", []), ("结肠", ["大肠"]),
    ("直肠", []), ("阑尾", []), ("肝", ["肝脏"]), ("胆囊", ["胆"]),
    ("胆管", ["胆道"]), ("胰腺", ["胰"]), ("脾", ["脾脏"]), ("肾", ["肾脏"]),
    ("输尿管", []), ("膀胱", []), ("尿道", []), ("前列腺", []),
    ("睾丸", []), ("子宫", []), ("卵巢", []), ("输卵管", []),
    ("乳腺", ["乳房"]), ("皮肤", []), ("皮下组织", ["皮下"]), ("淋巴结", []),
    ("舌", ["舌部"]), ("腮腺", []), ("扁桃体", []), ("鼻", ["鼻腔"]),
    ("眼睑", []), ("角膜", []), ("膝关节", ["膝"]), ("髋关节", ["髋"]),
    ("股骨", []), ("腰椎", []),
]

DEFAULT_TYPES: list[tuple[str, list[str]]] = [
    ("切除", ["摘除", "去除"]), ("切开", ["剖开"]), ("活检", ["活组织检查", "穿刺活检"]),
    ("修补", ["修复"]), ("造口", ["造瘘"]), ("引流", ["置管引流"]), ("检查", ["探查"]),
    ("成形", ["整形"]), ("缝合", ["缝补"]), ("固定", []), ("置换", ["替换"]),
    ("吻合", []), ("造影", ["显影"]), ("结扎", []), ("松解", []), ("移植", []),
    ("止血", ["控制出血"]),
]

# (qualifier, aliases, types it combines with); an empty type list means all
DEFAULT_QUALIFIERS: list[tuple[str, list[str], list[str]]] = [
    ("", [], []),
    ("病损", ["肿物", "肿瘤", "包块", "病变", "癌"], ["切除", "活检", "切开", "引流"]),
    ("部分", ["局部"], ["切除", "置换", "成形"]),
    ("全", ["全部"], ["切除", "置换"]),
    ("闭合性", ["闭式"], ["活检", "引流"]),
    ("开放性", ["开放式"], ["活检", "引流"]),
    ("内镜下", ["镜下"], ["切除", "活检", "引流", "止血"]),
    ("再次", ["二期"], ["修补", "置换", "成形"]),
]

# some descriptors contain other site words (经尿道, 经胃镜), which look like
# keywords but do not change the target terminology; the approach_site rule
# goes further and prefixes 经 + another site of the knowledge base
DEFAULT_DESCRIPTORS = [
    "左侧", "右侧", "双侧", "单侧", "腔镜", "腹腔镜", "经腹", "经皮", "开放", "微创", "急诊", "二次",
    "经尿道", "经胃镜", "经鼻", "经口", "经直肠", "经阴道", "经胸", "胸腔镜", "宫腔镜", "膀胱镜",
]

DEFAULT_RULES = {
    "site_alias": 0.4,
    "type_alias": 0.4,
    "qualifier_alias": 0.6,
    "descriptor": 0.6,
    "second_descriptor": 0.3,
    "reorder": 0.15,
    "drop_suffix": 0.15,
    "shared_type_join": 0.3,
    "three_golds": 0.15,
    "approach_site": 0.35,
}


class SpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    kb_size: int = 300
    n_sites: int | None = 10
    mention_count: int = 1500
    multi_fraction: float = 0.05
    test_fraction: float = 0.2
    seed: int = 0
    sites: list = field(default_factory=lambda: [list(s) for s in DEFAULT_SITES])
    types: list = field(default_factory=lambda: [list(t) for t in DEFAULT_TYPES])
    qualifiers: list = field(default_factory=lambda: [list(q) for q in DEFAULT_QUALIFIERS])
    descriptors: list = field(default_factory=lambda: list(DEFAULT_DESCRIPTORS))
    rules: dict = field(default_factory=lambda: dict(DEFAULT_RULES))

    def validate(self) -> None:
        if not self.sites or not self.types or not self.qualifiers or not self.descriptors:
            raise SpecError("site, type, qualifier and descriptor pools must be non-empty")
        if not 0 <= self.multi_fraction < 1:
            raise SpecError("multi_fraction must lie in [0, 1)")
        if not 0 < self.test_fraction < 1:
            raise SpecError("test_fraction must lie in (0, 1)")
        if self.kb_size < 2 or self.mention_count < 2:
            raise SpecError("kb_size and mention_count must be at least 2")
        if self.n_sites is not None and not 1 <= self.n_sites <= len(self.sites):
            raise SpecError(f"n_sites must lie in [1, {len(self.sites)}]")
        type_names = {t[0] for t in self.types}
        for q in self.qualifiers:
            if len(q) != 3 or not set(q[2]) <= type_names:
                raise SpecError(f"qualifier {q!r} must be (text, aliases, known types)")
        n_sites = self.n_sites or len(self.sites)
        capacity = n_sites * len(_forms(self))
        if self.kb_size > capacity:
            raise SpecError(f"pools support at most {capacity} terminologies, asked for {self.kb_size}")
        unknown = set(self.rules) - set(DEFAULT_RULES)
        if unknown:
            raise SpecError(f"unknown paraphrase rules: {sorted(unknown)}")

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticSpec":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = {**DEFAULT_RULES, **raw.pop("rules", {})}
        spec = cls(**raw, rules=rules)
        spec.validate()
        return spec

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, indent=2)


def _forms(spec: SyntheticSpec) -> list[tuple[int, int]]:
    """(qualifier, type) index pairs a single site can take."""
    out = []
    for qi, q in enumerate(spec.qualifiers):
        allowed = set(q[2])
        out += [(qi, ti) for ti, t in enumerate(spec.types) if not allowed or t[0] in allowed]
    return out


@dataclass(frozen=True)
class _Entry:
    code: str
    site: int
    qualifier: int
    type: int


@dataclass
class SyntheticData:
    kb: KnowledgeBase
    train: list[MentionRecord]
    test: list[MentionRecord]
    keywords: KeywordVocab


class _Generator:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.rules = {**DEFAULT_RULES, **spec.rules}
        self.kb_sites: list[int] = []

    def coin(self, rule: str) -> bool:
        return bool(self.rng.random() < self.rules[rule])

    def pick(self, items):
        return items[int(self.rng.integers(len(items)))]

    def build_kb(self) -> list[_Entry]:
        s = self.spec
        n_sites = s.n_sites or len(s.sites)
        sites = sorted(self.rng.choice(len(s.sites), size=n_sites, replace=False).tolist())
        self.kb_sites = sites
        combos = [(si, qi, ti) for si in sites for qi, ti in _forms(s)]
        chosen = self.rng.choice(len(combos), size=s.kb_size, replace=False)
        entries = []
        for idx in sorted(chosen.tolist()):
            si, qi, ti = combos[idx]
            code = f"{si + 1:02d}.{ti:02d}{qi:02d}"
            entries.append(_Entry(code, si, qi, ti))
        return entries

    def text(self, e: _Entry) -> str:
        s = self.spec
        return s.sites[e.site][0] + s.qualifiers[e.qualifier][0] + s.types[e.type][0] + SUFFIX

    def _surface(self, pool, idx: int, rule: str) -> str:
        canonical, aliases = pool[idx][0], pool[idx][1]
        if aliases and self.coin(rule):
            return self.pick(aliases)
        return canonical

    def paraphrase(self, e: _Entry, site: str | None = None) -> str:
        s = self.spec
        site = site if site is not None else self._surface(s.sites, e.site, "site_alias")
        qual = self._surface(s.qualifiers, e.qualifier, "qualifier_alias")
        typ = self._surface(s.types, e.type, "type_alias")
        if self.coin("reorder"):
            body = typ + site + qual
        else:
            body = site + qual + typ + ("" if self.coin("drop_suffix") else SUFFIX)
        if self.coin("descriptor"):
            prefix = self.pick(s.descriptors)
            if self.coin("second_descriptor"):
                other = self.pick(s.descriptors)
                if other != prefix:
                    prefix = other + prefix
            body = prefix + body
        others = [i for i in self.kb_sites if i != e.site]
        if others and self.coin("approach_site"):
            body = APPROACH + s.sites[self.pick(others)][0] + body
        return body

    def multi(self, entries: list[_Entry]) -> tuple[str, tuple[str, ...]]:
        s = self.spec
        if self.coin("shared_type_join"):
            by_form: dict[tuple[int, int], list[_Entry]] = {}
            for e in entries:
                by_form.setdefault((e.qualifier, e.type), []).append(e)
            forms = [k for k, v in sorted(by_form.items()) if len(v) >= 2]
            if forms:
                group = by_form[self.pick(forms)]
                a, b = self.rng.choice(len(group), size=2, replace=False)
                ea, eb = group[int(a)], group[int(b)]
                site_a = self._surface(s.sites, ea.site, "site_alias")
                site_b = self._surface(s.sites, eb.site, "site_alias")
                text = self.paraphrase(eb, site=site_a + SHARED_JOINER + site_b)
                return text, (ea.code, eb.code)
        k = 3 if self.coin("three_golds") else 2
        picks = self.rng.choice(len(entries), size=k, replace=False)
        golds = [entries[int(i)] for i in picks]
        text = CONNECTOR.join(self.paraphrase(e) for e in golds)
        return text, tuple(e.code for e in golds)

    def mentions(self, entries: list[_Entry]) -> list[MentionRecord]:
        s = self.spec
        out, seen = [], set()
        attempts = 0
        while len(out) < s.mention_count:
            attempts += 1
            if attempts > 50 * s.mention_count:
                raise SpecError("could not generate enough distinct mentions; enlarge the pools")
            is_multi = bool(self.rng.random() < s.multi_fraction)
            while True:
                if is_multi:
                    text, codes = self.multi(entries)
                else:
                    e = self.pick(entries)
                    text, codes = self.paraphrase(e), (e.code,)
                if text not in seen:
                    break
                attempts += 1
                if attempts > 50 * s.mention_count:
                    raise SpecError("could not generate enough distinct mentions; enlarge the pools")
            seen.add(text)
            out.append(MentionRecord(text, codes))
        return out


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    gen = _Generator(spec)
    entries = gen.build_kb()
    kb = KnowledgeBase([Terminology(e.code, gen.text(e)) for e in entries])
    records = gen.mentions(entries)
    order = gen.rng.permutation(len(records))
    n_test = max(1, int(round(spec.test_fraction * len(records))))
    test = [records[i] for i in sorted(order[:n_test].tolist())]
    train = [records[i] for i in sorted(order[n_test:].tolist())]
    keywords = KeywordVocab(
        tuple((site[0], SITE) for site in spec.sites)
        + tuple((typ[0], TYPE) for typ in spec.types)
    )
    return SyntheticData(kb, train, test, keywords)
