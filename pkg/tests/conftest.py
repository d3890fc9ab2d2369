import pytest

from termnorm.corpus import SITE, TYPE, KeywordVocab, KnowledgeBase, MentionRecord, Terminology
from termnorm.encoder import EncoderConfig, Vocabulary
from termnorm.kar import KarModel
from termnorm.mtcg import MtcgModel

TINY = dict(n_layers=1, d=8, n_heads=2, d_ff=12, max_len=48)


@pytest.fixture
def kb():
    return KnowledgeBase(
        [
            Terminology("01.3100", "脑膜切开术"),
            Terminology("01.4101", "丘脑切开术"),
            Terminology("06.3901", "甲状腺病损切除术"),
            Terminology("06.4000", "甲状腺全切除术"),
            Terminology("07.2100", "肾上腺病损切除术"),
            Terminology("51.2200", "胆囊切除术"),
            Terminology("51.5900", "胆管切开术"),
        ]
    )


@pytest.fixture
def corpus():
    return [
        MentionRecord("甲状腺肿物切除术", ("06.3901",)),
        MentionRecord("全甲状腺切除", ("06.4000",)),
        MentionRecord("胆囊切除术+胆管切开术", ("51.2200", "51.5900")),
        MentionRecord("脑膜切开", ("01.3100",)),
        MentionRecord("丘脑切开术", ("01.4101",)),
        MentionRecord("肾上腺肿瘤切除术", ("07.2100",)),
    ]


@pytest.fixture
def keywords():
    return KeywordVocab(
        (
            ("脑膜", SITE), ("丘脑", SITE), ("甲状腺", SITE), ("肾上腺", SITE), ("胆囊", SITE), ("胆管", SITE),
            ("切开", TYPE), ("切除", TYPE), ("检查", TYPE),
        )
    )


@pytest.fixture
def vocab(kb, corpus):
    return Vocabulary.from_texts([*kb.texts, *(r.text for r in corpus)])


@pytest.fixture
def mtcg(vocab):
    return MtcgModel.init(EncoderConfig(vocab_size=len(vocab), **TINY), vocab, seed=3)


@pytest.fixture
def kar(vocab, keywords):
    return KarModel.init(EncoderConfig(vocab_size=len(vocab), **TINY), vocab, keywords, seed=4)
