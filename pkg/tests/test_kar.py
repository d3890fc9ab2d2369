import logging
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import TINY
from helpers import kar_loss_case
from oracles import oracle_encode, oracle_ffn, oracle_sigmoid
from termnorm.corpus import SITE, TYPE, KeywordVocab, MentionRecord
from termnorm.encoder import CLS, PS, PT, SEP, EmptyInputError, EncoderConfig, SequenceLengthError, Vocabulary
from termnorm.encoder import layer_params
from termnorm.kar import (
    KarModel,
    KarTrainConfig,
    KeywordSpan,
    PairExample,
    build_input,
    build_mask,
    kar_loss,
    kar_score,
    kar_scores,
    load_pairs,
    make_training_pairs,
    match_keywords,
    save_pairs,
    train_kar,
)
from termnorm.kernel import DTYPE, DimensionError, gradient_check, transformer_layer

# keyword matching ------------------------------------------------------------------


def test_single_site_match():
    kw = KeywordVocab((("甲状腺", SITE),))
    assert match_keywords(list("甲状腺切除术"), kw) == [KeywordSpan(0, 3, SITE)]


def test_longest_match_wins():
    kw = KeywordVocab((("甲状", SITE), ("甲状腺", SITE)))
    assert match_keywords(list("甲状腺切除"), kw) == [KeywordSpan(0, 3, SITE)]


def scan_oracle(text, vocab):
    out = []
    for kind in (SITE, TYPE):
        terms = vocab.terms(kind)
        i = 0
        while i < len(text):
            hits = [t for t in terms if text.startswith(t, i)]
            if hits:
                best = max(hits, key=len)
                out.append(KeywordSpan(i, i + len(best), kind))
                i += len(best)
            else:
                i += 1
    return sorted(out, key=lambda s: (s.start, s.kind))


def test_match_against_exhaustive_scan():
    kw = KeywordVocab((("胆囊", SITE), ("胆", SITE), ("切除", TYPE), ("除术", TYPE), ("检查", TYPE)))
    rng = np.random.default_rng(0)
    for _ in range(300):
        text = "".join(rng.choice(list("胆囊切除术检查"), size=int(rng.integers(1, 10))))
        assert match_keywords(list(text), kw) == scan_oracle(text, kw)
    spans = match_keywords(list("胆囊切除"), kw)
    assert spans == [KeywordSpan(0, 2, SITE), KeywordSpan(2, 4, TYPE)]


def test_match_offset():
    kw = KeywordVocab((("胆囊", SITE),))
    assert match_keywords(list("x胆囊"), kw, offset=5) == [KeywordSpan(6, 8, SITE)]


# input layout ---------------------------------------------------------------------


def test_input_layout(vocab, keywords):
    inp = build_input("胆囊切", "胆管切开", vocab, keywords)
    assert len(inp) == 3 + 3 + 1 + 4 + 1
    toks = [vocab.itos[i] for i in inp.ids]
    assert toks[:3] == [CLS, PS, PT]
    assert toks.count(SEP) == 2 and toks[6] == SEP and toks[-1] == SEP
    assert inp.segments == (0,) * 7 + (1,) * 5


def test_input_rejects_empty(vocab, keywords):
    with pytest.raises(EmptyInputError):
        build_input(" ", "胆囊", vocab, keywords)


# mask -------------------------------------------------------------------------------


def test_mask_matches_hand_construction(vocab, keywords):
    # 0 CLS 1 PS 2 PT 3胆 4囊 5切 6除 7 SEP 8胆 9管 10切 11开 12术 13 SEP
    inp = build_input("胆囊切除", "胆管切开术", vocab, keywords)
    ref = np.ones((14, 14))
    ref[1] = 0
    ref[1, [1, 3, 4, 8, 9]] = 1
    ref[2] = 0
    ref[2, [2, 5, 6, 10, 11]] = 1
    assert np.array_equal(build_mask(inp).numpy(), ref)


def test_mask_no_site_match_is_self_only(vocab, keywords):
    inp = build_input("术", "术", vocab, keywords)
    row = build_mask(inp)[1].numpy()
    assert row.tolist() == [0, 1, 0, 0, 0, 0, 0]


def test_mask_all_text_tokens_are_sites(vocab):
    kw = KeywordVocab((("胆", SITE), ("囊", SITE)))
    inp = build_input("胆囊", "囊胆", vocab, kw)
    row = build_mask(inp)[1].numpy()
    text_positions = [3, 4, 6, 7]
    assert all(row[j] == 1 for j in text_positions + [1])
    assert row.sum() == 5


def test_mask_padding(vocab, keywords):
    inp = build_input("胆囊", "胆囊", vocab, keywords)
    assert len(inp) == 9
    m = build_mask(inp, 11).numpy()
    assert np.array_equal(m[:9, :9], build_mask(inp).numpy())
    assert not m[:9, 9:].any()
    assert np.array_equal(m[9:, 9:], np.eye(2)) and not m[9:, :9].any()


def test_mask_row_support_invariant(vocab, keywords):
    rng = np.random.default_rng(2)
    chars = list("胆囊管切除开术甲状腺")
    for _ in range(50):
        mention = "".join(rng.choice(chars, size=int(rng.integers(1, 8))))
        cand = "".join(rng.choice(chars, size=int(rng.integers(1, 8))))
        inp = build_input(mention, cand, vocab, keywords)
        m = build_mask(inp).numpy()
        for row, kind, pos in ((m[1], SITE, 1), (m[2], TYPE, 2)):
            support = {pos} | {j for s in inp.spans if s.kind == kind for j in range(s.start, s.end)}
            assert set(np.flatnonzero(row)) == support
        others = [i for i in range(len(inp)) if i not in (1, 2)]
        assert m[others].all()


# scoring -----------------------------------------------------------------------------


def test_zero_head_scores_half(kar, vocab):
    for k in ("head.w1", "head.b1", "head.w2", "head.b2"):
        kar.params[k].zero_()
    inputs = [kar.build("胆囊切除", "胆囊切除术"), kar.build("脑膜", "丘脑切开术")]
    assert kar_scores(kar, inputs).tolist() == [0.5, 0.5]


def test_score_independent_of_batch(kar):
    a = kar.build("胆囊切除", "胆囊切除术")
    others = [kar.build("脑膜", "丘脑切开术"), kar.build("胆囊切除", "胆囊切除术"), kar.build("甲", "甲状腺全切除术")]
    alone = kar_score(kar, a)
    assert kar_scores(kar, [a] + others)[0] == alone
    assert kar_scores(kar, others + [a])[-1] == alone


def test_score_matches_composed_oracle(kar):
    inp = kar.build("甲状腺肿物切除术", "甲状腺病损切除术")
    H = oracle_encode(list(inp.ids), kar.params, kar.cfg.n_layers, segments=list(inp.segments),
                      mask=build_mask(inp).numpy())
    head = {k[5:]: v.numpy() for k, v in kar.params.items() if k.startswith("head.")}
    ref = oracle_sigmoid(oracle_ffn(H[:3].mean(axis=0, keepdims=True), head))[0, 0]
    s = kar_score(kar, inp)
    assert 0 < s < 1
    assert abs(s - ref) < 1e-10


def test_overlong_input(vocab, keywords):
    model = KarModel.init(EncoderConfig(vocab_size=len(vocab), **{**TINY, "max_len": 8}), vocab, keywords)
    with pytest.raises(SequenceLengthError):
        kar_score(model, model.build("胆囊切除", "胆囊切除术"))


def _layer1(model, inp, ids):
    p = model.params
    l = len(ids)
    E = p["tok_emb"][torch.tensor(ids)] + p["pos_emb"][:l] + p["seg_emb"][torch.tensor(inp.segments)]
    return transformer_layer(E, layer_params(p, 0), mask=build_mask(inp),
                             renormalize=model.cfg.renormalize_mask, return_weights=True)


def test_ps_row_locality(vocab, keywords):
    # 术 at position 12 is outside the [PS] support; swapping it for 病 alters one input row
    cfg = EncoderConfig(vocab_size=len(vocab), **{**TINY, "renormalize_mask": True})
    model = KarModel.init(cfg, vocab, keywords, seed=1)
    inp = model.build("胆囊切除", "胆管切开术")
    changed = list(inp.ids)
    changed[12] = vocab.stoi["病"]
    h0, _ = _layer1(model, inp, list(inp.ids))
    h1, _ = _layer1(model, inp, changed)
    torch.testing.assert_close(h0[1], h1[1], atol=1e-12, rtol=0)
    assert (h0[0] - h1[0]).abs().max() > 1e-6


def test_ps_row_default_mask_only_rescales(kar, vocab):
    # without renormalization the hidden token still enters the softmax denominator,
    # so visible [PS] weights change by one common factor and hidden ones stay zero
    inp = kar.build("胆囊切除", "胆管切开术")
    changed = list(inp.ids)
    changed[12] = vocab.stoi["病"]
    _, A0 = _layer1(kar, inp, list(inp.ids))
    _, A1 = _layer1(kar, inp, changed)
    support = [1, 3, 4, 8, 9]
    for h in range(A0.shape[0]):
        ratio = A1[h, 1, support] / A0[h, 1, support]
        torch.testing.assert_close(ratio, ratio[0].expand_as(ratio), atol=1e-12, rtol=1e-12)
        assert not A1[h, 1, [j for j in range(14) if j not in support]].any()


def test_warm_start_copies_encoder(vocab, keywords, mtcg):
    enc = {k: v for k, v in mtcg.params.items() if not k.startswith("head.")}
    model = KarModel.init(mtcg.cfg, vocab, keywords, seed=0, encoder=enc)
    assert all(torch.equal(model.params[k], enc[k]) for k in enc)
    model.params["tok_emb"].add_(1.0)
    assert not torch.equal(model.params["tok_emb"], enc["tok_emb"])
    bad = dict(enc, tok_emb=torch.zeros(3, 3, dtype=DTYPE))
    with pytest.raises(DimensionError):
        KarModel.init(mtcg.cfg, vocab, keywords, encoder=bad)


def test_model_roundtrip(tmp_path, kar):
    kar.save(tmp_path / "kar")
    again = KarModel.load(tmp_path / "kar")
    inp = kar.build("胆囊切除", "胆囊切除术")
    assert again.keywords == kar.keywords
    assert kar_score(again, inp) == kar_score(kar, inp)


# loss ---------------------------------------------------------------------------------


def test_loss_at_half():
    assert kar_loss(0.5, 1).item() == pytest.approx(math.log(2), abs=1e-15)
    assert kar_loss(0.5, 0).item() == pytest.approx(math.log(2), abs=1e-15)


def test_loss_vanishes_at_certainty():
    assert kar_loss(1 - 1e-15, 1).item() < 1e-14
    assert kar_loss(1e-15, 0).item() < 1e-14


def test_loss_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        v = kar_loss(torch.tensor([0.0, 1.0], dtype=DTYPE), torch.tensor([1.0, 0.0], dtype=DTYPE))
    assert torch.isfinite(v).all() and (v > 0).all()
    assert "clamped" in caplog.text


@pytest.mark.parametrize("p, y", [(0.2, 1), (0.7, 0), (0.4, 1), (0.9, 0)])
def test_loss_derivative_matches_finite_difference(p, y):
    x = torch.tensor(p, dtype=DTYPE, requires_grad=True)
    kar_loss(x, y).backward()
    h = 1e-6
    fd = (kar_loss(p + h, y).item() - kar_loss(p - h, y).item()) / (2 * h)
    assert x.grad.item() == pytest.approx(fd, rel=1e-7)
    assert x.grad.item() == pytest.approx(-y / p + (1 - y) / (1 - p), rel=1e-12)


def test_logit_form_equals_probability_form():
    z = torch.linspace(-6, 6, 25, dtype=DTYPE)
    y = (torch.arange(25) % 2).to(DTYPE)
    ref = kar_loss(torch.sigmoid(z), y)
    torch.testing.assert_close(F.binary_cross_entropy_with_logits(z, y, reduction="none"), ref, atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(3))
def test_ranker_gradient_check(seed):
    f, params = kar_loss_case(seed)
    assert gradient_check(f, params, max_coords=6, seed=seed) < 1e-3


# training pairs -------------------------------------------------------------------------


def recount(mtcg, corpus, kb, k):
    from termnorm.mtcg import KbIndex, embed_corpus

    lists = KbIndex.build(mtcg, kb).recall(embed_corpus(mtcg, [r.text for r in corpus]), k)
    total = 0
    for rec, cl in zip(corpus, lists):
        total += len(cl.codes) + sum(g not in cl.codes for g in rec.codes)
    return total


@pytest.mark.parametrize("k", [1, 3, 7])
def test_pair_counts_and_labels(mtcg, corpus, kb, k):
    pairs = make_training_pairs(mtcg, corpus, kb, k=k)
    assert len(pairs) == recount(mtcg, corpus, kb, k)
    for p in pairs:
        assert p.label == int(p.code in corpus[p.mention].codes)
    for i, rec in enumerate(corpus):
        assert {p.code for p in pairs if p.mention == i and p.label} == set(rec.codes)
    assert len(make_training_pairs(mtcg, corpus, kb, k=k, append_missed=False)) == len(corpus) * k


def test_gold_at_rank_one(mtcg, kb):
    corpus = [MentionRecord("丘脑切开术", ("01.4101",))]
    pairs = make_training_pairs(mtcg, corpus, kb, k=5)
    assert pairs[0] == PairExample(0, "01.4101", 1)
    assert [p.label for p in pairs] == [1, 0, 0, 0, 0]


def test_pairs_roundtrip(tmp_path):
    pairs = [PairExample(0, "01.3100", 1), PairExample(3, "51.2200", 0)]
    save_pairs(pairs, tmp_path / "p.jsonl")
    assert load_pairs(tmp_path / "p.jsonl") == pairs


# training ------------------------------------------------------------------------------------


def _pairs(corpus, kb):
    return [PairExample(i, c, int(c in r.codes)) for i, r in enumerate(corpus) for c in kb.codes]


def test_zero_lr_leaves_weights(kar, corpus, kb):
    before = {k: v.clone() for k, v in kar.params.items()}
    train_kar(kar, _pairs(corpus, kb), corpus, kb, KarTrainConfig(lr=0.0, weight_decay=0.0, epochs=1, batch_size=8))
    assert all(torch.equal(before[k], kar.params[k]) for k in before)


def test_training_reproducible(vocab, keywords, corpus, kb):
    finals = []
    for _ in range(2):
        model = KarModel.init(EncoderConfig(vocab_size=len(vocab), **TINY), vocab, keywords, seed=0)
        train_kar(model, _pairs(corpus, kb), corpus, kb, KarTrainConfig(lr=1e-3, epochs=2, batch_size=8))
        finals.append(model.params)
    assert all(torch.equal(finals[0][k], finals[1][k]) for k in finals[0])


def test_loss_decreases(vocab, keywords, corpus, kb):
    drops = []
    for seed in range(3):
        model = KarModel.init(EncoderConfig(vocab_size=len(vocab), **TINY), vocab, keywords, seed=seed)
        hist = train_kar(model, _pairs(corpus, kb), corpus, kb, KarTrainConfig(lr=3e-3, epochs=8, batch_size=8, seed=seed))
        drops.append(hist[0] - hist[-1])
    assert np.median(drops) > 0


def test_no_pairs(kar, corpus, kb):
    with pytest.raises(ValueError):
        train_kar(kar, [], corpus, kb, KarTrainConfig())
