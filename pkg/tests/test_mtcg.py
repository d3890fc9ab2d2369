import logging
import math

import numpy as np
import pytest
import torch

from helpers import mtcg_loss_case
from termnorm.encoder import EmptyInputError, encode, mean_pool, tokenize
from termnorm.kernel import DTYPE, DimensionError, OptimizerState, backward, gradient_check
from termnorm.mtcg import (
    KbIndex,
    MtcgTrainConfig,
    build_triples,
    class_probs,
    embed_corpus,
    euclidean,
    implication_loss,
    predict_implication,
    recall_batch,
    recall_candidates,
    total_loss,
    train_epoch,
    train_mtcg,
    triplet_loss,
)
from termnorm.negatives import sample_random


def t(*xs):
    return torch.tensor(xs, dtype=DTYPE)


# distances and losses ------------------------------------------------------------


def test_euclidean_cases():
    assert euclidean(t(1.0, 2.0), t(1.0, 2.0)).item() == 0.0
    assert euclidean(t(0.0, 0.0), t(3.0, 4.0)).item() == 5.0
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=7), rng.normal(size=7)
    assert euclidean(torch.from_numpy(u), torch.from_numpy(v)).item() == pytest.approx(
        math.sqrt(((u - v) ** 2).sum()), abs=1e-12
    )
    with pytest.raises(DimensionError):
        euclidean(t(1.0), t(1.0, 2.0))


def test_triplet_loss_cases():
    assert triplet_loss(t(0.0, 0.0), t(0.0, 0.0), t(2.0, 0.0), 1.0).item() == 0.0
    assert triplet_loss(t(1.0, 1.0), t(1.0, 1.0), t(1.0, 1.0), 1.0).item() == 1.0
    assert triplet_loss(t(0.0, 0.0), t(0.0, 2.0), t(1.0, 0.0), 1.0).item() == 2.0
    with pytest.raises(ValueError):
        triplet_loss(t(0.0), t(0.0), t(0.0), 0.0)


def test_triplet_loss_zero_iff_margin_satisfied():
    rng = np.random.default_rng(1)
    for _ in range(200):
        m, p, n = (torch.from_numpy(rng.normal(size=3)) for _ in range(3))
        loss = triplet_loss(m, p, n, 0.5).item()
        assert loss >= 0
        assert (loss == 0) == (euclidean(m, p).item() + 0.5 <= euclidean(m, n).item())


def test_implication_loss_cases():
    one_hot = t(0.0, 800.0, 0.0).unsqueeze(0)
    assert implication_loss(one_hot, torch.tensor([2])).item() == 0.0
    uniform = torch.zeros(1, 3, dtype=DTYPE)
    assert implication_loss(uniform, torch.tensor([3])).item() == pytest.approx(math.log(3), abs=1e-15)
    z = np.array([0.3, -1.2, 2.0])
    p = np.exp(z) / np.exp(z).sum()
    assert implication_loss(torch.from_numpy(z)[None], torch.tensor([1])).item() == pytest.approx(-math.log(p[0]))


def test_total_loss_is_sum():
    assert total_loss(t(0.0), t(0.0)).item() == 0.0
    assert total_loss(t(1.5), t(0.5)).item() == 2.0


def test_total_gradient_is_sum_of_component_gradients():
    f, params = mtcg_loss_case(0)
    grads = []
    for part in range(3):
        leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
        grads.append(backward(f(leaves, part), leaves))
    for k in params:
        torch.testing.assert_close(grads[0][k], grads[1][k] + grads[2][k], atol=1e-12, rtol=0)
    assert gradient_check(lambda p: f(p, 0), params, max_coords=4) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_full_loss_gradient_check(seed):
    f, params = mtcg_loss_case(seed)
    assert gradient_check(f, params, max_coords=6, seed=seed) < 1e-3


# training ------------------------------------------------------------------------


def test_build_triples_pairs_each_gold_with_each_negative(corpus):
    negs = {i: ["01.3100", "01.4101"] for i in range(len(corpus))}
    triples = build_triples(corpus, negs)
    assert len(triples) == sum(2 * r.implication for r in corpus)
    assert (2, "51.5900", "01.4101") in triples


def test_missing_negatives(corpus):
    with pytest.raises(ValueError):
        build_triples(corpus, {0: ["01.3100"]})


def _epoch(model, corpus, kb, lr, seed=0):
    negs = sample_random(kb, [set(r.codes) for r in corpus], 2, seed).negatives
    cfg = MtcgTrainConfig(lr=lr, k_n=2, batch_size=4, seed=seed)
    return train_epoch(model, corpus, kb, negs, cfg, OptimizerState(lr=lr, weight_decay=0.0), np.random.default_rng(seed))


def test_zero_lr_leaves_weights(mtcg, corpus, kb):
    before = {k: v.clone() for k, v in mtcg.params.items()}
    stats = _epoch(mtcg, corpus, kb, lr=0.0)
    assert stats.n_triples == sum(2 * r.implication for r in corpus)
    assert all(torch.equal(before[k], mtcg.params[k]) for k in before)


def test_training_is_bitwise_reproducible(vocab, corpus, kb):
    from conftest import TINY
    from termnorm.encoder import EncoderConfig
    from termnorm.mtcg import MtcgModel
    from termnorm.negatives import make_sampler

    finals = []
    for _ in range(2):
        model = MtcgModel.init(EncoderConfig(vocab_size=len(vocab), **TINY), vocab, seed=0)
        cfg = MtcgTrainConfig(lr=1e-3, k_n=2, epochs=2, batch_size=4, seed=0)
        train_mtcg(model, corpus, kb, cfg, make_sampler("online", kb, corpus, 2, 0), online=True)
        finals.append(model.params)
    assert all(torch.equal(finals[0][k], finals[1][k]) for k in finals[0])


def test_online_training_calls_back_with_fresh_negatives(mtcg, corpus, kb):
    from termnorm.negatives import make_sampler, sample_online

    seen = []
    cfg = MtcgTrainConfig(lr=1e-3, k_n=2, epochs=2, batch_size=4)

    def on_epoch(epoch, model, negatives):
        seen.append((epoch, negatives))
        assert negatives == sample_online(model, corpus, kb, 2).negatives

    train_mtcg(mtcg, corpus, kb, cfg, make_sampler("online", kb, corpus, 2, 0), online=True, on_epoch=on_epoch)
    assert [e for e, _ in seen] == [0, 1]


# embedding and recall -----------------------------------------------------------


def test_embed_single_equals_mean_pool(mtcg):
    seq = tokenize("胆囊切除", mtcg.vocab)
    ids = torch.tensor([seq.ids])
    pad = torch.ones(1, len(seq), dtype=DTYPE)
    ref = mean_pool(encode(mtcg.params, mtcg.cfg, ids, pad), pad).numpy()
    out = embed_corpus(mtcg, ["胆囊切除"])
    assert out.shape == (1, mtcg.cfg.d)
    assert np.array_equal(out, ref)


def test_embed_batched_equals_sequential(mtcg, kb):
    texts = kb.texts + ["胆囊切除", "胆囊切除"]
    batched = embed_corpus(mtcg, texts)
    seq = np.vstack([embed_corpus(mtcg, [x]) for x in texts])
    assert np.array_equal(batched, seq)
    assert np.array_equal(batched[-1], batched[-2])


def test_embed_empty(mtcg):
    with pytest.raises(EmptyInputError):
        embed_corpus(mtcg, [])


def brute_recall(q, X, codes, k):
    d = [math.sqrt(sum((a - b) ** 2 for a, b in zip(q, x))) for x in X]
    order = sorted(range(len(codes)), key=lambda j: (d[j], codes[j]))
    return [(codes[j], d[j]) for j in order[:k]]


def test_recall_exact_hit_first():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 4))
    codes = [f"{i:03d}" for i in range(20)]
    cl = recall_candidates(X[7], X, codes, 5)
    assert cl.codes[0] == "007" and cl.distances[0] == 0.0


def test_recall_small_kb_all_sorted():
    X = np.array([[3.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    cl = recall_candidates(np.zeros(2), X, ["a", "b", "c"], 3)
    assert cl.codes == ["b", "c", "a"] and cl.distances == [1.0, 2.0, 3.0]


def test_recall_ties_break_by_code():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    assert recall_candidates(np.zeros(2), X, ["d", "b", "c", "a"], 4).codes == ["a", "b", "c", "d"]


def test_recall_matches_brute_force_oracle():
    rng = np.random.default_rng(3)
    X = rng.integers(-2, 3, size=(200, 6)).astype(float)  # integer grid: exact ties
    codes = [f"{c:03d}.{s:02d}" for c, s in zip(rng.permutation(200), rng.integers(0, 99, 200))]
    for _ in range(20):
        q = rng.integers(-2, 3, size=6).astype(float)
        cl = recall_candidates(q, X, codes, 10)
        ref = brute_recall(q, X, codes, 10)
        assert cl.codes == [c for c, _ in ref]
        np.testing.assert_allclose(cl.distances, [d for _, d in ref], atol=1e-12)
        assert all(np.diff(cl.distances) >= 0)


def test_recall_clamps_k(caplog):
    X = np.eye(3)
    with caplog.at_level(logging.WARNING):
        lists = recall_batch(np.zeros((1, 3)), X, ["a", "b", "c"], 10)
    assert len(lists[0].candidates) == 3
    assert "clamping" in caplog.text


# implication head ----------------------------------------------------------------


def test_biased_head_predicts_class_one(mtcg):
    for k in ("head.w1", "head.w2", "head.b1"):
        mtcg.params[k].zero_()
    mtcg.params["head.b2"][:] = t(2.0, 0.0, 0.0)
    assert predict_implication(mtcg, ["胆囊", "甲状腺切除术+胆囊切除术"]) == [1, 1]


def test_ties_go_to_smaller_class(mtcg):
    for k in ("head.w1", "head.w2", "head.b1", "head.b2"):
        mtcg.params[k].zero_()
    assert predict_implication(mtcg, ["胆囊"]) == [1]


def test_class_probs_match_softmax_oracle(mtcg):
    rng = np.random.default_rng(4)
    cls = rng.normal(size=(5, mtcg.cfg.d))
    h = {k: v.numpy() for k, v in mtcg.head().items()}
    z = np.maximum(0, cls @ h["w1"] + h["b1"]) @ h["w2"] + h["b2"]
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    np.testing.assert_allclose(class_probs(mtcg, cls), p, atol=1e-12)


# index persistence -----------------------------------------------------------------


def test_kb_index_roundtrip_and_stale_hash(tmp_path, mtcg, kb):
    from termnorm.corpus import KnowledgeBase, Terminology

    idx = KbIndex.build(mtcg, kb)
    idx.save(tmp_path / "idx")
    again = KbIndex.load(tmp_path / "idx", kb)
    assert again.codes == kb.codes and np.array_equal(again.embeddings, idx.embeddings)
    changed = KnowledgeBase(kb.terms[:-1] + [Terminology(kb.codes[-1], "胆管切除术")])
    with pytest.raises(ValueError, match="stale"):
        KbIndex.load(tmp_path / "idx", changed)
