"""Tiny models and loss closures shared by unit and acceptance tests."""
import numpy as np
import torch

from termnorm.corpus import SITE, TYPE, KeywordVocab
from termnorm.encoder import EncoderConfig, Vocabulary
from termnorm.kar import KarModel
from termnorm.kernel import DTYPE
from termnorm.mtcg import MtcgModel, batch_loss

ALPHABET = "甲状腺肾上胆囊管切除开术检查"
GRAD_CFG = dict(n_layers=2, d=16, n_heads=2, d_ff=24, max_len=16)
GRAD_KEYWORDS = KeywordVocab((("甲状腺", SITE), ("胆囊", SITE), ("切除", TYPE), ("检查", TYPE)))


def random_texts(rng, n, lo=2, hi=6):
    return ["".join(rng.choice(list(ALPHABET), size=int(rng.integers(lo, hi + 1)))) for _ in range(n)]


def _jitter(params, seed):
    # move biases and norm parameters off their initial values so every
    # parameter has a generic, non-degenerate gradient
    g = torch.Generator().manual_seed(seed + 1000)
    for k, v in params.items():
        if k.endswith(("b1", "b2", "shift")):
            params[k] = torch.randn(v.shape, generator=g, dtype=DTYPE) * 0.1
        elif k.endswith("scale"):
            params[k] = 1 + torch.randn(v.shape, generator=g, dtype=DTYPE) * 0.1
    return params


def mtcg_loss_case(seed, batch=3):
    """(loss closure, params) for the full candidate-generator loss on a tiny config.

    Wrapped sequences stay within 8 tokens; the margin is large enough that
    every triplet term is active (no hinge kink).
    """
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(list(ALPHABET))
    model = MtcgModel.init(EncoderConfig(vocab_size=len(vocab), **GRAD_CFG), vocab, seed=seed)
    _jitter(model.params, seed)
    mentions = random_texts(rng, batch)
    positives = random_texts(rng, batch)
    negatives = random_texts(rng, batch)
    labels = [int(x) for x in rng.integers(1, 4, size=batch)]

    def f(p, part=0):
        # part 0: total, 1: triplet term, 2: implication term
        return batch_loss(model, p, mentions, positives, negatives, labels, margin=50.0)[part]

    return f, model.params


def kar_loss_case(seed, batch=3):
    """(loss closure, params) for the mean ranker BCE on a tiny config (inputs ≤ 8 tokens)."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(list(ALPHABET))
    model = KarModel.init(EncoderConfig(vocab_size=len(vocab), **GRAD_CFG), vocab, GRAD_KEYWORDS, seed=seed)
    _jitter(model.params, seed)
    mentions = ["胆囊", "切除", "检查", "囊切", "甲"]
    candidates = ["胆", "切", "查"]
    inputs = [
        model.build(mentions[int(rng.integers(len(mentions)))], candidates[int(rng.integers(len(candidates)))])
        for _ in range(batch)
    ]
    y = torch.tensor(rng.integers(0, 2, size=batch), dtype=DTYPE)

    def f(p):
        from termnorm.kar import kar_loss

        return kar_loss(torch.sigmoid(model.logits(inputs, p)), y).mean()

    return f, model.params


TINY_RUN = {
    "encoder": dict(n_layers=1, d=16, n_heads=2, d_ff=24, max_len=48),
    "mtcg": dict(epochs=2, lr=1e-3, batch_size=16),
    "kar": dict(epochs=1, lr=1e-3, batch_size=32),
}
TINY_SPEC = dict(kb_size=60, n_sites=3, mention_count=150)


def run_cli_pipeline(root, seed=0, strategy="online"):
    """gen-data → train-mtcg → mine-negatives → train-kar → normalize → eval under ``root``.

    Returns ``{relative path: bytes}`` for every file written.
    """
    import json
    from pathlib import Path

    from termnorm.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "run.json").write_text(json.dumps(TINY_RUN), encoding="utf-8")
    (root / "spec.json").write_text(json.dumps(TINY_SPEC), encoding="utf-8")
    data, model = root / "data", root / "model"
    common = ["--seed", str(seed), "--config", str(root / "run.json"), "--model-dir", str(model)]
    steps = [
        ["gen-data", "--spec", str(root / "spec.json"), "--out", str(data)],
        ["train-mtcg", "--kb", str(data / "kb.tsv"), "--train", str(data / "train.jsonl"),
         "--keywords", str(data / "keywords.tsv"), "--neg-strategy", strategy],
        ["mine-negatives", "--kb", str(data / "kb.tsv"), "--train", str(data / "train.jsonl"),
         "--strategy", "online", "--out", str(root / "negatives.jsonl")],
        ["train-kar", "--kb", str(data / "kb.tsv"), "--train", str(data / "train.jsonl"),
         "--keywords", str(data / "keywords.tsv")],
        ["normalize", "--kb", str(data / "kb.tsv"), "--input", str(data / "test.jsonl"),
         "--out", str(root / "results.jsonl")],
        ["eval", "--kb", str(data / "kb.tsv"), "--results", str(root / "results.jsonl"),
         "--gold", str(data / "test.jsonl"), "--baselines", "--train", str(data / "train.jsonl"),
         "--out", str(root / "report.json")],
    ]
    for step in steps:
        code = main(common + step)
        if code != 0:
            raise RuntimeError(f"step {step[0]} exited {code}")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
