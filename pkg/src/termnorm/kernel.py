"""Numeric building blocks shared by the candidate generator and the ranker.

Everything here runs in float64 on CPU. Forward ops are plain functions over
tensors; gradients come from torch autograd and are verified against central
finite differences by :func:`gradient_check`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

DTYPE = torch.float64
LN_EPS = 1e-12


class DimensionError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


def validate_mask(mask: torch.Tensor, l: int) -> None:
    _check(mask.shape[-2:] == (l, l), f"mask shape {tuple(mask.shape)} does not match length {l}")
    if not torch.all((mask == 0) | (mask == 1)):
        raise InvalidMaskError("mask entries must be exactly 0 or 1")
    if torch.any(mask.sum(-1) == 0):
        raise InvalidMaskError("mask has a row with no visible position")


def _project(E: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """``E`` times each head's ``(d, d_head)`` matrix, as ``(..., n, l, d_head)``.

    Heads are packed into one ``(d, n*d_head)`` product.
    """
    n, d, d_head = w.shape
    packed = w.permute(1, 0, 2).reshape(d, n * d_head)
    out = (E @ packed).reshape(*E.shape[:-1], n, d_head)
    return out.transpose(-3, -2)


def attention_weights(
    E: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    mask: torch.Tensor | None = None,
    key_padding: torch.Tensor | None = None,
    renormalize: bool = False,
) -> torch.Tensor:
    """Per-head attention weights, shape ``(..., n, l, l)``.

    ``w_q``/``w_k`` are stacked per head as ``(n, d, d_head)``. ``key_padding``
    (``(..., l)``, 1 on real tokens) is applied before the softmax so padded
    keys get exactly zero weight. ``mask`` is multiplied in after the softmax.
    """
    d_head = w_q.shape[-1]
    Q = _project(E, w_q)
    K = _project(E, w_k)
    scores = Q @ K.transpose(-1, -2) / math.sqrt(d_head)
    if key_padding is not None:
        blocked = (key_padding == 0).unsqueeze(-2).unsqueeze(-3)
        scores = scores.masked_fill(blocked, float("-inf"))
    A = torch.softmax(scores, dim=-1)
    if mask is not None:
        A = A * mask.unsqueeze(-3)
        if renormalize:
            A = A / A.sum(-1, keepdim=True)
    return A


def multi_head_attention(
    E: torch.Tensor,
    p: Mapping[str, torch.Tensor],
    mask: torch.Tensor | None = None,
    key_padding: torch.Tensor | None = None,
    renormalize: bool = False,
    return_weights: bool = False,
):
    """Multi-head self attention over ``E`` of shape ``(..., l, d)``.

    ``p`` holds ``w_q``, ``w_k``, ``w_v`` of shape ``(n, d, d_head)`` and
    ``w_o`` of shape ``(d, d)``.
    """
    l, d = E.shape[-2:]
    n, d_in, d_head = p["w_q"].shape
    _check(d_in == d, f"input width {d} does not match projection width {d_in}")
    _check(n * d_head == d, f"heads {n} x d_head {d_head} != d {d}")
    _check(tuple(p["w_o"].shape) == (d, d), "w_o must be d x d")
    for name in ("w_k", "w_v"):
        _check(p[name].shape == p["w_q"].shape, f"{name} shape differs from w_q")
    if mask is not None:
        validate_mask(mask, l)
    A = attention_weights(E, p["w_q"], p["w_k"], mask, key_padding, renormalize)
    V = _project(E, p["w_v"])
    heads = A @ V
    concat = heads.transpose(-3, -2).reshape(*E.shape[:-1], d)
    out = concat @ p["w_o"]
    if return_weights:
        return out, A
    return out


def ffn(X: torch.Tensor, p: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """``max(0, X W1 + b1) W2 + b2`` row-wise.

    Also used for the classification and scoring heads, whose output width
    differs from the input width.
    """
    _check(p["w1"].shape[0] == X.shape[-1], "w1 rows must equal input width")
    _check(p["b1"].shape == (p["w1"].shape[1],), "b1 width mismatch")
    _check(p["w2"].shape[0] == p["w1"].shape[1], "w2 rows must equal d_ff")
    _check(p["b2"].shape == (p["w2"].shape[1],), "b2 width mismatch")
    return torch.relu(X @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def layer_norm(X: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    mu = X.mean(-1, keepdim=True)
    var = ((X - mu) ** 2).mean(-1, keepdim=True)
    return (X - mu) / torch.sqrt(var + LN_EPS) * scale + shift


def transformer_layer(
    E: torch.Tensor,
    p: Mapping[str, torch.Tensor],
    mask: torch.Tensor | None = None,
    key_padding: torch.Tensor | None = None,
    renormalize: bool = False,
    return_weights: bool = False,
):
    """Post-norm encoder block: ``LN(E + MHA(E))`` then ``LN(h + FFN(h))``."""
    att, A = multi_head_attention(
        E, p, mask=mask, key_padding=key_padding, renormalize=renormalize, return_weights=True
    )
    h = layer_norm(E + att, p["ln1_scale"], p["ln1_shift"])
    out = layer_norm(h + ffn(h, p), p["ln2_scale"], p["ln2_shift"])
    if return_weights:
        return out, A
    return out


def init_layer_params(d: int, n_heads: int, d_ff: int, gen: torch.Generator) -> dict[str, torch.Tensor]:
    _check(d % n_heads == 0, f"d={d} is not divisible by n_heads={n_heads}")
    d_head = d // n_heads

    def normal(*shape, std):
        return torch.randn(*shape, generator=gen, dtype=DTYPE) * std

    std = 1.0 / math.sqrt(d)
    return {
        "w_q": normal(n_heads, d, d_head, std=std),
        "w_k": normal(n_heads, d, d_head, std=std),
        "w_v": normal(n_heads, d, d_head, std=std),
        "w_o": normal(d, d, std=std),
        "w1": normal(d, d_ff, std=std),
        "b1": torch.zeros(d_ff, dtype=DTYPE),
        "w2": normal(d_ff, d, std=1.0 / math.sqrt(d_ff)),
        "b2": torch.zeros(d, dtype=DTYPE),
        "ln1_scale": torch.ones(d, dtype=DTYPE),
        "ln1_shift": torch.zeros(d, dtype=DTYPE),
        "ln2_scale": torch.ones(d, dtype=DTYPE),
        "ln2_shift": torch.zeros(d, dtype=DTYPE),
    }


# ---------------------------------------------------------------------------
# gradients


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every tensor in ``params``.

    Parameters that do not influence the loss get a zero gradient.
    """
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(
        loss, [params[k] for k in names], allow_unused=True, retain_graph=False
    )
    return {
        k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)
    }


def gradient_check(
    f: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` maps a parameter dict to a scalar tensor. With ``max_coords`` only a
    seeded random subset of coordinates per parameter is probed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: v.detach().clone().to(DTYPE) for k, v in params.items()}
    leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    loss = f(leaves)
    if not torch.isfinite(loss):
        raise NumericError("loss is not finite")
    analytic = backward(loss, leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, value in base.items():
            flat = value.reshape(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = np.sort(rng.choice(flat.numel(), size=max_coords, replace=False))
            g_flat = analytic[name].reshape(-1)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + h
                plus = f(base).item()
                flat[i] = orig - h
                minus = f(base).item()
                flat[i] = orig
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
                numeric = (plus - minus) / (2 * h)
                a = g_flat[i].item()
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
) -> None:
    """One AdamW update, in place on ``params`` and ``state``.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` before the Adam step.
    """
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            _check(g.shape == p.shape, f"gradient shape mismatch for {name}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            if state.weight_decay:
                p.mul_(1 - state.lr * state.weight_decay)
            p.sub_(state.lr * (m / bc1) / (torch.sqrt(v / bc2) + state.eps))


# ---------------------------------------------------------------------------
# serialization


def save_params(
    directory: str | Path, params: Mapping[str, torch.Tensor], meta: Mapping | None = None
) -> None:
    """Write ``metadata.json`` plus one little-endian float64 file per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, t in params.items():
        arr = t.detach().cpu().numpy().astype("<f8", copy=False)
        (directory / f"{name}.f64").write_bytes(np.ascontiguousarray(arr).tobytes())
        shapes[name] = list(arr.shape)
    payload = {"shapes": shapes, **(dict(meta) if meta else {})}
    (directory / "metadata.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_params(directory: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    meta = json.loads((directory / "metadata.json").read_text(encoding="utf-8"))
    params = {}
    for name, shape in meta["shapes"].items():
        arr = np.frombuffer((directory / f"{name}.f64").read_bytes(), dtype="<f8")
        params[name] = torch.from_numpy(arr.reshape(shape).astype(np.float64))
    return params, meta
