"""Vectorized, tape-free mirror of the network and losses (pure numpy).

This is the second route through the exact same math as
:mod:`retrack.model` / :mod:`retrack.geometry` / :mod:`retrack.evidence`:
batched over samples, no gradient bookkeeping.  It exists for three jobs —
encoding query features at evaluation scale, serving as the independent
evaluation side of finite-difference gradient checks, and pinning the tape
forward in equality tests.  Any formula change must land in both routes.

Parameters are plain arrays (``tensor.data``); batches are (B, Q, D).
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import _sigmoid_np, _softplus_np
from .config import RunConfig

__all__ = [
    "normalize_rows_np",
    "compose_np",
    "disentangle_np",
    "point_weights_np",
    "forward_np",
    "pair_sims_np",
    "diag_sims_np",
    "reliability_np",
    "losses_np",
]


def normalize_rows_np(x: np.ndarray, eps: float) -> np.ndarray:
    """Guarded row normalization over the last axis (zero rows stay zero)."""
    ss = (x * x).sum(axis=-1, keepdims=True)
    return x / np.sqrt(ss + eps * eps)


def _layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def _softmax_last_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _attention_np(
    p: dict[str, np.ndarray], prefix: str, q_in: np.ndarray, kv_in: np.ndarray, heads: int
) -> np.ndarray:
    dh = q_in.shape[-1] // heads
    inv = 1.0 / math.sqrt(dh)
    ctx = []
    for h in range(heads):
        qh = q_in @ p[f"{prefix}.wq{h}"]
        kh = kv_in @ p[f"{prefix}.wk{h}"]
        vh = kv_in @ p[f"{prefix}.wv{h}"]
        weights = _softmax_last_np(qh @ kh.swapaxes(-1, -2) * inv)
        ctx.append(weights @ vh)
    return np.concatenate(ctx, axis=-1) @ p[f"{prefix}.wo"]


def _ffn_np(p: dict[str, np.ndarray], prefix: str, x: np.ndarray) -> np.ndarray:
    hidden = _softplus_np(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return hidden @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def compose_np(p: dict[str, np.ndarray], f_r: np.ndarray, f_m: np.ndarray, cfg: RunConfig) -> np.ndarray:
    attn = _attention_np(p, "composer.attn", f_r, f_m, cfg.heads)
    h1 = _layer_norm_np(f_r + attn, p["composer.ln1.gain"], p["composer.ln1.bias"], cfg.ln_eps)
    h2 = h1 + _ffn_np(p, "composer.ffn", h1)
    return _layer_norm_np(h2, p["composer.ln2.gain"], p["composer.ln2.bias"], cfg.ln_eps)


def disentangle_np(p: dict[str, np.ndarray], f_query: np.ndarray, f_c: np.ndarray, cfg: RunConfig) -> np.ndarray:
    lnq = _layer_norm_np(f_query, p["decoder.lnq.gain"], p["decoder.lnq.bias"], cfg.ln_eps)
    lnkv = _layer_norm_np(f_c, p["decoder.lnkv.gain"], p["decoder.lnkv.bias"], cfg.ln_eps)
    a = f_query + _attention_np(p, "decoder.attn", lnq, lnkv, cfg.heads)
    lnf = _layer_norm_np(a, p["decoder.lnf.gain"], p["decoder.lnf.bias"], cfg.ln_eps)
    return a + _ffn_np(p, "decoder.ffn", lnf)


def point_weights_np(p: dict[str, np.ndarray], f_c: np.ndarray, f_branch: np.ndarray, stream: str) -> np.ndarray:
    sim = f_c @ f_branch.swapaxes(-1, -2)
    hidden = _softplus_np(sim @ p[f"{stream}.w1"] + p[f"{stream}.b1"])
    return _sigmoid_np(hidden @ p[f"{stream}.w2"] + p[f"{stream}.b2"])


def forward_np(
    p: dict[str, np.ndarray],
    f_r: np.ndarray,
    f_m: np.ndarray,
    f_t: np.ndarray,
    cfg: RunConfig,
) -> dict[str, np.ndarray | None]:
    """Batched forward through composer, decoder, gates, and anchors."""
    f_c = compose_np(p, f_r, f_m, cfg)
    p_r = p_m = w_r = w_m = None
    a_r = a_m = f_c
    if not cfg.wo_c_ref:
        p_r = f_r if cfg.wo_scd else disentangle_np(p, f_r, f_c, cfg)
        w_r = point_weights_np(p, f_c, f_r, "wp_r")
        a_r = f_c + w_r * p_r
    if not cfg.wo_c_mod:
        p_m = f_m if cfg.wo_scd else disentangle_np(p, f_m, f_c, cfg)
        w_m = point_weights_np(p, f_c, f_m, "wp_m")
        a_m = f_c + w_m * p_m
    terms = []
    if not cfg.wo_a_ref:
        terms.append(a_r - f_c)
    if not cfg.wo_a_mod:
        terms.append(a_m - f_c)
    a_c = sum(terms) if terms else np.zeros_like(f_c)
    return {
        "f_c": f_c, "p_r": p_r, "p_m": p_m, "w_r": w_r, "w_m": w_m,
        "a_r": a_r, "a_m": a_m, "a_c": a_c, "a_t": f_t - f_c,
    }


def _prep_np(x: np.ndarray, cfg: RunConfig) -> np.ndarray:
    if cfg.sim_mode == "pooled_cosine":
        x = x.mean(axis=-2, keepdims=True)
    return normalize_rows_np(x, cfg.norm_eps)


def pair_sims_np(xs: np.ndarray, ys: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """All-pairs similarity matrix (A, B) between two feature stacks."""
    px = _prep_np(xs, cfg)
    py = _prep_np(ys, cfg)
    if cfg.sim_mode == "pooled_cosine":
        return px[:, 0, :] @ py[:, 0, :].T
    dots = np.einsum("aqd,bkd->abqk", px, py)
    return dots.max(axis=3).mean(axis=2)


def diag_sims_np(xs: np.ndarray, ys: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """S(x_i, y_i) for aligned stacks, shape (B,)."""
    px = _prep_np(xs, cfg)
    py = _prep_np(ys, cfg)
    if cfg.sim_mode == "pooled_cosine":
        return (px[:, 0, :] * py[:, 0, :]).sum(axis=-1)
    dots = np.einsum("bqd,bkd->bqk", px, py)
    return dots.max(axis=2).mean(axis=1)


def _infonce_np(sims: np.ndarray, tau: float) -> float:
    logits = sims / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float((lse - np.diagonal(logits)).mean())


def reliability_np(anchor: np.ndarray, f_t: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Channel reliability per sample, shape (B,)."""
    ah = normalize_rows_np(anchor, cfg.norm_eps)
    th = normalize_rows_np(f_t, cfg.norm_eps)
    best = np.einsum("bqd,bkd->bqk", ah, th).max(axis=2)
    z = best / cfg.tau
    if cfg.evi_activation == "exp":
        e = np.exp(z)
    elif cfg.evi_activation == "relu":
        e = np.maximum(z, 0.0)
    else:
        e = _softplus_np(z)
    q = e.shape[1]
    return e.sum(axis=1) / (e.sum(axis=1) + q)


def losses_np(
    p: dict[str, np.ndarray],
    f_r: np.ndarray,
    f_m: np.ndarray,
    f_t: np.ndarray,
    cfg: RunConfig,
) -> dict[str, float]:
    """The loss triple and weighted total, honoring the ablation switches."""
    fwd = forward_np(p, f_r, f_m, f_t, cfg)
    dis_on = not cfg.wo_ldis
    dir_on = (not cfg.wo_ldir) and cfg.kappa != 0.0
    evi_on = (not cfg.wo_levi) and cfg.lam != 0.0

    l_dis = l_dir = l_evi = 0.0
    diag = None
    if dis_on:
        sims = pair_sims_np(fwd["f_c"], f_t, cfg)
        l_dis = _infonce_np(sims, cfg.tau)
        diag = np.diagonal(sims)
    if dir_on:
        l_dir = _infonce_np(pair_sims_np(fwd["a_c"], fwd["a_t"], cfg), cfg.tau)
    if evi_on:
        if diag is None:
            diag = diag_sims_np(fwd["f_c"], f_t, cfg)
        total = np.zeros(f_t.shape[0])
        if not cfg.wo_evi_ref:
            total = total + (reliability_np(fwd["a_r"], f_t, cfg) - diag) ** 2
        if not cfg.wo_evi_mod:
            total = total + (reliability_np(fwd["a_m"], f_t, cfg) - diag) ** 2
        l_evi = float(total.mean())

    total_loss = 0.0
    if dis_on:
        total_loss = total_loss + l_dis
    if dir_on:
        total_loss = total_loss + cfg.kappa * l_dir
    if evi_on:
        total_loss = total_loss + cfg.lam * l_evi
    return {"L_dis": l_dis, "L_dir": l_dir, "L_evi": l_evi, "L_total": total_loss}
