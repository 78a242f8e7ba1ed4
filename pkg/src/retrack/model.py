"""The retrieval network: composer, shared disentangling decoder, point
weights, and anchor construction — the tape (trainable) path.

Data layout per sample: reference features ``f_r``, modification features
``f_m``, and target features ``f_t`` are (Q, D) matrices.  The composer
fuses (f_r, f_m) into the composed feature ``F_c``; the decoder re-reads
each branch's contribution out of ``F_c``; learned point weights gate
those contributions into directional anchors:

    A_r = F_c + W_r ⊙ P_r        A_m = F_c + W_m ⊙ P_m
    A_c = (A_r - F_c) + (A_m - F_c)          A_t = F_t - F_c

Ablation switches zero out a contribution (``wo_c_ref``/``wo_c_mod``),
bypass the decoder entirely (``wo_scd``: P_r := F_r, P_m := F_m), or drop
an anchor term (``wo_a_ref``/``wo_a_mod``); skipped sub-networks are not
evaluated at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import seeding
from .autodiff import Tensor
from .config import RunConfig

__all__ = [
    "init_params",
    "param_shapes",
    "compose",
    "disentangle",
    "point_weights",
    "build_anchors",
    "forward_sample",
    "SampleForward",
]


def param_shapes(cfg: RunConfig) -> dict[str, tuple[int, int]]:
    """Name → shape for every trainable tensor, in canonical order."""
    d, q, heads = cfg.d, cfg.q, cfg.heads
    dh = d // heads
    f = cfg.ffn_mult * d
    shapes: dict[str, tuple[int, int]] = {}
    for block in ("composer", "decoder"):
        for h in range(heads):
            shapes[f"{block}.attn.wq{h}"] = (d, dh)
            shapes[f"{block}.attn.wk{h}"] = (d, dh)
            shapes[f"{block}.attn.wv{h}"] = (d, dh)
        shapes[f"{block}.attn.wo"] = (d, d)
        shapes[f"{block}.ffn.w1"] = (d, f)
        shapes[f"{block}.ffn.b1"] = (1, f)
        shapes[f"{block}.ffn.w2"] = (f, d)
        shapes[f"{block}.ffn.b2"] = (1, d)
    for ln in ("composer.ln1", "composer.ln2", "decoder.lnq", "decoder.lnkv", "decoder.lnf"):
        shapes[f"{ln}.gain"] = (1, d)
        shapes[f"{ln}.bias"] = (1, d)
    for stream in ("wp_r", "wp_m"):
        shapes[f"{stream}.w1"] = (q, 2 * q)
        shapes[f"{stream}.b1"] = (1, 2 * q)
        shapes[f"{stream}.w2"] = (2 * q, d)
        shapes[f"{stream}.b2"] = (1, d)
    return shapes


def init_params(cfg: RunConfig, seed: int, random_final: bool = False) -> dict[str, Tensor]:
    """Draw parameters deterministically from ``(seed, INIT)``.

    Projections are scaled-normal (variance 1/fan-in); layer-norm gains
    start at 1, all biases at 0.  The point-weight MLPs' final layers
    start at zero so every gate opens at exactly 0.5 (training begins at
    A = F_c + 0.5·P).  ``random_final=True`` draws those final layers from
    the same scaled-normal instead — used by gradient checking, where a
    zero block would make its own inputs' gradients vanish identically.
    """
    g = seeding.rng(seed, seeding.INIT)
    params: dict[str, Tensor] = {}
    for name, (rows, cols) in param_shapes(cfg).items():
        if name.startswith("wp_") and name.endswith((".w2", ".b2")):
            # drawn unconditionally so the stream position of every other
            # tensor is identical across both init modes
            drawn = g.standard_normal((rows, cols)) / math.sqrt(rows)
            data = drawn if random_final else np.zeros((rows, cols))
        elif name.endswith(".gain"):
            data = np.ones((rows, cols))
        elif name.endswith((".bias", ".b1", ".b2")):
            data = np.zeros((rows, cols))
        else:
            data = g.standard_normal((rows, cols)) / math.sqrt(rows)
        params[name] = Tensor(data)
    return params


def _attention(
    q_in: Tensor,
    kv_in: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
) -> Tensor:
    """Multi-head cross attention; queries from ``q_in``, keys/values
    from ``kv_in``.  Per-head projections are stored as separate (D, D/H)
    matrices, so no slicing is needed on the tape."""
    dh = q_in.shape[1] // heads
    inv = 1.0 / math.sqrt(dh)
    ctx = []
    for h in range(heads):
        qh = ad.matmul(q_in, params[f"{prefix}.wq{h}"])
        kh = ad.matmul(kv_in, params[f"{prefix}.wk{h}"])
        vh = ad.matmul(kv_in, params[f"{prefix}.wv{h}"])
        weights = ad.row_softmax(ad.scale(ad.matmul(qh, ad.transpose(kh)), inv))
        ctx.append(ad.matmul(weights, vh))
    return ad.matmul(ad.concat_cols(ctx), params[f"{prefix}.wo"])


def _ffn(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = ad.softplus(ad.affine(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ad.affine(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def compose(params: dict[str, Tensor], f_r: Tensor, f_m: Tensor, cfg: RunConfig) -> Tensor:
    """Fuse reference and modification features into F_c (post-norm block).

    One cross-attention block (queries from f_r, keys/values from f_m),
    residual + layer norm, feed-forward, residual + layer norm.  With the
    attention output projection and the FFN output layer zeroed, this
    collapses to the layer-normed residual path of f_r exactly.
    """
    attn = _attention(f_r, f_m, params, "composer.attn", cfg.heads)
    h1 = ad.layer_norm(
        ad.add(f_r, attn), params["composer.ln1.gain"], params["composer.ln1.bias"], cfg.ln_eps
    )
    return ad.layer_norm(
        ad.add(h1, _ffn(h1, params, "composer.ffn")),
        params["composer.ln2.gain"],
        params["composer.ln2.bias"],
        cfg.ln_eps,
    )


def disentangle(params: dict[str, Tensor], f_query: Tensor, f_c: Tensor, cfg: RunConfig) -> Tensor:
    """Read one branch's contribution out of F_c (pre-norm decoder).

    The same decoder weights serve both branches; only the query input
    differs (f_r for the reference pass, f_m for the modification pass).
    Cross-attention queries the branch features against F_c as keys and
    values, then a feed-forward refines the residual stream.
    """
    lnq = ad.layer_norm(f_query, params["decoder.lnq.gain"], params["decoder.lnq.bias"], cfg.ln_eps)
    lnkv = ad.layer_norm(f_c, params["decoder.lnkv.gain"], params["decoder.lnkv.bias"], cfg.ln_eps)
    a = ad.add(f_query, _attention(lnq, lnkv, params, "decoder.attn", cfg.heads))
    lnf = ad.layer_norm(a, params["decoder.lnf.gain"], params["decoder.lnf.bias"], cfg.ln_eps)
    return ad.add(a, _ffn(lnf, params, "decoder.ffn"))


def point_weights(
    params: dict[str, Tensor], f_c: Tensor, f_branch: Tensor, stream: str
) -> Tensor:
    """Per-point gates in (0, 1): a row-wise MLP over the Q×Q similarity
    between F_c and the branch features.  Hidden layer is a smooth
    rectifier; the logistic output keeps every gate strictly inside (0, 1).
    """
    if stream not in ("wp_r", "wp_m"):
        raise ValueError(f"stream must be 'wp_r' or 'wp_m', got {stream!r}")
    sim = ad.matmul(f_c, ad.transpose(f_branch))
    hidden = ad.softplus(ad.affine(sim, params[f"{stream}.w1"], params[f"{stream}.b1"]))
    return ad.sigmoid(ad.affine(hidden, params[f"{stream}.w2"], params[f"{stream}.b2"]))


def build_anchors(
    f_c: Tensor,
    contrib_r: Tensor | None,
    contrib_m: Tensor | None,
    cfg: RunConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """Anchors from gated contributions (``contrib = W ⊙ P``, or None when
    that branch is ablated away).  Returns (A_r, A_m, A_c)."""
    a_r = ad.add(f_c, contrib_r) if contrib_r is not None else f_c
    a_m = ad.add(f_c, contrib_m) if contrib_m is not None else f_c
    terms = []
    if not cfg.wo_a_ref:
        terms.append(ad.sub(a_r, f_c))
    if not cfg.wo_a_mod:
        terms.append(ad.sub(a_m, f_c))
    if not terms:
        a_c = Tensor(np.zeros(f_c.shape))
    elif len(terms) == 1:
        a_c = terms[0]
    else:
        a_c = ad.add(terms[0], terms[1])
    return a_r, a_m, a_c


@dataclass
class SampleForward:
    """Everything the losses need for one triplet, as live tape tensors."""

    f_r: Tensor
    f_m: Tensor
    f_t: Tensor
    f_c: Tensor
    p_r: Tensor | None
    p_m: Tensor | None
    w_r: Tensor | None
    w_m: Tensor | None
    a_r: Tensor
    a_m: Tensor
    a_c: Tensor
    a_t: Tensor


def forward_sample(
    params: dict[str, Tensor],
    f_r: np.ndarray,
    f_m: np.ndarray,
    f_t: np.ndarray,
    cfg: RunConfig,
) -> SampleForward:
    """Run the full per-sample network under the configured ablations."""
    tr = Tensor(f_r)
    tm = Tensor(f_m)
    tt = Tensor(f_t)
    f_c = compose(params, tr, tm, cfg)

    p_r = p_m = w_r = w_m = None
    contrib_r = contrib_m = None
    if not cfg.wo_c_ref:
        p_r = tr if cfg.wo_scd else disentangle(params, tr, f_c, cfg)
        w_r = point_weights(params, f_c, tr, "wp_r")
        contrib_r = ad.mul(w_r, p_r)
    if not cfg.wo_c_mod:
        p_m = tm if cfg.wo_scd else disentangle(params, tm, f_c, cfg)
        w_m = point_weights(params, f_c, tm, "wp_m")
        contrib_m = ad.mul(w_m, p_m)

    a_r, a_m, a_c = build_anchors(f_c, contrib_r, contrib_m, cfg)
    a_t = ad.sub(tt, f_c)
    return SampleForward(
        f_r=tr, f_m=tm, f_t=tt, f_c=f_c,
        p_r=p_r, p_m=p_m, w_r=w_r, w_m=w_m,
        a_r=a_r, a_m=a_m, a_c=a_c, a_t=a_t,
    )
