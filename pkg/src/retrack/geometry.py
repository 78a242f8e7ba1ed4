"""Similarity measures and the contrastive geometry losses (tape path).

Two similarity modes over (Q, D) feature matrices:

* ``token_max_mean`` (default): L2-normalize rows, take the best match
  over the candidate's rows for each query row, average over query rows.
* ``pooled_cosine``: cosine between mean-pooled rows.

Both lie in [-1, 1] and equal plain cosine similarity at Q = 1.  The
losses are in-batch softmax cross-entropies at temperature tau: L_dis
aligns composed features with their targets, L_dir aligns the composed
anchor displacement A_c with the target displacement A_t.  All loss-path
normalization is epsilon-guarded (a zero row maps to a zero row) and
counts guarded rows into the run diagnostics instead of aborting —
A_t = F_t - F_c can legitimately vanish.
"""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig

__all__ = ["prep_features", "pair_similarity", "similarity", "contrastive_loss"]


def prep_features(x: Tensor, cfg: RunConfig, diag: dict | None = None) -> Tensor:
    """Bring a feature matrix into scoring form for the configured mode."""
    if cfg.sim_mode == "pooled_cosine":
        x = ad.col_mean(x)
    return ad.rowwise_l2_normalize(x, eps=cfg.norm_eps, guarded=True, diag=diag)


def pair_similarity(px: Tensor, py: Tensor, cfg: RunConfig) -> Tensor:
    """Similarity of two prepared (``prep_features``-ed) matrices, 1x1."""
    dots = ad.matmul(px, ad.transpose(py))
    if cfg.sim_mode == "pooled_cosine":
        return dots
    best, _ = ad.max_over_axis(dots, axis=1)
    return ad.mean_all(best)


def similarity(x: Tensor, y: Tensor, cfg: RunConfig, diag: dict | None = None) -> Tensor:
    """S(x, y) under the configured mode; convenience over prep + pair."""
    return pair_similarity(prep_features(x, cfg, diag), prep_features(y, cfg, diag), cfg)


def contrastive_loss(
    queries: list[Tensor],
    candidates: list[Tensor],
    cfg: RunConfig,
    diag: dict | None = None,
) -> tuple[Tensor, list[list[Tensor]]]:
    """In-batch softmax cross-entropy with matching pairs on the diagonal.

    Row i's logits are S(queries[i], candidates[j]) / tau over all j; the
    target is j = i.  Returns the mean loss and the full matrix of
    (unscaled) similarity tensors for reuse by other loss terms.  With a
    single pair the loss is exactly 0; with all-equal logits it is ln B.
    """
    if len(queries) != len(candidates):
        raise ValueError(
            f"contrastive_loss: {len(queries)} queries vs {len(candidates)} candidates"
        )
    b = len(queries)
    pq = [prep_features(x, cfg, diag) for x in queries]
    pc = [prep_features(y, cfg, diag) for y in candidates]
    sims = [[pair_similarity(pq[i], pc[j], cfg) for j in range(b)] for i in range(b)]
    total: Tensor | None = None
    for i in range(b):
        logits = ad.scale(ad.concat_cols(sims[i]), 1.0 / cfg.tau)
        term = ad.softmax_cross_entropy_row(logits, i)
        total = term if total is None else ad.add(total, term)
    assert total is not None
    return ad.scale(total, 1.0 / b), sims
