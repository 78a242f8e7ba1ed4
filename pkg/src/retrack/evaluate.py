"""Retrieval evaluation: gallery indexing, chunked scoring, deterministic
ranking, and Recall@k reports.

Ranking breaks score ties by ascending candidate id, so reports are
bit-identical across runs and platforms.  Scoring is blocked so the
all-pairs token grid never materializes at full size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import SynthDataset, easy_negative, hard_negative
from .fastpath import _prep_np, compose_np, diag_sims_np

__all__ = [
    "Index",
    "build_index",
    "score_against_index",
    "rank_from_scores",
    "recall_from_ranks",
    "RecallReport",
    "write_report",
    "evaluate_model",
    "export_similarity_matrix",
    "distractor_hardness",
]

# Upper bound on f64 elements per scoring block (queries x cands x Q x Q).
_BLOCK_ELEMS = 1 << 25


@dataclass
class Index:
    """A gallery of candidate feature stacks keyed by integer ids."""

    feats: np.ndarray  # (M, Q, D) float64
    ids: np.ndarray  # (M,) int64

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])


def build_index(feats: np.ndarray, ids) -> Index:
    feats = np.asarray(feats, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    if feats.ndim != 3:
        raise ValueError(f"index features must be (M, Q, D), got shape {feats.shape}")
    if ids.ndim != 1 or ids.shape[0] != feats.shape[0]:
        raise ValueError("ids must be a 1-D array matching the number of candidates")
    if np.unique(ids).shape[0] != ids.shape[0]:
        raise ValueError("candidate ids must be unique")
    return Index(feats=feats, ids=ids)


def score_against_index(queries: np.ndarray, index: Index, cfg: RunConfig) -> np.ndarray:
    """Similarity of every query stack against every candidate, (N, M).

    Both sides are normalized once; the token-level dot grid is computed
    in blocks sized to stay under a fixed element budget.
    """
    pq = _prep_np(np.asarray(queries, dtype=np.float64), cfg)
    pc = _prep_np(index.feats, cfg)
    n, m = pq.shape[0], pc.shape[0]
    tok = pq.shape[1] * pc.shape[1]
    q_chunk = min(n, 64)
    c_chunk = max(1, min(m, _BLOCK_ELEMS // max(1, q_chunk * tok)))
    scores = np.empty((n, m), dtype=np.float64)
    for qs in range(0, n, q_chunk):
        qe = min(qs + q_chunk, n)
        for cs in range(0, m, c_chunk):
            ce = min(cs + c_chunk, m)
            dots = np.einsum("aqd,bkd->abqk", pq[qs:qe], pc[cs:ce])
            scores[qs:qe, cs:ce] = dots.max(axis=3).mean(axis=2)
    return scores


def rank_from_scores(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Candidate ids per query, best first; ties go to the smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    ranked = np.empty(scores.shape, dtype=np.int64)
    for i in range(scores.shape[0]):
        order = np.lexsort((ids, -scores[i]))
        ranked[i] = ids[order]
    return ranked


def target_ranks(ranked: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-indexed rank of each query's target within its ranked id list."""
    targets = np.asarray(targets, dtype=np.int64)
    hits = ranked == targets[:, None]
    if not hits.any(axis=1).all():
        missing = np.nonzero(~hits.any(axis=1))[0]
        raise ValueError(f"target id absent from gallery for queries {missing.tolist()}")
    return hits.argmax(axis=1) + 1


def recall_from_ranks(ranked: np.ndarray, targets: np.ndarray, ks) -> dict[int, float]:
    pos = target_ranks(ranked, targets)
    return {int(k): float(np.mean(pos <= k)) for k in ks}


@dataclass
class RecallReport:
    split: str
    n_queries: int
    gallery_size: int
    sim_mode: str
    ks: tuple[int, ...]
    recall_at_k: dict[int, float]
    mean_recall: float
    diagnostics: dict[str, float]
    target_ranks: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_queries": self.n_queries,
            "gallery_size": self.gallery_size,
            "sim_mode": self.sim_mode,
            "ks": list(self.ks),
            "recall_at_k": {str(k): self.recall_at_k[k] for k in self.ks},
            "mean_recall": self.mean_recall,
            "diagnostics": dict(sorted(self.diagnostics.items())),
            "target_ranks": [int(r) for r in self.target_ranks],
        }


def write_report(report: RecallReport, path: str | Path) -> Path:
    """Serialize a report as stable JSON (sorted keys, no timestamps)."""
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def _encode_queries(params_np: dict[str, np.ndarray], f_r: np.ndarray,
                    f_m: np.ndarray, cfg: RunConfig, chunk: int = 128) -> np.ndarray:
    parts = [
        compose_np(params_np, f_r[s : s + chunk], f_m[s : s + chunk], cfg)
        for s in range(0, f_r.shape[0], chunk)
    ]
    return np.concatenate(parts, axis=0)


def gallery_for_split(ds: SynthDataset, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gallery features and ids: true targets first, then hard negatives.

    Target i carries id i; the j-th distractor for query i carries id
    ``n + i * n_hard + j``.  Returns (feats, ids, target_ids).
    """
    sp = ds.splits[split]
    n = sp.count
    n_hard = int(ds.config["n_hard"])
    targets = sp.f_t.astype(np.float64)
    negs = [
        hard_negative(ds, split, i, j) for i in range(n) for j in range(n_hard)
    ]
    feats = np.concatenate([targets, np.stack(negs)], axis=0) if negs else targets
    ids = np.arange(feats.shape[0], dtype=np.int64)
    return feats, ids, np.arange(n, dtype=np.int64)


def evaluate_model(
    params_np: dict[str, np.ndarray],
    ds: SynthDataset,
    cfg: RunConfig,
    split: str = "test",
    ks: tuple[int, ...] = (1, 5, 10),
) -> RecallReport:
    """Recall@k of composed queries against targets plus hard negatives."""
    sp = ds.splits[split]
    f_r = sp.f_r.astype(np.float64)
    f_m = sp.f_m.astype(np.float64)
    f_t = sp.f_t.astype(np.float64)
    f_c = _encode_queries(params_np, f_r, f_m, cfg)

    feats, ids, target_ids = gallery_for_split(ds, split)
    index = build_index(feats, ids)
    if max(ks) > index.size:
        raise ValueError(f"recall cutoff {max(ks)} exceeds gallery size {index.size}")
    scores = score_against_index(f_c, index, cfg)
    ranked = rank_from_scores(scores, index.ids)
    ranks = target_ranks(ranked, target_ids)
    recall = {int(k): float(np.mean(ranks <= k)) for k in ks}
    diagnostics = {
        "sim_fc_fr": float(diag_sims_np(f_c, f_r, cfg).mean()),
        "sim_fc_fm": float(diag_sims_np(f_c, f_m, cfg).mean()),
        "sim_fc_ft": float(diag_sims_np(f_c, f_t, cfg).mean()),
    }
    return RecallReport(
        split=split,
        n_queries=sp.count,
        gallery_size=index.size,
        sim_mode=cfg.sim_mode,
        ks=tuple(int(k) for k in ks),
        recall_at_k=recall,
        mean_recall=float(np.mean([recall[int(k)] for k in ks])),
        diagnostics=diagnostics,
        target_ranks=[int(r) for r in ranks],
    )


def export_similarity_matrix(
    scores: np.ndarray,
    query_ids,
    candidate_ids,
    path: str | Path,
) -> Path:
    """Write scores as CSV (17 significant digits) plus a JSON sidecar.

    %.17g preserves float64 exactly, so a re-import reproduces the matrix
    bit for bit.  The sidecar records ids and shape for consumers that
    don't want to parse the header row.
    """
    scores = np.asarray(scores, dtype=np.float64)
    query_ids = [int(q) for q in query_ids]
    candidate_ids = [int(c) for c in candidate_ids]
    if scores.shape != (len(query_ids), len(candidate_ids)):
        raise ValueError(
            f"scores shape {scores.shape} does not match "
            f"{len(query_ids)} queries x {len(candidate_ids)} candidates"
        )
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write("query_id," + ",".join(str(c) for c in candidate_ids) + "\n")
        for qid, row in zip(query_ids, scores):
            fh.write(str(qid) + "," + ",".join("%.17g" % v for v in row) + "\n")
    sidecar = {
        "csv": path.name,
        "n_queries": len(query_ids),
        "n_candidates": len(candidate_ids),
        "query_ids": query_ids,
        "candidate_ids": candidate_ids,
    }
    sidecar_path = Path(str(path) + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def distractor_hardness(ds: SynthDataset, cfg: RunConfig, split: str = "test") -> dict[str, float]:
    """How much closer hard distractors sit to each query's reference.

    Hard negatives reuse the query's reference latent, so their similarity
    to f_r should beat the global easy-negative mean for essentially every
    query; ``frac_queries_harder`` reports the fraction for which it does.
    """
    sp = ds.splits[split]
    f_r = sp.f_r.astype(np.float64)
    n = sp.count
    n_hard = int(ds.config["n_hard"])
    n_easy = int(ds.config["n_easy"])
    hard = np.stack([hard_negative(ds, split, i, j) for i in range(n) for j in range(n_hard)])
    easy = np.stack([easy_negative(ds, split, i, j) for i in range(n) for j in range(n_easy)])
    hard_sims = diag_sims_np(np.repeat(f_r, n_hard, axis=0), hard, cfg).reshape(n, n_hard)
    easy_sims = diag_sims_np(np.repeat(f_r, n_easy, axis=0), easy, cfg).reshape(n, n_easy)
    mean_easy = float(easy_sims.mean())
    per_query_hard = hard_sims.mean(axis=1)
    return {
        "mean_hard": float(per_query_hard.mean()),
        "mean_easy": mean_easy,
        "margin": float(per_query_hard.mean() - mean_easy),
        "frac_queries_harder": float((per_query_hard > mean_easy).mean()),
    }
