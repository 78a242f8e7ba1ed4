"""Retrieval evaluation: indexing, blocked scoring, ranking, recall, export."""

import importlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrack.config import RunConfig
from retrack.data import generate
from retrack.evaluate import (
    RecallReport,
    build_index,
    evaluate_model,
    export_similarity_matrix,
    gallery_for_split,
    rank_from_scores,
    recall_from_ranks,
    target_ranks,
    score_against_index,
    write_report,
)
from retrack.model import init_params

evaluate_mod = importlib.import_module("retrack.evaluate")


@pytest.fixture(scope="module")
def cfg():
    return RunConfig(n_train=16, n_val=8, n_test=8, batch=4).validate()


@pytest.fixture(scope="module")
def ds(cfg):
    return generate(cfg)


class TestBuildIndex:
    def test_accepts_well_formed_gallery(self):
        idx = build_index(np.zeros((5, 2, 3)), np.arange(5))
        assert idx.size == 5
        assert idx.feats.dtype == np.float64
        assert idx.ids.dtype == np.int64

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError, match=r"\(M, Q, D\)"):
            build_index(np.zeros((5, 6)), np.arange(5))

    def test_rejects_id_length_mismatch(self):
        with pytest.raises(ValueError, match="matching the number"):
            build_index(np.zeros((5, 2, 3)), np.arange(4))

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError, match="unique"):
            build_index(np.zeros((3, 2, 3)), [0, 1, 1])


class TestRanking:
    def test_orders_by_descending_score(self):
        scores = np.array([[0.1, 0.9, 0.5]])
        ranked = rank_from_scores(scores, np.array([10, 20, 30]))
        assert ranked.tolist() == [[20, 30, 10]]

    def test_ties_break_toward_smaller_id(self):
        scores = np.array([[0.5, 0.5, 0.5]])
        ranked = rank_from_scores(scores, np.array([30, 10, 20]))
        assert ranked.tolist() == [[10, 20, 30]]

    @settings(deadline=None, max_examples=40)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_transforms_leave_ranks_alone(self, seed):
        rng = np.random.default_rng(seed)
        # integer-valued scores so the transforms are exactly order-preserving
        scores = rng.integers(-50, 50, size=(3, 7)).astype(np.float64)
        ids = rng.permutation(7).astype(np.int64)
        base = rank_from_scores(scores, ids)
        for transform in (lambda s: 2.0 * s + 1.0, lambda s: s**3, np.arctan):
            assert np.array_equal(rank_from_scores(transform(scores), ids), base)


class TestRecall:
    def test_positions_one_three_two(self):
        # targets land at ranks 1, 3, and 2 -> R@1=1/3, R@2=2/3, R@3=1
        ranked = np.array([
            [0, 1, 2],
            [1, 2, 0],
            [2, 1, 0],
        ])
        targets = np.array([0, 0, 1])
        recall = recall_from_ranks(ranked, targets, ks=(1, 2, 3))
        assert recall[1] == pytest.approx(1 / 3)
        assert recall[2] == pytest.approx(2 / 3)
        assert recall[3] == 1.0

    def test_cutoff_at_gallery_size_is_total(self):
        ranked = np.array([[2, 1, 0], [0, 2, 1]])
        recall = recall_from_ranks(ranked, np.array([0, 1]), ks=(3,))
        assert recall[3] == 1.0

    def test_missing_target_raises(self):
        ranked = np.array([[0, 1, 2]])
        with pytest.raises(ValueError, match="absent from gallery"):
            recall_from_ranks(ranked, np.array([9]), ks=(1,))

    def test_target_ranks_hand_case(self):
        ranked = np.array([
            [0, 1, 2],
            [1, 2, 0],
            [2, 1, 0],
        ])
        ranks = target_ranks(ranked, np.array([0, 0, 1]))
        assert ranks.tolist() == [1, 3, 2]

    def test_keys_are_ints(self):
        ranked = np.array([[0, 1]])
        recall = recall_from_ranks(ranked, np.array([0]), ks=(np.int64(1), 2))
        assert all(type(k) is int for k in recall)


class TestScoring:
    def test_blocked_scoring_matches_single_shot(self, cfg, monkeypatch):
        rng = np.random.default_rng(0)
        queries = rng.standard_normal((9, cfg.q, cfg.d))
        cands = rng.standard_normal((13, cfg.q, cfg.d))
        index = build_index(cands, np.arange(13))
        full = score_against_index(queries, index, cfg)

        # shrink the element budget so both loops are forced to chunk
        monkeypatch.setattr(evaluate_mod, "_BLOCK_ELEMS", cfg.q * cfg.q * 2)
        blocked = score_against_index(queries, index, cfg)
        np.testing.assert_array_equal(full, blocked)

    def test_agrees_with_direct_einsum(self, cfg):
        from retrack.fastpath import _prep_np

        rng = np.random.default_rng(1)
        queries = rng.standard_normal((4, cfg.q, cfg.d))
        cands = rng.standard_normal((6, cfg.q, cfg.d))
        index = build_index(cands, np.arange(6))
        got = score_against_index(queries, index, cfg)
        pq, pc = _prep_np(queries, cfg), _prep_np(cands, cfg)
        want = np.einsum("aqd,bkd->abqk", pq, pc).max(axis=3).mean(axis=2)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)

    def test_self_retrieval_is_perfect(self, cfg):
        rng = np.random.default_rng(2)
        cands = rng.standard_normal((8, cfg.q, cfg.d))
        index = build_index(cands, np.arange(8))
        scores = score_against_index(cands, index, cfg)
        ranked = rank_from_scores(scores, index.ids)
        recall = recall_from_ranks(ranked, np.arange(8), ks=(1,))
        assert recall[1] == 1.0


class TestGallery:
    def test_id_layout(self, ds):
        feats, ids, target_ids = gallery_for_split(ds, "test")
        n = ds.splits["test"].count
        n_hard = ds.config["n_hard"]
        assert feats.shape[0] == n * (1 + n_hard)
        assert ids.tolist() == list(range(n * (1 + n_hard)))
        assert target_ids.tolist() == list(range(n))
        # targets occupy the front block bit-exactly
        np.testing.assert_array_equal(feats[:n], ds.splits["test"].f_t.astype(np.float64))

    def test_gallery_is_deterministic(self, ds):
        a, _, _ = gallery_for_split(ds, "test")
        b, _, _ = gallery_for_split(ds, "test")
        np.testing.assert_array_equal(a, b)


class TestEvaluateModel:
    def test_report_shape_and_diagnostics(self, cfg, ds):
        params = init_params(cfg, 0, random_final=True)
        params_np = {k: t.data for k, t in params.items()}
        report = evaluate_model(params_np, ds, cfg, split="test")
        assert report.split == "test"
        assert report.n_queries == 8
        assert report.gallery_size == 8 * (1 + cfg.n_hard)
        assert set(report.recall_at_k) == {1, 5, 10}
        assert set(report.diagnostics) == {"sim_fc_fr", "sim_fc_fm", "sim_fc_ft"}
        vals = [report.recall_at_k[k] for k in (1, 5, 10)]
        assert vals == sorted(vals)  # recall is monotone in k
        assert report.mean_recall == pytest.approx(np.mean(vals))
        # the per-query rank list is the raw data behind every recall value
        ranks = np.array(report.target_ranks)
        assert ranks.shape == (report.n_queries,)
        assert (1 <= ranks).all() and (ranks <= report.gallery_size).all()
        for k in (1, 5, 10):
            assert report.recall_at_k[k] == pytest.approx(np.mean(ranks <= k))

    def test_oversized_cutoff_rejected(self, cfg, ds):
        params = init_params(cfg, 0)
        params_np = {k: t.data for k, t in params.items()}
        with pytest.raises(ValueError, match="exceeds gallery size"):
            evaluate_model(params_np, ds, cfg, split="val", ks=(1, 10_000))

    def test_written_report_roundtrips(self, cfg, ds, tmp_path):
        params = init_params(cfg, 0)
        params_np = {k: t.data for k, t in params.items()}
        report = evaluate_model(params_np, ds, cfg, split="val")
        path = write_report(report, tmp_path / "recall.json")
        loaded = json.loads(path.read_text())
        assert loaded == report.to_dict()
        assert loaded["recall_at_k"].keys() == {"1", "5", "10"}

    def test_to_dict_sorts_diagnostics(self):
        report = RecallReport(
            split="val", n_queries=1, gallery_size=2, sim_mode="token_max",
            ks=(1,), recall_at_k={1: 1.0}, mean_recall=1.0,
            diagnostics={"zz": 1.0, "aa": 2.0},
        )
        assert list(report.to_dict()["diagnostics"]) == ["aa", "zz"]


class TestExport:
    def test_csv_roundtrips_float64_exactly(self, tmp_path):
        rng = np.random.default_rng(0)
        scores = rng.standard_normal((3, 5)) * np.exp(rng.uniform(-20, 20, size=(3, 5)))
        path = export_similarity_matrix(scores, [7, 8, 9], [0, 1, 2, 3, 4], tmp_path / "sims.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "query_id,0,1,2,3,4"
        parsed = np.array(
            [[float(v) for v in line.split(",")[1:]] for line in lines[1:]]
        )
        # %.17g is lossless for float64
        np.testing.assert_array_equal(parsed, scores)
        assert [int(line.split(",")[0]) for line in lines[1:]] == [7, 8, 9]

    def test_sidecar_contents(self, tmp_path):
        scores = np.zeros((2, 3))
        path = export_similarity_matrix(scores, [4, 5], [1, 2, 3], tmp_path / "sims.csv")
        sidecar = json.loads((tmp_path / "sims.csv.json").read_text())
        assert sidecar == {
            "csv": "sims.csv",
            "n_queries": 2,
            "n_candidates": 3,
            "query_ids": [4, 5],
            "candidate_ids": [1, 2, 3],
        }
        assert path.name == "sims.csv"

    def test_shape_mismatch_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="does not match"):
            export_similarity_matrix(np.zeros((2, 3)), [1], [1, 2, 3], tmp_path / "x.csv")
