"""Similarity semantics and the contrastive losses: hand-enumerated
values, closed-form uniform cases, a direct unvectorized oracle, and the
scaling/permutation invariances.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrack import autodiff as ad
from retrack.config import RunConfig
from retrack.geometry import contrastive_loss, pair_similarity, prep_features, similarity


@pytest.fixture
def cfg():
    return RunConfig().validate()


@pytest.fixture
def pooled_cfg():
    return RunConfig(sim_mode="pooled_cosine").validate()


def _sim_value(x, y, cfg):
    return similarity(ad.tensor(x), ad.tensor(y), cfg).item()


def _direct_loss(sim_rows: np.ndarray, tau: float) -> float:
    """Unvectorized reference: mean softmax cross-entropy, target on the
    diagonal, computed with a plain log-sum-exp per row."""
    b = sim_rows.shape[0]
    total = 0.0
    for i in range(b):
        row = sim_rows[i] / tau
        m = row.max()
        total += -(row[i] - (m + np.log(np.exp(row - m).sum())))
    return total / b


class TestSimilarity:
    def test_basis_vector_table(self, cfg):
        """x rows e1,e2 against y rows e2,e3: best matches are 0 and 1."""
        x = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        y = np.array([[0, 1.0, 0], [0, 0, 1.0]])
        assert abs(_sim_value(x, y, cfg) - 0.5) < 1e-12

    @pytest.mark.parametrize("mode", ["token_max_mean", "pooled_cosine"])
    def test_self_similarity_is_one(self, mode):
        cfg = RunConfig(sim_mode=mode).validate()
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 7))
        assert abs(_sim_value(x, x, cfg) - 1.0) < 1e-10

    def test_single_row_equals_cosine(self, cfg, pooled_cfg):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 9))
        y = rng.standard_normal((1, 9))
        cos = float((x @ y.T).item()) / (np.linalg.norm(x) * np.linalg.norm(y))
        assert abs(_sim_value(x, y, cfg) - cos) < 1e-12
        assert abs(_sim_value(x, y, pooled_cfg) - cos) < 1e-12

    @given(st.integers(min_value=0, max_value=2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_bounded_by_one(self, seed):
        """|S| <= 1 for both modes on random inputs."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 6)) + 0.05
        y = rng.standard_normal((3, 6)) + 0.05
        for mode in ("token_max_mean", "pooled_cosine"):
            cfg = RunConfig(sim_mode=mode).validate()
            val = _sim_value(x, y, cfg)
            assert -1.0 - 1e-12 <= val <= 1.0 + 1e-12

    def test_zero_row_is_guarded_and_counted(self, cfg):
        x = np.zeros((2, 4))
        x[0] = [1.0, 0, 0, 0]
        diag: dict = {}
        val = similarity(ad.tensor(x), ad.tensor(np.eye(2, 4)), cfg, diag).item()
        assert np.isfinite(val)
        assert diag["degenerate_rows"] >= 1

    def test_pooled_mode_pools_before_normalizing(self, pooled_cfg):
        x = np.array([[2.0, 0.0], [0.0, 2.0]])
        p = prep_features(ad.tensor(x), pooled_cfg)
        assert p.shape == (1, 2)
        np.testing.assert_allclose(p.data, [[1 / np.sqrt(2), 1 / np.sqrt(2)]], atol=1e-12)


class TestContrastiveLoss:
    def test_single_pair_is_exactly_zero(self, cfg):
        rng = np.random.default_rng(2)
        q = [ad.tensor(rng.standard_normal((4, 6)))]
        c = [ad.tensor(rng.standard_normal((4, 6)))]
        loss, _ = contrastive_loss(q, c, cfg)
        assert loss.item() == 0.0

    def test_identical_pairs_give_ln_b(self, cfg):
        """A batch of duplicated samples has uniform logits: loss = ln B."""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 6))
        y = rng.standard_normal((4, 6))
        for b in (2, 4):
            qs = [ad.tensor(x) for _ in range(b)]
            cs = [ad.tensor(y) for _ in range(b)]
            loss, _ = contrastive_loss(qs, cs, cfg)
            assert abs(loss.item() - np.log(b)) < 1e-9

    def test_matches_direct_evaluation(self, cfg):
        """Random B=3 batch equals the unvectorized formula within 1e-10."""
        rng = np.random.default_rng(4)
        qs = [ad.tensor(rng.standard_normal((4, 6))) for _ in range(3)]
        cs = [ad.tensor(rng.standard_normal((4, 6))) for _ in range(3)]
        loss, sims = contrastive_loss(qs, cs, cfg)
        sim_rows = np.array([[sims[i][j].item() for j in range(3)] for i in range(3)])
        assert abs(loss.item() - _direct_loss(sim_rows, cfg.tau)) < 1e-10

    def test_nonnegative(self, cfg):
        rng = np.random.default_rng(5)
        for trial in range(5):
            qs = [ad.tensor(rng.standard_normal((3, 5))) for _ in range(4)]
            cs = [ad.tensor(rng.standard_normal((3, 5))) for _ in range(4)]
            loss, _ = contrastive_loss(qs, cs, cfg)
            assert loss.item() >= 0.0

    def test_batch_permutation_covariance(self, cfg):
        """Reordering the batch (queries with their candidates) leaves the
        mean loss unchanged within 1e-12."""
        rng = np.random.default_rng(6)
        xs = [rng.standard_normal((4, 6)) for _ in range(4)]
        ys = [rng.standard_normal((4, 6)) for _ in range(4)]
        loss_a, _ = contrastive_loss([ad.tensor(x) for x in xs],
                                     [ad.tensor(y) for y in ys], cfg)
        perm = [2, 0, 3, 1]
        loss_b, _ = contrastive_loss([ad.tensor(xs[i]) for i in perm],
                                     [ad.tensor(ys[i]) for i in perm], cfg)
        assert abs(loss_a.item() - loss_b.item()) < 1e-12

    def test_joint_temperature_scaling_invariance(self, cfg):
        """Scaling all similarities by c and tau by c leaves the loss
        unchanged: check by injecting a scaled similarity matrix into the
        direct formula."""
        rng = np.random.default_rng(7)
        qs = [ad.tensor(rng.standard_normal((4, 6))) for _ in range(3)]
        cs = [ad.tensor(rng.standard_normal((4, 6))) for _ in range(3)]
        loss, sims = contrastive_loss(qs, cs, cfg)
        sim_rows = np.array([[sims[i][j].item() for j in range(3)] for i in range(3)])
        for c in (0.5, 3.0, 17.0):
            scaled = _direct_loss(sim_rows * c, cfg.tau * c)
            assert abs(loss.item() - scaled) < 1e-10

    def test_length_mismatch_rejected(self, cfg):
        rng = np.random.default_rng(8)
        q = [ad.tensor(rng.standard_normal((2, 3)))]
        with pytest.raises(ValueError):
            contrastive_loss(q, [], cfg)

    def test_gradients_pass_gradcheck(self, cfg):
        """Loss gradients w.r.t. all query/candidate features < 1e-4."""
        rng = np.random.default_rng(9)
        tensors = {f"x{i}": ad.tensor(rng.standard_normal((3, 4))) for i in range(2)}
        tensors.update({f"y{i}": ad.tensor(rng.standard_normal((3, 4))) for i in range(2)})

        def build():
            loss, _ = contrastive_loss([tensors["x0"], tensors["x1"]],
                                       [tensors["y0"], tensors["y1"]], cfg)
            return loss

        assert ad.gradcheck(build, tensors) < 1e-4

    def test_pair_similarity_requires_prepped_inputs(self, cfg):
        """pair_similarity assumes unit rows; prep + pair == similarity."""
        rng = np.random.default_rng(10)
        x, y = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
        via_parts = pair_similarity(prep_features(ad.tensor(x), cfg),
                                    prep_features(ad.tensor(y), cfg), cfg).item()
        assert abs(via_parts - _sim_value(x, y, cfg)) < 1e-15
