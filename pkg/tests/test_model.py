"""Network-block behavior: composer collapse under zeroed outputs, a
hand-rolled uniform-attention decoder oracle, permutation properties,
gate initialization, and anchor algebra under every ablation switch.
"""

from __future__ import annotations

import numpy as np
import pytest

from retrack import autodiff as ad
from retrack.config import RunConfig
from retrack.model import (
    SampleForward,
    build_anchors,
    compose,
    disentangle,
    forward_sample,
    init_params,
    param_shapes,
    point_weights,
)


@pytest.fixture
def cfg():
    return RunConfig().validate()


@pytest.fixture
def params(cfg):
    return init_params(cfg, seed=0)


def _rand_features(cfg, seed=0, n=1):
    rng = np.random.default_rng(seed)
    out = [rng.standard_normal((cfg.q, cfg.d)) for _ in range(3 * n)]
    return out


def _ln_rows(x, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class TestComposer:
    def test_zeroed_outputs_collapse_to_normed_reference(self, cfg, params):
        """With the attention output projection and FFN final layer zeroed,
        F_c is exactly the twice layer-normed f_r, independent of f_m."""
        params["composer.attn.wo"] = ad.tensor(np.zeros((cfg.d, cfg.d)))
        params["composer.ffn.w2"] = ad.tensor(np.zeros((cfg.ffn_mult * cfg.d, cfg.d)))
        f_r, f_m, _ = _rand_features(cfg, seed=1)
        out = compose(params, ad.tensor(f_r), ad.tensor(f_m), cfg)
        expected = _ln_rows(_ln_rows(f_r, cfg.ln_eps), cfg.ln_eps)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

        other = compose(params, ad.tensor(f_r), ad.tensor(f_m * 3.0 + 1.0), cfg)
        np.testing.assert_array_equal(out.data, other.data)

    def test_row_permutation_equivariance_in_reference(self, cfg, params):
        """Permuting f_r rows permutes F_c rows the same way."""
        f_r, f_m, _ = _rand_features(cfg, seed=2)
        perm = np.random.default_rng(3).permutation(cfg.q)
        base = compose(params, ad.tensor(f_r), ad.tensor(f_m), cfg)
        permuted = compose(params, ad.tensor(f_r[perm]), ad.tensor(f_m), cfg)
        np.testing.assert_allclose(permuted.data, base.data[perm], atol=1e-10)

    def test_key_value_permutation_invariance(self, cfg, params):
        """Attention pools over f_m rows, so their order cannot matter."""
        f_r, f_m, _ = _rand_features(cfg, seed=4)
        perm = np.random.default_rng(5).permutation(cfg.q)
        base = compose(params, ad.tensor(f_r), ad.tensor(f_m), cfg)
        permuted = compose(params, ad.tensor(f_r), ad.tensor(f_m[perm]), cfg)
        np.testing.assert_allclose(permuted.data, base.data, atol=1e-10)

    def test_rows_are_layer_normed(self, cfg, params):
        """Post-norm output: every row has zero mean and ~unit variance."""
        f_r, f_m, _ = _rand_features(cfg, seed=6)
        out = compose(params, ad.tensor(f_r), ad.tensor(f_m), cfg).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)


class TestDecoderOracle:
    def test_uniform_attention_hand_rolled(self, cfg, params):
        """With zeroed key projections the attention is uniform pooling;
        the whole decoder is then reproducible with plain numpy."""
        for h in range(cfg.heads):
            params[f"decoder.attn.wk{h}"] = ad.tensor(np.zeros((cfg.d, cfg.d // cfg.heads)))
        f_r, _, f_c_in = _rand_features(cfg, seed=7)
        out = disentangle(params, ad.tensor(f_r), ad.tensor(f_c_in), cfg)

        p = {k: t.data for k, t in params.items()}
        lnq_ = _ln_rows(f_r, cfg.ln_eps) * p["decoder.lnq.gain"] + p["decoder.lnq.bias"]
        lnkv = _ln_rows(f_c_in, cfg.ln_eps) * p["decoder.lnkv.gain"] + p["decoder.lnkv.bias"]
        ctx = np.concatenate(
            [np.full((cfg.q, cfg.q), 1.0 / cfg.q) @ (lnkv @ p[f"decoder.attn.wv{h}"])
             for h in range(cfg.heads)],
            axis=1,
        )
        a = f_r + ctx @ p["decoder.attn.wo"]
        lnf = _ln_rows(a, cfg.ln_eps) * p["decoder.lnf.gain"] + p["decoder.lnf.bias"]
        hidden = np.logaddexp(0.0, lnf @ p["decoder.ffn.w1"] + p["decoder.ffn.b1"])
        expected = a + hidden @ p["decoder.ffn.w2"] + p["decoder.ffn.b2"]
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_shared_weights_one_decoder(self, cfg, params):
        """Both branch passes run the same decoder: swapping the query
        argument is the only difference."""
        f_r, f_m, f_c_in = _rand_features(cfg, seed=8)
        out_r = disentangle(params, ad.tensor(f_r), ad.tensor(f_c_in), cfg)
        out_m = disentangle(params, ad.tensor(f_m), ad.tensor(f_c_in), cfg)
        again = disentangle(params, ad.tensor(f_r), ad.tensor(f_c_in), cfg)
        np.testing.assert_array_equal(out_r.data, again.data)
        assert not np.allclose(out_r.data, out_m.data)


class TestPointWeights:
    def test_gates_open_at_exactly_half(self, cfg, params):
        """Zero-initialized final layer ⇒ sigmoid(0) = 0.5 for every gate."""
        f_r, f_m, f_c_in = _rand_features(cfg, seed=9)
        for stream, branch in (("wp_r", f_r), ("wp_m", f_m)):
            w = point_weights(params, ad.tensor(f_c_in), ad.tensor(branch), stream)
            np.testing.assert_array_equal(w.data, np.full((cfg.q, cfg.d), 0.5))

    def test_gates_stay_in_open_interval(self, cfg):
        params = init_params(cfg, seed=1, random_final=True)
        f_r, _, f_c_in = _rand_features(cfg, seed=10)
        w = point_weights(params, ad.tensor(f_c_in), ad.tensor(f_r), "wp_r").data
        assert (w > 0.0).all() and (w < 1.0).all()

    def test_unknown_stream_rejected(self, cfg, params):
        f_r, _, f_c_in = _rand_features(cfg, seed=11)
        with pytest.raises(ValueError):
            point_weights(params, ad.tensor(f_c_in), ad.tensor(f_r), "wp_x")


class TestAnchors:
    def test_composition_identity(self, cfg, params):
        """A_c − (W_r⊙P_r + W_m⊙P_m) vanishes to machine precision."""
        f_r, f_m, f_t = _rand_features(cfg, seed=12)
        s = forward_sample(init_params(cfg, 0, random_final=True), f_r, f_m, f_t, cfg)
        reconstructed = s.w_r.data * s.p_r.data + s.w_m.data * s.p_m.data
        np.testing.assert_allclose(s.a_c.data, reconstructed, atol=1e-12)
        np.testing.assert_allclose(s.a_r.data, s.f_c.data + s.w_r.data * s.p_r.data,
                                   atol=1e-12)
        np.testing.assert_allclose(s.a_t.data, f_t - s.f_c.data, atol=1e-12)

    def test_build_anchors_drop_terms(self, cfg):
        f_c = ad.tensor(np.random.default_rng(13).standard_normal((cfg.q, cfg.d)))
        c_r = ad.tensor(np.ones((cfg.q, cfg.d)))
        c_m = ad.tensor(np.full((cfg.q, cfg.d), 2.0))

        _, _, a_c = build_anchors(f_c, c_r, c_m, cfg)
        np.testing.assert_allclose(a_c.data, 3.0, atol=1e-12)

        _, _, a_c = build_anchors(f_c, c_r, c_m, cfg.replace(wo_a_ref=True))
        np.testing.assert_allclose(a_c.data, 2.0, atol=1e-12)

        _, _, a_c = build_anchors(f_c, c_r, c_m, cfg.replace(wo_a_mod=True))
        np.testing.assert_allclose(a_c.data, 1.0, atol=1e-12)

        _, _, a_c = build_anchors(f_c, c_r, c_m,
                                  cfg.replace(wo_a_ref=True, wo_a_mod=True))
        np.testing.assert_array_equal(a_c.data, 0.0)


class TestAblationForward:
    def test_wo_c_ref_skips_the_branch(self, cfg, params):
        f_r, f_m, f_t = _rand_features(cfg, seed=14)
        s = forward_sample(params, f_r, f_m, f_t, cfg.replace(wo_c_ref=True))
        assert s.p_r is None and s.w_r is None
        assert s.a_r is s.f_c
        np.testing.assert_allclose(s.a_c.data, s.w_m.data * s.p_m.data, atol=1e-12)

    def test_wo_scd_uses_raw_branch_features(self, cfg, params):
        """Decoder bypass: contributions are the raw inputs, bit for bit."""
        f_r, f_m, f_t = _rand_features(cfg, seed=15)
        s = forward_sample(params, f_r, f_m, f_t, cfg.replace(wo_scd=True))
        np.testing.assert_array_equal(s.p_r.data, f_r)
        np.testing.assert_array_equal(s.p_m.data, f_m)

    def test_wo_scd_leaves_decoder_out_of_the_graph(self, cfg):
        f_r, f_m, f_t = _rand_features(cfg, seed=16)
        live = init_params(cfg, 0, random_final=True)  # open gate layers
        s = forward_sample(live, f_r, f_m, f_t, cfg.replace(wo_scd=True))
        g = ad.grads(ad.sum_all(s.a_c), live)
        for name in live:
            if name.startswith("decoder."):
                np.testing.assert_array_equal(g[name], 0.0)
        # the composer still feeds the gates, so it must receive gradient
        assert any(np.abs(g[n]).max() > 0 for n in live if n.startswith("composer."))


class TestInit:
    def test_shapes_match_declaration(self, cfg, params):
        shapes = param_shapes(cfg)
        assert set(params) == set(shapes)
        for name, t in params.items():
            assert t.shape == shapes[name]

    def test_same_seed_is_bit_identical(self, cfg):
        a = init_params(cfg, seed=5)
        b = init_params(cfg, seed=5)
        for name in a:
            assert np.array_equal(a[name].data, b[name].data)

    def test_random_final_differs_only_in_gate_outputs(self, cfg):
        a = init_params(cfg, seed=5)
        b = init_params(cfg, seed=5, random_final=True)
        for name in a:
            if name.startswith("wp_") and name.endswith((".w2", ".b2")):
                assert not np.array_equal(a[name].data, b[name].data)
            else:
                assert np.array_equal(a[name].data, b[name].data), name

    def test_forward_sample_returns_live_tensors(self, cfg, params):
        f_r, f_m, f_t = _rand_features(cfg, seed=17)
        s = forward_sample(params, f_r, f_m, f_t, cfg)
        assert isinstance(s, SampleForward)
        for field in (s.f_c, s.p_r, s.p_m, s.w_r, s.w_m, s.a_r, s.a_m, s.a_c, s.a_t):
            assert isinstance(field, ad.Tensor)
