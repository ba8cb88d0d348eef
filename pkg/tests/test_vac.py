import numpy as np
import pytest

from oracles import assert_close_grad, numeric_grad
from vacnet import kernels as K
from vacnet.kernels import ConfigError, IntegrityError
from vacnet.vac import (VacConfig, init_vac_params, vac_backward, vac_forward,
                        vac_param_count)


def make(c_in=16, c_down=4, e1=4, e2=4, pool=(2, 2), ek=3, groups=4, seed=0, **kw):
    cfg = VacConfig(c_in=c_in, c_down=c_down, e1=e1, e2=e2, c_up=c_in,
                    pool=pool, embed_kernel=ek, embed_groups=groups, **kw)
    params = init_vac_params(cfg, np.random.default_rng(seed))
    return cfg, params


class TestConfig:
    def test_invariants_enforced(self):
        with pytest.raises(ConfigError):
            VacConfig(c_in=4, c_down=8, e1=4, e2=8, c_up=4)   # no down-mix reduction
        with pytest.raises(ConfigError):
            VacConfig(c_in=8, c_down=4, e1=4, e2=4, c_up=6)   # c_up != c_in
        with pytest.raises(ConfigError):
            VacConfig(c_in=8, c_down=4, e1=4, e2=2, c_up=8)   # e2 != c_down
        with pytest.raises(ConfigError):
            VacConfig(c_in=8, c_down=4, e1=4, e2=4, c_up=8, embed_groups=3)


class TestForward:
    def test_pipeline_shapes(self):
        cfg, params = make()
        x = np.random.default_rng(1).standard_normal((1, 16, 8, 8))
        out, cache = vac_forward(x, params, cfg)
        assert cache["v_down"].shape == (1, 4, 8, 8)
        assert cache["q"].shape == (1, 4, 4, 4)
        assert cache["k_sig"].shape == (1, 4, 4, 4)
        assert cache["attn"].shape == (1, 4, 8, 8)
        assert cache["gated"].shape == (1, 4, 8, 8)
        assert out.shape == (1, 16, 8, 8)

    def test_zero_scale_annihilates(self):
        cfg, params = make()
        params.scale = np.zeros(())
        params.up_b[:] = np.arange(16, dtype=np.float64)
        x = np.random.default_rng(2).standard_normal((2, 16, 8, 8))
        out, cache = vac_forward(x, params, cfg)
        assert not cache["gated"].any()
        np.testing.assert_array_equal(
            out, np.broadcast_to(params.up_b[None, :, None, None], out.shape))

    @pytest.mark.parametrize("seed", range(4))
    def test_compositional_oracle(self, seed):
        cfg, params = make(seed=seed)
        x = np.random.default_rng(seed + 50).standard_normal((2, 16, 8, 8))
        out, _ = vac_forward(x, params, cfg)

        vd = K.conv2d_forward(x, params.down_w, params.down_b, cfg.down_spec())
        q, idx = K.maxpool2d_forward(vd, (2, 2), (2, 2))
        e = K.relu_forward(K.conv2d_forward(q, params.embed_grouped_w,
                                            params.embed_grouped_b,
                                            cfg.embed_grouped_spec()))
        k = K.conv2d_forward(e, params.embed_pointwise_w, params.embed_pointwise_b,
                             cfg.embed_pointwise_spec())
        attn = K.unpool2d_forward(K.sigmoid_forward(k), idx, vd.shape)
        gated = vd * attn * params.scale
        want = K.conv2d_forward(gated, params.up_w, params.up_b, cfg.up_spec())
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_output_shape_equals_input_for_random_configs(self):
        r = np.random.default_rng(99)
        for _ in range(50):
            c_in = int(r.integers(2, 12))
            c_down = int(r.integers(1, c_in + 1))
            g = int(r.choice([d for d in (1, 2, 4) if c_down % d == 0]))
            e1 = g * int(r.integers(1, 5))
            pk = int(r.integers(2, 4))
            h = int(r.integers(pk, 10))
            w = int(r.integers(pk, 10))
            cfg = VacConfig(c_in=c_in, c_down=c_down, e1=e1, e2=c_down, c_up=c_in,
                            pool=(pk, pk), embed_kernel=int(r.choice([1, 3])),
                            embed_groups=g)
            params = init_vac_params(cfg, r)
            x = r.standard_normal((1, c_in, h, w))
            out, _ = vac_forward(x, params, cfg)
            assert out.shape == x.shape

    def test_attention_sparsity_bound(self):
        r = np.random.default_rng(5)
        cfg, params = make(c_in=8, c_down=4, e1=8, e2=4, groups=2)
        for _ in range(10):
            x = r.standard_normal((2, 8, 7, 7))
            _, cache = vac_forward(x, params, cfg)
            attn = cache["attn"]
            windows = cache["q"].shape[2] * cache["q"].shape[3]
            for b in range(attn.shape[0]):
                nz = np.count_nonzero(attn[b])
                assert nz <= windows * cfg.c_down
            assert (attn >= 0).all() and (attn < 1).all()

    def test_identity_mixing_degrades_to_core(self):
        # With square identity mixing layers the block equals the pipeline
        # that skips down- and up-mixing entirely.
        c = 4
        cfg, params = make(c_in=c, c_down=c, e1=4, e2=c, groups=2, seed=3)
        params.down_w = np.eye(c).reshape(c, c, 1, 1)
        params.down_b = np.zeros(c)
        params.up_w = np.eye(c).reshape(c, c, 1, 1)
        params.up_b = np.zeros(c)
        x = np.random.default_rng(8).standard_normal((1, c, 6, 6))
        out, _ = vac_forward(x, params, cfg)

        q, idx = K.maxpool2d_forward(x, (2, 2), (2, 2))
        e = K.relu_forward(K.conv2d_forward(q, params.embed_grouped_w,
                                            params.embed_grouped_b,
                                            cfg.embed_grouped_spec()))
        k = K.conv2d_forward(e, params.embed_pointwise_w, params.embed_pointwise_b,
                             cfg.embed_pointwise_spec())
        attn = K.unpool2d_forward(K.sigmoid_forward(k), idx, x.shape)
        np.testing.assert_allclose(out, x * attn * params.scale, atol=1e-12)

    def test_nearest_expansion_mode(self):
        cfg, params = make(expand_mode="nearest")
        x = np.random.default_rng(4).standard_normal((1, 16, 8, 8))
        out, cache = vac_forward(x, params, cfg)
        assert out.shape == x.shape
        # nearest expansion repeats every pooled value across its window
        attn = cache["attn"]
        assert (attn > 0).all()

    def test_channel_mismatch_rejected(self):
        cfg, params = make()
        with pytest.raises(ConfigError):
            vac_forward(np.zeros((1, 8, 8, 8)), params, cfg)


class TestBackward:
    def test_zero_upstream(self):
        cfg, params = make()
        x = np.random.default_rng(0).standard_normal((1, 16, 8, 8))
        out, cache = vac_forward(x, params, cfg)
        gx, gp = vac_backward(np.zeros_like(out), cache, params, cfg)
        assert not gx.any()
        assert all(not arr.any() for _, arr in gp.as_list())

    def test_stale_cache_rejected(self):
        cfg, params = make()
        x = np.random.default_rng(0).standard_normal((1, 16, 8, 8))
        _, cache = vac_forward(x, params, cfg)
        with pytest.raises(IntegrityError):
            vac_backward(np.zeros((1, 16, 4, 4)), cache, params, cfg)

    @pytest.mark.parametrize("kwargs", [
        {},
        {"per_channel_scale": True},
        {"expand_mode": "nearest"},
    ])
    def test_finite_differences(self, kwargs):
        cfg, params = make(c_in=6, c_down=3, e1=3, e2=3, groups=3, seed=7, **kwargs)
        r = np.random.default_rng(70)
        x = r.standard_normal((1, 6, 5, 5))
        gout = r.standard_normal((1, 6, 5, 5))

        def loss():
            return float((vac_forward(x, params, cfg)[0] * gout).sum())

        _, cache = vac_forward(x, params, cfg)
        gx, gp = vac_backward(gout, cache, params, cfg)
        assert_close_grad(gx, numeric_grad(loss, x), 1e-5)
        for (name, analytic), (_, arr) in zip(gp.as_list(), params.as_list()):
            assert_close_grad(analytic, numeric_grad(loss, arr), 1e-5)

    def test_scale_gradient_formula(self):
        cfg, params = make(seed=2)
        r = np.random.default_rng(21)
        x = r.standard_normal((1, 16, 8, 8))
        gout = r.standard_normal((1, 16, 8, 8))
        out, cache = vac_forward(x, params, cfg)
        _, gp = vac_backward(gout, cache, params, cfg)

        def loss():
            return float((vac_forward(x, params, cfg)[0] * gout).sum())

        assert_close_grad(gp.scale, numeric_grad(loss, params.scale), 1e-5)
        # analytic form: sum of (upstream through up-mix) * V' * A
        g_gated, _, _ = K.conv2d_backward(gout, cache["gated"], params.up_w,
                                          cfg.up_spec())
        want = (g_gated * cache["v_down"] * cache["attn"]).sum()
        assert gp.scale == pytest.approx(want, rel=1e-12)


class TestParamCount:
    def test_reference_config(self):
        cfg, params = make()  # c_in=16, c_down=4, e1=4, e2=4, k3, groups=4
        count = vac_param_count(cfg)
        enumerated = sum(arr.size for _, arr in params.as_list())
        assert count == enumerated
        # per-layer sum: (64+4) + (36+4) + (16+4) + (64+16) + 1
        assert count == 209

    def test_groups_one_matches_general_formula(self):
        cfg, params = make(groups=1)
        assert vac_param_count(cfg) == sum(a.size for _, a in params.as_list())

    def test_doubling_c_in_delta(self):
        cfg1, _ = make(c_in=16)
        cfg2, _ = make(c_in=32)
        delta = vac_param_count(cfg2) - vac_param_count(cfg1)
        c_down = 4
        assert delta == c_down * 16 + 16 + c_down * 16  # down weights, up bias, up weights

    def test_per_channel_scale_counts(self):
        cfg, params = make(per_channel_scale=True)
        assert vac_param_count(cfg) == sum(a.size for _, a in params.as_list())
        assert vac_param_count(cfg) == 209 - 1 + 4
