import numpy as np
import pytest

from sphdiff import autodiff as ad
from sphdiff import so3
from sphdiff.canonical import ee_layout
from sphdiff.layers import CoeffsNode
from sphdiff.unet import SDTUConfig, SphericalTemporalUNet, timestep_embedding
from util import gradcheck, rel_err


@pytest.fixture
def rng():
    return np.random.default_rng(77)


COND = so3.RepLayout.uniform(2, 5)


def small_net(rng, **overrides):
    cfg = SDTUConfig(horizon=8, widths=(4, 8), timestep_embed_dim=8, **overrides)
    return cfg, SphericalTemporalUNet(cfg, COND, rng)


class TestConfig:
    def test_horizon_divisibility_enforced(self):
        with pytest.raises(ValueError):
            SDTUConfig(horizon=10, widths=(4, 8, 16))

    def test_unknown_activation_rejected(self):
        with pytest.raises(ValueError):
            SDTUConfig(activation="relu")

    def test_round_trips_through_dict(self):
        cfg = SDTUConfig(horizon=8, widths=(4, 8))
        assert SDTUConfig.from_dict(cfg.to_dict()) == cfg


class TestTimestepEmbedding:
    def test_k0_gives_zero_sines_unit_cosines(self):
        emb = timestep_embedding(0, 10)
        np.testing.assert_array_equal(emb[:5], np.zeros(5))
        np.testing.assert_array_equal(emb[5:], np.ones(5))

    def test_distinct_steps_differ(self):
        a, b = timestep_embedding(3, 16), timestep_embedding(47, 16)
        cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos < 1.0 - 1e-6

    def test_rotation_leaves_embedding_slice_unchanged(self, rng):
        # the embedding lives in degree-0 channels of the condition
        cfg, net = small_net(rng)
        lay = so3.RepLayout(((0, cfg.timestep_embed_dim),))
        emb = timestep_embedding(5, cfg.timestep_embed_dim)
        rotated = so3.rotate_data(emb, lay, so3.random_rotation(rng))
        np.testing.assert_array_equal(rotated, emb)

    def test_batched_steps(self):
        emb = timestep_embedding(np.array([0, 1, 2]), 8)
        assert emb.shape == (3, 8)


class TestForward:
    def test_output_shape_matches_input(self, rng):
        cfg, net = small_net(rng)
        a = rng.standard_normal((cfg.horizon, net.action_layout.total_dim))
        out = net(rng.standard_normal(COND.total_dim), a, 3)
        assert out.shape == a.shape

    def test_batched_forward(self, rng):
        cfg, net = small_net(rng)
        a = rng.standard_normal((5, cfg.horizon, net.action_layout.total_dim))
        cond = rng.standard_normal((5, COND.total_dim))
        out = net(cond, a, np.arange(5))
        assert out.shape == a.shape

    def test_horizon_mismatch_rejected(self, rng):
        cfg, net = small_net(rng)
        with pytest.raises(ValueError):
            net(rng.standard_normal(COND.total_dim),
                rng.standard_normal((cfg.horizon + 2, net.action_layout.total_dim)), 1)

    def test_condition_layout_mismatch_rejected(self, rng):
        cfg, net = small_net(rng)
        with pytest.raises(ValueError):
            net(rng.standard_normal(COND.total_dim + 1),
                rng.standard_normal((cfg.horizon, net.action_layout.total_dim)), 1)

    def test_zero_final_projection_gives_zero_output(self, rng):
        cfg, net = small_net(rng)
        for l in net.final.weights:
            net.final.weights[l].assign(np.zeros_like(net.final.weights[l].value))
        net.final.bias.assign(np.zeros_like(net.final.bias.value))
        out = net(rng.standard_normal(COND.total_dim),
                  rng.standard_normal((cfg.horizon, net.action_layout.total_dim)), 3)
        np.testing.assert_array_equal(out, np.zeros_like(out))

    def test_step_conditioning_is_live(self, rng):
        cfg, net = small_net(rng)
        cond = rng.standard_normal(COND.total_dim)
        a = rng.standard_normal((cfg.horizon, net.action_layout.total_dim))
        assert np.max(np.abs(net(cond, a, 1) - net(cond, a, 77))) > 1e-8


class TestEquivariance:
    def test_gate_config_exact(self, rng):
        cfg, net = small_net(rng)
        worst = 0.0
        for _ in range(50):
            cond = rng.standard_normal(COND.total_dim)
            a = rng.standard_normal((cfg.horizon, net.action_layout.total_dim))
            r = so3.random_rotation(rng)
            lhs = net(so3.rotate_data(cond, COND, r),
                      so3.rotate_data(a, net.action_layout, r), 4)
            rhs = so3.rotate_data(net(cond, a, 4), net.action_layout, r)
            worst = max(worst, rel_err(lhs, rhs))
        assert worst < 1e-10

    def test_grid_config_within_aliasing(self, rng):
        cfg, net = small_net(rng, activation="grid", grid_oversample=2)
        worst = 0.0
        for _ in range(10):
            cond = rng.standard_normal(COND.total_dim)
            a = rng.standard_normal((cfg.horizon, net.action_layout.total_dim))
            r = so3.random_rotation(rng)
            lhs = net(so3.rotate_data(cond, COND, r),
                      so3.rotate_data(a, net.action_layout, r), 4)
            rhs = so3.rotate_data(net(cond, a, 4), net.action_layout, r)
            worst = max(worst, rel_err(lhs, rhs))
        assert worst < 1e-2


class TestParameters:
    def test_param_count_matches_closed_form(self, rng):
        cfg, net = small_net(rng)
        L = cfg.band_limit
        degrees = list(range(L + 1))
        act = ee_layout(cfg.arms)
        cond_full_c = {l: COND.multiplicity(l) for l in degrees}
        cond_full_c[0] += cfg.timestep_embed_dim

        def hidden_c(w):
            return {l: w for l in degrees}

        def pre_c(w):
            out = hidden_c(w)
            return {l: (c + L * w if l == 0 else c) for l, c in out.items()}

        def conv_count(cin, cout, k):
            n = sum(k * cin.get(l, 0) * cout[l] for l in cout if cin.get(l, 0) > 0)
            return n + cout[0]  # degree-0 bias

        def linear_count(cin, cout, bias):
            n = sum(cin.get(l, 0) * cout[l] for l in cout if cin.get(l, 0) > 0)
            return n + (cout[0] if bias else 0)

        def film_count(w):
            return 2 * linear_count(cond_full_c, pre_c(w), True)

        def block_count(cin, w, k):
            n = conv_count(cin, pre_c(w), k) + film_count(w)
            if cin != hidden_c(w):
                n += linear_count(cin, hidden_c(w), False)
            return n

        k = cfg.kernel_size
        act_c = {l: act.multiplicity(l) for l in degrees}
        total = 0
        cin = act_c
        for i, w in enumerate(cfg.widths):
            total += block_count(cin, w, k) + block_count(hidden_c(w), w, k)
            if i < len(cfg.widths) - 1:
                total += conv_count(hidden_c(w), hidden_c(w), k)
            cin = hidden_c(w)
        for i in range(len(cfg.widths) - 2, -1, -1):
            w_deep, w = cfg.widths[i + 1], cfg.widths[i]
            total += conv_count(hidden_c(w_deep), hidden_c(w_deep), k) - w_deep  # unpool, no bias
            cat = {l: w_deep + w for l in degrees}
            total += block_count(cat, w, k) + block_count(hidden_c(w), w, k)
        total += linear_count(hidden_c(cfg.widths[0]), act_c, True)
        assert net.param_count() == total

    def test_unique_parameter_names(self, rng):
        _, net = small_net(rng)
        names = [p.name for p in net.parameters()]
        assert len(names) == len(set(names))

    def test_state_dict_round_trip(self, rng):
        cfg, net = small_net(rng)
        state = {k: v.copy() for k, v in net.state_dict().items()}
        _, net2 = small_net(np.random.default_rng(1))
        net2.load_state_dict(state)
        a = rng.standard_normal((cfg.horizon, net.action_layout.total_dim))
        cond = rng.standard_normal(COND.total_dim)
        np.testing.assert_array_equal(net(cond, a, 2), net2(cond, a, 2))

    def test_load_rejects_mismatched_names(self, rng):
        _, net = small_net(rng)
        state = net.state_dict()
        state["bogus"] = np.zeros(1)
        with pytest.raises(ValueError):
            net.load_state_dict(state)


class TestTwoArm:
    def test_arm_permutation_does_not_commute_by_default(self, rng):
        # separate per-arm channels: permuting arm blocks in the input must not
        # just permute the output unless weights are arm-symmetric
        cfg = SDTUConfig(horizon=8, widths=(4, 8), arms=2, timestep_embed_dim=8)
        net = SphericalTemporalUNet(cfg, COND, rng)
        lay = net.action_layout
        a = rng.standard_normal((cfg.horizon, lay.total_dim))
        cond = rng.standard_normal(COND.total_dim)

        def swap_arms(data):
            out = data.copy()
            for ch in range(lay.multiplicity(0) // 2):
                lo1, hi1 = lay.channel_range(0, ch)
                lo2, hi2 = lay.channel_range(0, ch + 1)
                out[..., lo1:hi1], out[..., lo2:hi2] = (
                    data[..., lo2:hi2].copy(), data[..., lo1:hi1].copy(),
                )
            for v in range(4):
                lo1, hi1 = lay.channel_range(1, v)
                lo2, hi2 = lay.channel_range(1, 4 + v)
                out[..., lo1:hi1], out[..., lo2:hi2] = (
                    data[..., lo2:hi2].copy(), data[..., lo1:hi1].copy(),
                )
            return out

        base = net(cond, a, 3)
        swapped = net(cond, swap_arms(a), 3)
        assert np.max(np.abs(swapped - swap_arms(base))) > 1e-6


class TestGradients:
    def test_tiny_config_finite_differences(self, rng):
        cfg = SDTUConfig(horizon=4, widths=(2, 4), timestep_embed_dim=4)
        lay = so3.RepLayout.uniform(2, 3)
        net = SphericalTemporalUNet(cfg, lay, rng)
        cond_data = rng.standard_normal(lay.total_dim)
        a = rng.standard_normal((4, net.action_layout.total_dim))
        tgt = rng.standard_normal(a.shape)

        def loss_fn():
            out = net.forward(CoeffsNode(lay, ad.Node(cond_data)), a, 3)
            d = ad.sub(out, ad.Node(tgt))
            return ad.reduce_sum(ad.mul(d, d))

        assert gradcheck(loss_fn, net.parameters(), rng, n_entries=2) < 1e-5
