import json

import numpy as np
import pytest

from sphdiff import autodiff as ad
from sphdiff import so3
from sphdiff.layers import CoeffsNode, rotate
from util import gradcheck


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def fd_input_grad(fn, x, h=1e-6):
    """Central finite differences of scalar fn w.r.t. every entry of x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def input_grad(op, x, *args, **kwargs):
    node = ad.Node(x, requires_grad=True)
    out = op(node, *args, **kwargs)
    ad.backward(ad.reduce_sum(ad.mul(out, out)))
    return node.grad


def check_op(op, x, *args, rng=None, tol=1e-6, **kwargs):
    def scalar(v):
        with ad.no_grad():
            out = op(ad.Node(v), *args, **kwargs)
        return float(np.sum(out.value**2))

    got = input_grad(op, x, *args, **kwargs)
    want = fd_input_grad(scalar, x)
    assert np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1.0) < tol


class TestPrimitiveGradients:
    def test_add_passes_gradient_unchanged(self, rng):
        a = ad.Node(rng.standard_normal((3, 4)), requires_grad=True)
        b = ad.Node(rng.standard_normal((3, 4)), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.add(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
        np.testing.assert_array_equal(b.grad, np.ones((3, 4)))

    def test_add_broadcast_unbroadcasts(self, rng):
        a = ad.Node(rng.standard_normal((5, 3)), requires_grad=True)
        b = ad.Node(rng.standard_normal(3), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.add(a, b)))
        np.testing.assert_array_equal(b.grad, np.full(3, 5.0))

    @pytest.mark.parametrize(
        "op", [ad.sigmoid, ad.silu, ad.sum_last, ad.vec_norm, lambda x: ad.scale(x, -2.5)]
    )
    def test_elementwise_ops(self, op, rng):
        check_op(op, rng.standard_normal((4, 6)) + 0.3)

    def test_mul_and_sub(self, rng):
        x = rng.standard_normal((3, 5))
        y = rng.standard_normal((3, 5))
        check_op(lambda a: ad.mul(a, ad.Node(y)), x)
        check_op(lambda a: ad.sub(a, ad.Node(y)), x)

    def test_matmul(self, rng):
        m = rng.standard_normal((5, 7))
        check_op(lambda a: ad.matmul(a, m), rng.standard_normal((4, 5)))

    def test_channel_mix_input_and_weight(self, rng):
        x = rng.standard_normal((2, 6, 3, 5))
        w = ad.Parameter("w", rng.standard_normal((4, 3)))

        def loss_fn():
            out = ad.channel_mix(ad.Node(x), w)
            return ad.reduce_sum(ad.mul(out, out))

        assert gradcheck(loss_fn, [w], rng) < 1e-6
        check_op(lambda a: ad.channel_mix(a, ad.Node(w.value)), x)

    def test_slice_concat_reshape(self, rng):
        x = rng.standard_normal((3, 8))
        check_op(lambda a: ad.slice_last(a, 2, 6), x)
        check_op(lambda a: ad.concat_last([a, ad.scale(a, 2.0)]), x)
        check_op(lambda a: ad.reshape(a, (3, 2, 4)), x)

    def test_vec_norm_gradient_formula(self, rng):
        x = rng.standard_normal(6) + 0.5
        node = ad.Node(x, requires_grad=True)
        ad.backward(ad.vec_norm(ad.reshape(node, (1, 6))))
        np.testing.assert_allclose(node.grad, x / np.linalg.norm(x), atol=1e-12)

    def test_vec_norm_zero_convention(self):
        node = ad.Node(np.zeros(4), requires_grad=True)
        ad.backward(ad.vec_norm(ad.reshape(node, (1, 4))))
        np.testing.assert_array_equal(node.grad, np.zeros(4))

    def test_safe_unit(self, rng):
        check_op(lambda a: ad.safe_unit(a), rng.standard_normal((5, 4)) + 0.4)

    def test_safe_unit_zero_guard(self):
        node = ad.Node(np.zeros((2, 3)), requires_grad=True)
        out = ad.safe_unit(node)
        np.testing.assert_array_equal(out.value, np.zeros((2, 3)))
        ad.backward(ad.reduce_sum(out))
        np.testing.assert_array_equal(node.grad, np.zeros((2, 3)))

    def test_reciprocal_clamped(self, rng):
        check_op(lambda a: ad.reciprocal_clamped(a, 1e-3), rng.uniform(0.5, 2.0, (4, 3)))

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("batched", [False, True])
    def test_time_conv_gradients(self, stride, batched, rng):
        shape = (2, 7, 3, 5) if batched else (7, 3, 5)
        x = rng.standard_normal(shape)
        w = ad.Parameter("w", rng.standard_normal((5, 3, 4)) * 0.3)

        def loss_fn():
            out = ad.time_conv(ad.Node(x), w, stride)
            return ad.reduce_sum(ad.mul(out, out))

        assert gradcheck(loss_fn, [w], rng, n_entries=6) < 1e-6
        check_op(lambda a: ad.time_conv(a, ad.Node(w.value), stride), x)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_time_conv_transpose_gradients(self, stride, rng):
        y = rng.standard_normal((4, 4, 5))
        w = ad.Parameter("w", rng.standard_normal((5, 3, 4)) * 0.3)

        def loss_fn():
            out = ad.time_conv_transpose(ad.Node(y), w, stride)
            return ad.reduce_sum(ad.mul(out, out))

        assert gradcheck(loss_fn, [w], rng, n_entries=6) < 1e-6
        check_op(lambda a: ad.time_conv_transpose(a, ad.Node(w.value), stride), y)

    def test_conv_with_unit_kernel_is_identity(self, rng):
        x = rng.standard_normal((6, 1, 3))
        w = ad.Node(np.ones((1, 1, 1)))
        out = ad.time_conv(ad.Node(x), w, 1)
        np.testing.assert_array_equal(out.value, x)

    def test_conv_output_length_is_ceil(self, rng):
        x = rng.standard_normal((7, 2, 3))
        w = ad.Node(rng.standard_normal((5, 2, 2)))
        assert ad.time_conv(ad.Node(x), w, 2).value.shape[0] == 4

    def test_shape_mismatch_message_contains_shapes(self, rng):
        x = ad.Node(rng.standard_normal((3, 4)))
        with pytest.raises(ValueError, match=r"\(3, 4\)"):
            ad.matmul(x, np.zeros((5, 2)))


class TestBackwardSemantics:
    def test_fanout_accumulates(self, rng):
        x = ad.Node(rng.standard_normal(4), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.add(x, x)))
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0))

    def test_two_backward_passes_identical(self, rng):
        x = ad.Node(rng.standard_normal((3, 5)), requires_grad=True)
        y = ad.silu(ad.mul(x, x))
        loss = ad.reduce_sum(y)
        ad.backward(loss)
        first = x.grad.copy()
        x.grad = None
        loss.grad = None
        ad.backward(loss)
        np.testing.assert_array_equal(x.grad, first)

    def test_backward_requires_scalar(self, rng):
        x = ad.Node(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.scale(x, 2.0))

    def test_no_grad_builds_no_tape(self, rng):
        x = ad.Node(rng.standard_normal(3), requires_grad=True)
        with ad.no_grad():
            out = ad.silu(x)
        assert not out.requires_grad
        assert out.parents == ()

    def test_gradient_through_rotation_is_transposed_rotation(self, rng):
        # chain rule through an orthogonal map: grad of f(rotate(x)) equals
        # the inverse rotation applied to grad f
        lay = so3.RepLayout.uniform(2, 2)
        r = so3.random_rotation(rng)
        x = rng.standard_normal((3, lay.total_dim))
        tgt = rng.standard_normal((3, lay.total_dim))

        def run(inp, rot):
            node = ad.Node(inp, requires_grad=True)
            feat = CoeffsNode(lay, node)
            h = rotate(feat, rot) if rot is not None else feat
            d = ad.sub(ad.silu(h.node), ad.Node(tgt))
            ad.backward(ad.reduce_sum(ad.mul(d, d)))
            return node.grad

        base_at_rotated = run(so3.rotate_data(x, lay, r), None)
        composed = run(x, r)
        np.testing.assert_allclose(
            composed, so3.rotate_data(base_at_rotated, lay, r.inverse()), atol=1e-9
        )


class TestAdam:
    def test_single_step_matches_hand_computation(self):
        p = ad.Parameter("p", np.array([1.0]))
        opt = ad.Adam([p], lr=0.01, warmup_steps=0)
        p.grad = np.array([0.5])
        opt.step()
        m_hat = 0.5
        v_hat = 0.25
        expected = 1.0 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(p.value, [expected], atol=1e-14)

    def test_deterministic_given_state(self, rng):
        def run():
            p = ad.Parameter("p", np.arange(4.0))
            opt = ad.Adam([p], lr=0.1, total_steps=10, warmup_steps=2)
            g = np.random.default_rng(3)
            for _ in range(10):
                p.grad = g.standard_normal(4)
                opt.step()
            return p.value.copy()

        np.testing.assert_array_equal(run(), run())

    def test_warmup_then_cosine_decay(self):
        p = ad.Parameter("p", np.zeros(1))
        opt = ad.Adam([p], lr=1.0, total_steps=100, warmup_steps=10)
        lrs = []
        for _ in range(100):
            lrs.append(opt.current_lr())
            opt.step_count += 1
        assert lrs[0] == pytest.approx(0.1)
        assert lrs[9] == pytest.approx(1.0)
        assert all(a >= b - 1e-12 for a, b in zip(lrs[9:], lrs[10:]))
        assert lrs[-1] < 0.01

    def test_duplicate_names_rejected(self):
        p1, p2 = ad.Parameter("x", np.zeros(1)), ad.Parameter("x", np.zeros(2))
        with pytest.raises(ValueError):
            ad.Adam([p1, p2])

    def test_moment_shapes_match_parameters(self, rng):
        params = [ad.Parameter("a", rng.standard_normal((2, 3))), ad.Parameter("b", rng.standard_normal(5))]
        opt = ad.Adam(params)
        for p, m, v in zip(params, opt.m, opt.v):
            assert m.shape == p.value.shape
            assert v.shape == p.value.shape


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path, rng):
        params = {
            "layer.w": rng.standard_normal((3, 4)),
            "layer.b": rng.standard_normal(4),
        }
        path = tmp_path / "ckpt.json"
        ad.save_checkpoint(path, params, {"widths": [1, 2]})
        header, loaded = ad.load_checkpoint(path)
        assert header["format_version"] == ad.CHECKPOINT_VERSION
        assert header["model_config_hash"] == ad.config_hash({"widths": [1, 2]})
        for name, v in params.items():
            np.testing.assert_array_equal(loaded[name], v)

    def test_checkpoint_is_json_with_shapes(self, tmp_path, rng):
        path = tmp_path / "ckpt.json"
        ad.save_checkpoint(path, {"w": rng.standard_normal((2, 5))}, {})
        blob = json.loads(path.read_text())
        assert blob["params"]["w"]["shape"] == [2, 5]

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "ckpt.json"
        ad.save_checkpoint(path, {"w": np.zeros(1)}, {})
        blob = json.loads(path.read_text())
        blob["format_version"] = 99
        path.write_text(json.dumps(blob))
        with pytest.raises(ValueError):
            ad.load_checkpoint(path)
