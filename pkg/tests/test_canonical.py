import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphdiff import canonical as cn
from sphdiff import so3


@pytest.fixture
def rng():
    return np.random.default_rng(55)


def random_ee(rng):
    return cn.EndEffectorState(
        rng.uniform(-0.4, 0.4, 3), so3.random_rotation(rng), rng.uniform(0, 1)
    )


def random_window(rng, arms=1, h=2):
    obs = so = cn.SceneObservation(
        rng.uniform(-0.5, 0.5, (16, 3)), rng.uniform(0, 1, (16, 3))
    )
    snaps = tuple(
        cn.StateSnapshot(so, tuple(random_ee(rng) for _ in range(arms))) for _ in range(h)
    )
    return cn.StateWindow(snaps)


def random_chunk(rng, arms=1, t=6):
    return cn.ActionChunk(
        tuple(tuple(random_ee(rng) for _ in range(arms)) for _ in range(t))
    )


class TestTypes:
    def test_aperture_clamped(self):
        e = cn.EndEffectorState(np.zeros(3), so3.Rotation.identity(), 1.7)
        assert e.aperture == 1.0
        e = cn.EndEffectorState(np.zeros(3), so3.Rotation.identity(), -0.3)
        assert e.aperture == 0.0

    def test_observation_requires_points(self):
        with pytest.raises(ValueError):
            cn.SceneObservation(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_observation_rejects_nonfinite(self):
        pts = np.array([[0.0, 0.0, np.inf]])
        with pytest.raises(ValueError):
            cn.SceneObservation(pts, np.zeros((1, 3)))

    def test_observation_colors_clamped(self):
        obs = cn.SceneObservation(np.zeros((1, 3)), np.array([[2.0, -1.0, 0.5]]))
        np.testing.assert_array_equal(obs.colors, [[1.0, 0.0, 0.5]])

    def test_window_requires_consistent_arms(self, rng):
        s1 = cn.StateSnapshot(random_window(rng).newest.obs, (random_ee(rng),))
        s2 = cn.StateSnapshot(s1.obs, (random_ee(rng), random_ee(rng)))
        with pytest.raises(ValueError):
            cn.StateWindow((s1, s2))

    def test_ee_layout_dims(self):
        assert cn.ee_layout(1).total_dim == 13
        assert cn.ee_layout(2).total_dim == 26
        with pytest.raises(ValueError):
            cn.ee_layout(3)


class TestEncodeDecode:
    def test_identity_pose_block(self):
        e = cn.EndEffectorState(np.zeros(3), so3.Rotation.identity(), 0.0)
        block = cn.encode_ee(e)
        assert block[0] == 0.0
        np.testing.assert_array_equal(block[1:4], np.zeros(3))
        np.testing.assert_array_equal(block[4:7], so3.vector_to_coeffs([1, 0, 0]))
        np.testing.assert_array_equal(block[7:10], so3.vector_to_coeffs([0, 1, 0]))
        np.testing.assert_array_equal(block[10:13], so3.vector_to_coeffs([0, 0, 1]))

    def test_encode_equivariance(self, rng):
        lay = cn.ee_layout(1)
        for _ in range(50):
            e = random_ee(rng)
            g = so3.random_rotation(rng)
            lhs = cn.encode_ee(e.rotated(g))
            rhs = so3.rotate_data(cn.encode_ee(e), lay, g)
            assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_aperture_invariant_under_rotation(self, rng):
        e = random_ee(rng)
        g = so3.random_rotation(rng)
        assert cn.encode_ee(e.rotated(g))[0] == cn.encode_ee(e)[0]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000))
    def test_round_trip_exact_on_valid_poses(self, seed):
        r = np.random.default_rng(seed)
        e = cn.EndEffectorState(r.uniform(-1, 1, 3), so3.random_rotation(r), r.uniform(0, 1))
        back = cn.decode_ee(cn.encode_ee(e))
        np.testing.assert_allclose(back.position, e.position, atol=1e-15)
        np.testing.assert_allclose(back.rotation.matrix, e.rotation.matrix, atol=1e-14)
        assert back.aperture == pytest.approx(e.aperture, abs=1e-15)

    def test_noisy_block_decodes_to_valid_rotation(self, rng):
        e = random_ee(rng)
        block = cn.encode_ee(e) + 0.05 * rng.standard_normal(13)
        back = cn.decode_ee(block)
        m = back.rotation.matrix
        assert np.max(np.abs(m.T @ m - np.eye(3))) < 1e-12
        assert abs(np.linalg.det(m) - 1) < 1e-12

    def test_parallel_columns_raise_degenerate(self):
        block = np.zeros(13)
        block[4:7] = so3.vector_to_coeffs([1.0, 0, 0])
        block[7:10] = so3.vector_to_coeffs([1.0, 1e-9, 0])
        with pytest.raises(cn.DegenerateRotationError):
            cn.decode_ee(block)

    def test_nonfinite_block_raises_degenerate(self):
        block = np.full(13, np.nan)
        with pytest.raises(cn.DegenerateRotationError):
            cn.decode_ee(block)

    def test_multi_arm_chunk_round_trip(self, rng):
        chunk = random_chunk(rng, arms=2, t=4)
        data = cn.encode_chunk(chunk)
        assert data.shape == (4, 26)
        back = cn.decode_chunk(data, arms=2)
        for t in range(4):
            for a in range(2):
                np.testing.assert_allclose(
                    back.steps[t][a].position, chunk.steps[t][a].position, atol=1e-14
                )
                np.testing.assert_allclose(
                    back.steps[t][a].rotation.matrix, chunk.steps[t][a].rotation.matrix, atol=1e-13
                )


class TestCanonicalize:
    def test_translation_cancels(self, rng):
        window = random_window(rng)
        chunk = random_chunk(rng)
        offset = rng.uniform(-10, 10, 3)
        w1, c1 = cn.canonicalize(window, chunk, 0)
        w2, c2 = cn.canonicalize(window.translated(offset), chunk.translated(offset), 0)
        for s1, s2 in zip(w1.snapshots, w2.snapshots):
            assert np.max(np.abs(s1.obs.points - s2.obs.points)) < 1e-12
            for e1, e2 in zip(s1.ee, s2.ee):
                assert np.max(np.abs(e1.position - e2.position)) < 1e-12
        for t1, t2 in zip(c1.steps, c2.steps):
            for e1, e2 in zip(t1, t2):
                assert np.max(np.abs(e1.position - e2.position)) < 1e-12
                np.testing.assert_array_equal(e1.rotation.matrix, e2.rotation.matrix)

    def test_gripper_at_origin_is_noop(self, rng):
        window = random_window(rng)
        newest = window.newest
        moved = window.translated(-newest.ee[0].position)
        w_can, _ = cn.canonicalize(moved, None, 0)
        for s_in, s_out in zip(moved.snapshots, w_can.snapshots):
            np.testing.assert_allclose(s_out.obs.points, s_in.obs.points, atol=1e-15)

    def test_newest_gripper_lands_at_origin(self, rng):
        w_can, _ = cn.canonicalize(random_window(rng), None, 0)
        np.testing.assert_allclose(w_can.newest.ee[0].position, np.zeros(3), atol=1e-15)

    def test_rotation_about_gripper_commutes(self, rng):
        window = random_window(rng)
        chunk = random_chunk(rng)
        origin = window.newest.ee[0].position
        g = so3.random_rotation(rng)
        # rotate the whole scene about the gripper position
        rotated = window.translated(-origin).rotated(g).translated(origin)
        chunk_rot = chunk.translated(-origin).rotated(g).translated(origin)
        w1, c1 = cn.canonicalize(rotated, chunk_rot, 0)
        w0, c0 = cn.canonicalize(window, chunk, 0)
        np.testing.assert_allclose(
            w1.newest.obs.points, g.apply(w0.newest.obs.points), atol=1e-12
        )
        for t in range(chunk.horizon):
            np.testing.assert_allclose(
                c1.steps[t][0].position, g.apply(c0.steps[t][0].position), atol=1e-12
            )

    def test_idempotent(self, rng):
        window = random_window(rng)
        chunk = random_chunk(rng)
        w1, c1 = cn.canonicalize(window, chunk, 0)
        w2, c2 = cn.canonicalize(w1, c1, 0)
        for s1, s2 in zip(w1.snapshots, w2.snapshots):
            np.testing.assert_array_equal(s1.obs.points, s2.obs.points)
        for t1, t2 in zip(c1.steps, c2.steps):
            np.testing.assert_array_equal(t1[0].position, t2[0].position)

    def test_two_arm_canonicalization_shifts_both(self, rng):
        window = random_window(rng, arms=2)
        chunk = random_chunk(rng, arms=2)
        w_can, c_can = cn.canonicalize(window, chunk, 1)
        origin = window.newest.ee[1].position
        np.testing.assert_allclose(w_can.newest.ee[1].position, np.zeros(3), atol=1e-15)
        np.testing.assert_allclose(
            w_can.newest.ee[0].position, window.newest.ee[0].position - origin, atol=1e-15
        )
        np.testing.assert_allclose(
            c_can.steps[0][0].position, chunk.steps[0][0].position - origin, atol=1e-15
        )

    def test_invalid_arm_rejected(self, rng):
        with pytest.raises(ValueError):
            cn.canonicalize(random_window(rng), None, 1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 100_000))
    def test_uncanonicalize_round_trip(self, seed):
        r = np.random.default_rng(seed)
        window = random_window(r)
        chunk = random_chunk(r)
        origin = window.newest.ee[0].position
        _, c_can = cn.canonicalize(window, chunk, 0)
        back = cn.uncanonicalize(c_can, origin)
        for t in range(chunk.horizon):
            np.testing.assert_allclose(
                back.steps[t][0].position, chunk.steps[t][0].position, atol=1e-12
            )
