import numpy as np
import pytest

from monocal import autodiff as ad
from monocal import motion as mo
from monocal.motion import (RigidMotion, TranslationField, boxify,
                            compose_motion, compose_translation, euler_angles,
                            invert_motion, rotation_matrix)
from conftest import gradcheck


class TestRotationMatrix:
    def test_zero_angles_identity(self):
        np.testing.assert_array_equal(rotation_matrix(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_y(self):
        r = rotation_matrix(np.array([0.0, np.pi / 2, 0.0]))
        np.testing.assert_allclose(r @ np.array([0.0, 0.0, 1.0]),
                                   [1.0, 0.0, 0.0], atol=1e-15)

    def test_orthogonality_and_det(self, rng):
        for _ in range(50):
            r = rotation_matrix(rng.uniform(-np.pi, np.pi, 3))
            assert np.max(np.abs(r.T @ r - np.eye(3))) <= 1e-12
            assert abs(np.linalg.det(r) - 1.0) <= 1e-12

    def test_euler_round_trip(self, rng):
        for _ in range(50):
            angles = rng.uniform(-1.2, 1.2, 3)
            back = euler_angles(rotation_matrix(angles))
            np.testing.assert_allclose(back, angles, atol=1e-12)

    def test_gradcheck(self, rng):
        def loss(tape, angles):
            r = rotation_matrix(angles)
            v = ad.apply_matrix(np.array([0.3, -0.5, 2.0]), r)
            return ad.sum_(v * np.array([1.0, 2.0, 3.0]))

        gradcheck(loss, [rng.uniform(-0.5, 0.5, 3)])


class TestComposeTranslation:
    def test_zero_mask_gives_constant_field(self, rng):
        t0 = np.array([0.1, -0.2, 0.5])
        field = TranslationField(t0, rng.normal(0, 1, (4, 6, 3)),
                                 np.zeros((4, 6)))
        out = compose_translation(field)
        assert np.all(out == t0)  # bit-exact on the mask complement

    def test_full_mask_cancellation(self):
        t0 = np.array([0.1, -0.2, 0.5])
        residual = -np.ones((3, 3, 3)) * t0
        out = compose_translation(TranslationField(t0, residual, np.ones((3, 3))))
        np.testing.assert_array_equal(out, np.zeros((3, 3, 3)))

    def test_matches_pointwise_reference(self, rng):
        t0 = rng.normal(0, 1, 3)
        dt = rng.normal(0, 1, (5, 4, 3))
        mask = rng.integers(0, 2, (5, 4))
        out = compose_translation(TranslationField(t0, dt, mask))
        for i in range(5):
            for j in range(4):
                np.testing.assert_array_equal(out[i, j], t0 + mask[i, j] * dt[i, j])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            compose_translation(TranslationField(np.zeros(3), np.zeros((4, 4, 3)),
                                                 np.zeros((3, 4))))

    def test_nonbinary_mask_rejected(self):
        with pytest.raises(ValueError):
            compose_translation(TranslationField(np.zeros(3), np.zeros((2, 2, 3)),
                                                 np.full((2, 2), 0.5)))

    def test_differentiable_in_t0_and_residual(self, rng):
        mask = rng.integers(0, 2, (3, 4)).astype(float)

        def loss(tape, t0, dt):
            out = compose_translation(TranslationField(t0, dt, mask))
            return ad.sum_(out * out)

        gradcheck(loss, [rng.uniform(0.1, 1, 3), rng.uniform(0.1, 1, (3, 4, 3))])


class TestBoxify:
    def test_l_shaped_blob_fills_bounding_box(self):
        m = np.zeros((6, 6), dtype=bool)
        m[1:5, 1] = True
        m[4, 1:4] = True
        out = boxify([m])
        expected = np.zeros((6, 6), dtype=bool)
        expected[1:5, 1:4] = True
        np.testing.assert_array_equal(out, expected)

    def test_no_instances(self):
        out = boxify([], shape=(4, 5))
        assert out.shape == (4, 5) and not out.any()

    def test_empty_instance_contributes_nothing(self):
        m = np.zeros((4, 4), dtype=bool)
        blob = np.zeros((4, 4), dtype=bool)
        blob[2, 2] = True
        np.testing.assert_array_equal(boxify([m, blob]), boxify([blob]))

    def test_union_matches_brute_force(self, rng):
        def brute_force(masks):
            out = np.zeros(masks[0].shape, dtype=bool)
            for m in masks:
                ys, xs = np.nonzero(m)
                if ys.size == 0:
                    continue
                for i in range(m.shape[0]):
                    for j in range(m.shape[1]):
                        if ys.min() <= i <= ys.max() and xs.min() <= j <= xs.max():
                            out[i, j] = True
            return out

        for _ in range(10):
            masks = [rng.random((8, 9)) < 0.1, rng.random((8, 9)) < 0.1]
            np.testing.assert_array_equal(boxify(masks), brute_force(masks))

    def test_monotone_in_instances(self, rng):
        a = rng.random((7, 7)) < 0.15
        b = rng.random((7, 7)) < 0.15
        one = boxify([a])
        two = boxify([a, b])
        assert np.all(two[one])  # adding an instance never removes pixels


class TestInvertMotion:
    def test_identity(self):
        m = RigidMotion(np.zeros(3), np.zeros(3))
        inv = invert_motion(m)
        np.testing.assert_allclose(inv.angles, np.zeros(3), atol=1e-15)
        np.testing.assert_allclose(inv.translation, np.zeros(3), atol=1e-15)

    def test_pure_translation(self):
        t = np.array([1.0, -2.0, 3.0])
        inv = invert_motion(RigidMotion(np.zeros(3), t))
        np.testing.assert_allclose(inv.translation, -t, atol=1e-15)

    def test_round_trip_to_identity(self, rng):
        for _ in range(30):
            m = RigidMotion(rng.uniform(-1, 1, 3), rng.normal(0, 2, 3))
            round_trip = compose_motion(m, invert_motion(m))
            np.testing.assert_allclose(round_trip.matrix(), np.eye(3), atol=1e-12)
            np.testing.assert_allclose(round_trip.translation, np.zeros(3),
                                       atol=1e-12)

    def test_transform_points_round_trip(self, rng):
        m = RigidMotion(np.array([0.1, -0.2, 0.3]), np.array([0.5, 0.0, -1.0]))
        inv = invert_motion(m)
        p = rng.normal(0, 2, 3)
        q = m.matrix() @ p + m.translation
        back = inv.matrix() @ q + inv.translation
        np.testing.assert_allclose(back, p, atol=1e-12)
