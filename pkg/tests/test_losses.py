import numpy as np
import pytest

from monocal import autodiff as ad
from monocal import synth
from monocal.autodiff import _data
from monocal.camera import CameraModel, intrinsic_matrix
from monocal.losses import (FramePair, LossWeights, PairState,
                            cycle_consistency, occlusion_aware_l1,
                            total_loss, translation_smoothness,
                            weighted_ssim_loss)
from monocal.image import ssim
from monocal.motion import (RigidMotion, TranslationField, invert_motion,
                            rotation_matrix)
from monocal.synth import (pose_from_motion, preset_two_planes,
                           relative_motion, render, render_pair)
from monocal.warp import warp_frame, occlusion_mask, symmetrize
from conftest import finite_difference


def gt_pair_state(scene, cam, poses, tape=None, depth_scale=1.0,
                  with_residual=False):
    """Ground-truth state for a rendered pair (optionally on a tape)."""
    ra, rb = render_pair(scene, cam, poses[0], poses[1])
    m = relative_motion(poses[0], poses[1])
    mi = relative_motion(poses[1], poses[0])
    pair = FramePair(rgb_a=ra.rgb, rgb_b=rb.rgb, gt_depth_a=ra.depth,
                     gt_depth_b=rb.depth, gt_pose_a=poses[0], gt_pose_b=poses[1])

    def wrap(x, name):
        return tape.variable(x, name) if tape is not None else x

    H, W = ra.depth.shape
    resid_ab = np.zeros((H, W, 3)) if with_residual else None
    resid_ba = np.zeros((H, W, 3)) if with_residual else None
    mask = np.zeros((H, W)) if with_residual else None
    state = PairState(
        depth_a=wrap(ra.depth * depth_scale, "depth_a"),
        depth_b=wrap(rb.depth * depth_scale, "depth_b"),
        angles_ab=wrap(m.angles, "angles_ab"),
        tfield_ab=TranslationField(wrap(m.translation * depth_scale, "t_ab"),
                                   wrap(resid_ab, "dt_ab") if with_residual else None,
                                   mask),
        angles_ba=wrap(mi.angles, "angles_ba"),
        tfield_ba=TranslationField(wrap(mi.translation * depth_scale, "t_ba"),
                                   wrap(resid_ba, "dt_ba") if with_residual else None,
                                   mask),
        cam=cam)
    return pair, state, (ra, rb)


class TestOcclusionAwareL1:
    def test_identical_grids_zero(self, rng):
        g = rng.uniform(0, 1, (4, 5))
        assert occlusion_aware_l1(g, g, np.ones((4, 5))) == 0.0

    def test_constant_difference_half_mask(self):
        a = np.zeros((4, 6))
        b = np.ones((4, 6))
        mask = np.zeros((4, 6))
        mask[:, :3] = 1
        assert occlusion_aware_l1(a, b, mask) == 1.0

    def test_empty_mask_gives_zero(self, rng):
        a, b = rng.uniform(0, 1, (3, 3)), rng.uniform(0, 1, (3, 3))
        assert float(_data(occlusion_aware_l1(a, b, np.zeros((3, 3))))) == 0.0

    def test_matches_scalar_reference(self, rng):
        a = rng.uniform(0, 1, (5, 4, 3))
        b = rng.uniform(0, 1, (5, 4, 3))
        mask = rng.integers(0, 2, (5, 4))
        expected_terms = []
        for i in range(5):
            for j in range(4):
                if mask[i, j]:
                    expected_terms.append(np.abs(a[i, j] - b[i, j]).sum())
        expected = np.mean(expected_terms)
        np.testing.assert_allclose(occlusion_aware_l1(a, b, mask), expected,
                                   rtol=1e-13)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            occlusion_aware_l1(np.zeros((3, 3)), np.zeros((3, 4)),
                               np.ones((3, 3)))


class TestWeightedSSIM:
    def test_zero_discrepancy_plain_ssim(self, rng):
        a = rng.uniform(0.2, 0.8, (6, 6))
        b = np.clip(a + rng.normal(0, 0.05, (6, 6)), 0, 1)
        d = np.zeros((6, 6))
        got = float(_data(weighted_ssim_loss(a, b, d)))
        plain = float(np.mean((1.0 - _data(ssim(a, b))) * 0.5))
        np.testing.assert_allclose(got, plain, rtol=1e-12)

    def test_identical_images_zero(self, rng):
        a = rng.uniform(0, 1, (5, 5))
        d = rng.uniform(0, 2, (5, 5))
        assert abs(float(_data(weighted_ssim_loss(a, a, d)))) < 1e-15

    def test_weight_half_when_d_equals_rho(self, rng):
        # constant discrepancy: rho equals d so omega is exactly 1/2
        a = rng.uniform(0.2, 0.8, (6, 6))
        b = np.clip(a + rng.normal(0, 0.05, (6, 6)), 0, 1)
        d = np.full((6, 6), 0.7)
        got = float(_data(weighted_ssim_loss(a, b, d)))
        plain = float(np.mean((1.0 - _data(ssim(a, b))) * 0.5))
        np.testing.assert_allclose(got, 0.5 * plain, rtol=1e-12)


class TestCycleConsistency:
    def test_exact_inverse_motions_zero(self):
        scene, cam, poses = preset_two_planes()
        ra, rb = render_pair(scene, cam, poses[0], poses[1])
        m = relative_motion(poses[0], poses[1])
        mi = invert_motion(m)
        shape = ra.depth.shape
        fwd, _ = symmetrize(ra.depth, rb.depth, m.angles,
                            TranslationField(m.translation), mi.angles,
                            TranslationField(mi.translation), cam)
        t_ab = np.broadcast_to(m.translation, shape + (3,))
        t_ba = np.broadcast_to(mi.translation, shape + (3,))
        rot_term, trans_term = cycle_consistency(
            rotation_matrix(m.angles), rotation_matrix(mi.angles),
            t_ab, t_ba, fwd)
        assert float(_data(rot_term)) <= 1e-10
        assert float(_data(trans_term)) <= 1e-10

    def test_identity_both_ways_zero(self):
        cam = CameraModel(64.0, 64.0, 32.0, 24.0, 0, 0, 64, 48)
        depth = np.full((48, 64), 2.0)
        fwd, _ = symmetrize(depth, depth, np.zeros(3),
                            TranslationField(np.zeros(3)), np.zeros(3),
                            TranslationField(np.zeros(3)), cam)
        zero = np.zeros((48, 64, 3))
        rot_term, trans_term = cycle_consistency(np.eye(3), np.eye(3),
                                                 zero, zero, fwd)
        assert float(_data(rot_term)) == 0.0
        assert float(_data(trans_term)) == 0.0

    def test_zero_backward_translation_closed_form(self):
        # R = I both ways, t_bwd = 0: the term reduces to mean |t_fwd|_1
        cam = CameraModel(64.0, 64.0, 32.0, 24.0, 0, 0, 64, 48)
        depth = np.full((48, 64), 4.0)
        t = np.array([0.05, -0.02, 0.03])
        fwd, _ = symmetrize(depth, depth, np.zeros(3), TranslationField(t),
                            np.zeros(3), TranslationField(np.zeros(3)), cam,
                            margin_fraction=0.5)
        t_ab = np.broadcast_to(t, (48, 64, 3))
        t_ba = np.zeros((48, 64, 3))
        _, trans_term = cycle_consistency(np.eye(3), np.eye(3), t_ab, t_ba, fwd)
        np.testing.assert_allclose(float(_data(trans_term)),
                                   np.abs(t).sum(), rtol=1e-12)


class TestTranslationSmoothness:
    def test_constant_field_zero(self):
        field = TranslationField(np.array([1.0, 2.0, 3.0]),
                                 np.zeros((5, 6, 3)), np.ones((5, 6)))
        assert float(_data(translation_smoothness(field))) == 0.0

    def test_step_edge_count(self):
        H, W = 6, 8
        resid = np.zeros((H, W, 3))
        resid[:, 4:, 0] = 1.0  # height-1 step across one column
        field = TranslationField(np.zeros(3), resid, np.ones((H, W)))
        got = float(_data(translation_smoothness(field)))
        np.testing.assert_allclose(got, H / (2.0 * H * W), rtol=1e-14)

    def test_matches_scalar_reference(self, rng):
        H, W = 5, 7
        resid = rng.normal(0, 1, (H, W, 3))
        mask = rng.integers(0, 2, (H, W))
        field = TranslationField(rng.normal(0, 1, 3), resid, mask)
        t = field.translation + mask[..., None] * resid
        expected = 0.0
        for c in range(3):
            expected += np.abs(np.diff(t[..., c], axis=1)).sum()
            expected += np.abs(np.diff(t[..., c], axis=0)).sum()
        expected /= 2.0 * H * W
        np.testing.assert_allclose(float(_data(translation_smoothness(field))),
                                   expected, rtol=1e-12)


class TestTotalLoss:
    def smooth_scene(self):
        cam = synth.default_camera(96, 72)
        fx = cam.detached().fx
        scene = synth.Scene([synth.Plane(
            center=np.array([0.0, 0.0, 5.0]), angles=np.array([0.12, 0.2, 0.0]),
            extent=(60.0, 60.0), texture_seed=9,
            texture_freq=fx / (40.0 * 5.0))])
        poses = [pose_from_motion(np.zeros(3), np.zeros(3)),
                 pose_from_motion(np.array([0.01, 0.02, 0.0]),
                                  np.array([0.08, 0.02, 0.05]))]
        return scene, cam, poses

    def test_ground_truth_below_noise_floor(self):
        scene, cam, poses = self.smooth_scene()
        pair, state, _ = gt_pair_state(scene, cam, poses)
        report = total_loss(pair, state, LossWeights())
        assert float(_data(report.total)) < 1e-3

    def test_identical_frames_identity_motion(self, rng):
        cam = CameraModel(64.0, 64.0, 32.0, 24.0, 0, 0, 64, 48)
        rgb = rng.uniform(0, 1, (48, 64, 3))
        depth = rng.uniform(1.5, 4.0, (48, 64))
        pair = FramePair(rgb_a=rgb, rgb_b=rgb)
        state = PairState(depth, depth, np.zeros(3),
                          TranslationField(np.zeros(3)), np.zeros(3),
                          TranslationField(np.zeros(3)), cam)
        report = total_loss(pair, state, LossWeights())
        assert float(_data(report.terms["rgb_l1"])) < 1e-9
        assert float(_data(report.terms["ssim"])) < 1e-9
        assert float(_data(report.terms["depth_l1"])) < 1e-9

    def test_gauge_invariance(self):
        scene, cam, poses = preset_two_planes()
        pair, state, _ = gt_pair_state(scene, cam, poses, with_residual=True)
        base = float(_data(total_loss(pair, state, LossWeights()).total))
        pair2, state2, _ = gt_pair_state(scene, cam, poses, depth_scale=2.0,
                                         with_residual=True)
        scaled = float(_data(total_loss(pair2, state2, LossWeights()).total))
        assert abs(scaled - base) <= 1e-8

    def test_every_term_nonnegative_and_total_is_weighted_sum(self, rng):
        scene, cam, poses = preset_two_planes()
        pair, state, _ = gt_pair_state(scene, cam, poses, with_residual=True)
        state.depth_a = state.depth_a * rng.uniform(0.9, 1.1, state.depth_a.shape)
        w = LossWeights()
        report = total_loss(pair, state, w)
        total = 0.0
        for name, weight in (("rgb_l1", w.rgb), ("ssim", w.ssim),
                             ("depth_l1", w.depth),
                             ("cycle_rotation", w.cycle_rotation),
                             ("cycle_translation", w.cycle_translation),
                             ("smoothness", w.smoothness)):
            val = float(_data(report.terms[name]))
            assert val >= 0.0
            total += weight * val
        np.testing.assert_allclose(float(_data(report.total)), total, rtol=1e-12)

    def test_translation_ambiguity_photometric(self, rng):
        # R = I, k = 0: photometric loss at (K~, K~^-1 K t) matches (K, t)
        scene, cam, poses = self.smooth_scene()
        ra, rb = render_pair(scene, cam, poses[0], poses[0])
        pair = FramePair(rgb_a=ra.rgb, rgb_b=rb.rgb)
        t = np.array([0.12, -0.06, 0.1])
        weights = LossWeights(rgb=1.0, ssim=3.0, depth=0.05,
                              cycle_rotation=0.0, cycle_translation=0.0,
                              smoothness=0.0)
        K, _ = intrinsic_matrix(cam)

        def photo(camera, tvec):
            state = PairState(ra.depth, rb.depth, np.zeros(3),
                              TranslationField(tvec), np.zeros(3),
                              TranslationField(-tvec), camera)
            return float(_data(total_loss(pair, state, weights).total))

        base = photo(cam, t)
        for _ in range(20):
            cam2 = CameraModel(rng.uniform(70, 220), rng.uniform(70, 220),
                               rng.uniform(30, 66), rng.uniform(24, 48),
                               0.0, 0.0, cam.width, cam.height)
            K2, K2_inv = intrinsic_matrix(cam2)
            t2 = K2_inv @ (K @ t)
            assert abs(photo(cam2, t2) - base) <= 1e-8

    def test_full_loss_gradient_vs_finite_differences(self, rng):
        # the diffgrid contract: the full two-frame consistency loss on a
        # small synthetic pair, checked against central differences with the
        # gates (masks, rho, normalizers) frozen as the objective defines
        cam = CameraModel(8.0, 8.0, 3.0, 2.5, 0.0, 0.0, 6, 4)
        rgb_a = rng.uniform(0.2, 0.8, (4, 6, 3))
        rgb_b = rng.uniform(0.2, 0.8, (4, 6, 3))
        pair = FramePair(rgb_a=rgb_a, rgb_b=rgb_b)
        mask = rng.integers(0, 2, (4, 6)).astype(float)
        depth_a0 = rng.uniform(2.0, 3.0, (4, 6))
        depth_b0 = rng.uniform(2.0, 3.0, (4, 6))
        angles0 = rng.uniform(-0.02, 0.02, (2, 3))
        t00 = rng.uniform(-0.05, 0.05, (2, 3))
        resid0 = rng.uniform(-0.02, 0.02, (2, 4, 6, 3))
        weights = LossWeights()

        def build(tape, da, db, ang, t0, resid, gates=None):
            def wrap(x):
                return tape.variable(x) if tape is not None else x

            state = PairState(
                wrap(da), wrap(db), wrap(ang[0]),
                TranslationField(wrap(t0[0]), wrap(resid[0]), mask),
                wrap(ang[1]),
                TranslationField(wrap(t0[1]), wrap(resid[1]), mask),
                cam)
            return total_loss(pair, state, weights, margin_fraction=0.5,
                              gates=gates)

        tape = ad.Tape(0)
        report = build(tape, depth_a0, depth_b0, angles0, t00, resid0)
        grads = ad.backward(report.total)
        gates = report.gates

        def value(da, db, ang, t0, resid):
            return float(_data(build(None, da, db, ang, t0, resid,
                                     gates=gates).total))

        fd = finite_difference(value, [depth_a0, depth_b0, angles0, t00, resid0])
        leaf_ids = list(grads.keys())
        analytic = [grads[i] for i in leaf_ids[:2]]
        analytic += [np.stack([grads[leaf_ids[2]], grads[leaf_ids[5]]])]
        analytic += [np.stack([grads[leaf_ids[3]], grads[leaf_ids[6]]])]
        analytic += [np.stack([grads[leaf_ids[4]], grads[leaf_ids[7]]])]
        for a, f in zip(analytic, fd):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-4)
            assert np.max(np.abs(a - f) / denom) <= 1e-4

    def test_deterministic(self):
        scene, cam, poses = preset_two_planes()
        pair, state, _ = gt_pair_state(scene, cam, poses)
        r1 = total_loss(pair, state, LossWeights())
        r2 = total_loss(pair, state, LossWeights())
        assert float(_data(r1.total)) == float(_data(r2.total))
