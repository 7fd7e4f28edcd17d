"""Consistency losses over a frame pair: occlusion-aware L1 on color and
depth, depth-discrepancy-weighted SSIM, motion cycle consistency, and L1
smoothness of the translation field, summed over both warp directions.

Scale-carrying terms (depth L1, cycle translation, smoothness) are
normalized by stop-gradient statistics of the current state, so the total is
exactly invariant under the monocular gauge: scaling every depth and every
translation by the same positive factor leaves it unchanged.  The color and
SSIM terms are gauge-invariant by construction (the landing coordinates are).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, _data
from .image import bilinear_sample, ssim
from .motion import broadcast_translation
from .warp import symmetrize
from . import formats

_TINY = 1e-30


@dataclass
class LossWeights:
    rgb: float = 1.0
    ssim: float = 3.0
    depth: float = 0.05
    cycle_rotation: float = 1.0
    cycle_translation: float = 0.05
    smoothness: float = 0.01

    def __post_init__(self):
        vals = (self.rgb, self.ssim, self.depth, self.cycle_rotation,
                self.cycle_translation, self.smoothness)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if self.rgb + self.ssim + self.depth <= 0:
            raise ValueError("at least one photometric weight must be positive")

    def save(self, path):
        formats.write_kv(path, self.__dict__)

    @classmethod
    def load(cls, path):
        return cls(**formats.read_kv(path))


@dataclass
class LossReport:
    total: object                      # scalar Var
    terms: dict                        # name -> scalar Var (pre-weight)
    pixel_counts: dict                 # name -> unmasked pixels used
    weights: LossWeights
    warps: tuple = None                # (forward, backward) WarpResults
    gates: dict = None                 # frozen masks/constants of this evaluation

    def value(self, name=None):
        return float(_data(self.total if name is None else self.terms[name]))

    def photometric(self):
        """Weighted sum of the warp-mediated terms only."""
        w = self.weights
        return (w.rgb * self.terms["rgb_l1"] + w.ssim * self.terms["ssim"]
                + w.depth * self.terms["depth_l1"])


@dataclass
class FramePair:
    """Two RGB frames plus optional ground truth; the unit of consistency
    optimization."""
    rgb_a: np.ndarray
    rgb_b: np.ndarray
    gt_depth_a: np.ndarray = None
    gt_depth_b: np.ndarray = None
    gt_pose_a: np.ndarray = None
    gt_pose_b: np.ndarray = None
    mobile_mask: np.ndarray = None   # pixels allowed to carry residual motion
    index_a: int = 0
    index_b: int = 1


@dataclass
class PairState:
    """Current differentiable variables for one pair."""
    depth_a: object
    depth_b: object
    angles_ab: object
    tfield_ab: object
    angles_ba: object
    tfield_ba: object
    cam: object


def _zero_on(like):
    if isinstance(like, Var):
        return like.tape.constant(0.0)
    return 0.0


def _masked_mean_l1(x, mask):
    """Mean over mask=1 pixels of the channel-summed |x|; 0 on empty mask."""
    mask = np.asarray(_data(mask), dtype=np.float64)
    count = float(mask.sum())
    if count == 0.0:
        return _zero_on(x)
    d = ad.absolute(x)
    if _data(d).ndim == 3:
        d = ad.sum_(d, axis=2)
    return ad.sum_(d * mask) / count


def occlusion_aware_l1(a, b_sampled, mask):
    """Mean over mask=1 pixels of the channel-summed |a - b_sampled|; 0 for
    an empty mask."""
    if _data(a).shape != _data(b_sampled).shape:
        raise ValueError("occlusion_aware_l1 needs matching shapes")
    return _masked_mean_l1(a - b_sampled, mask)


def weighted_ssim_loss(a, b_sampled, depth_discrepancy, valid=None, window=3,
                       rho2=None):
    """Mean of omega * (1 - SSIM)/2 with omega = rho^2 / (d^2 + rho^2),
    d the per-pixel depth discrepancy and rho its RMS over the frame
    (a constant: no gradient flows through rho).  omega falls to 1/2 where
    d = rho and to 1 as the depths agree; rho = 0 gives omega = 1
    everywhere by continuity.  `valid` restricts the mean to a pixel set;
    `rho2` pins the constant explicitly (finite-difference oracles must hold
    it fixed, since the analytic gradient treats it as frozen).
    """
    if rho2 is None:
        d_vals = np.asarray(_data(depth_discrepancy), dtype=np.float64)
        rho2 = float(np.mean(d_vals * d_vals))
    if rho2 == 0.0:
        omega = None  # exactly 1 by continuity
    else:
        omega = rho2 / (depth_discrepancy * depth_discrepancy + rho2)
    s = ssim(a, b_sampled, window)
    penalty = (1.0 - s) * 0.5
    if _data(penalty).ndim == 3:
        penalty = ad.mean_(penalty, axis=2)
    if omega is not None:
        penalty = penalty * omega
    if valid is None:
        return ad.mean_(penalty)
    valid = np.asarray(_data(valid), dtype=np.float64)
    count = float(valid.sum())
    if count == 0.0:
        return _zero_on(penalty)
    return ad.sum_(penalty * valid) / count


def cycle_consistency(rot_fwd, rot_bwd, tgrid_fwd, tgrid_bwd, warp_fwd,
                      scale=1.0):
    """Rotation and translation cycle terms for one direction.

    Rotation: ||R_fwd R_bwd - I||_F^2 (global, rotations are per-frame
    constants).  Translation: mean over unoccluded pixels of the channel-
    summed |R_bwd t_fwd(i, j) + t_bwd(i', j')| / scale, with the backward
    field resampled at the warped coordinates.
    """
    residual = ad.matmul33(rot_fwd, rot_bwd) - np.eye(3)
    rot_term = ad.sum_(residual * residual)
    t_bwd_sampled, _ = bilinear_sample(tgrid_bwd, warp_fwd.target_coords)
    rotated = ad.apply_matrix(tgrid_fwd, rot_bwd)
    trans_term = _masked_mean_l1((rotated + t_bwd_sampled) * (1.0 / scale),
                                 warp_fwd.occlusion_mask)
    return rot_term, trans_term


def translation_smoothness(tfield):
    """Mean of |d/dx t| + |d/dy t| over the composed field (forward
    differences), summed over the three components; the mean is taken over
    2 H W difference slots."""
    if tfield.residual is None:
        return 0.0
    t = broadcast_translation(tfield, _data(tfield.residual).shape[:2])
    H, W = _data(t).shape[:2]
    dx = ad.absolute(t[:, 1:, :] - t[:, :-1, :])
    dy = ad.absolute(t[1:, :, :] - t[:-1, :, :])
    return (ad.sum_(dx) + ad.sum_(dy)) / (2.0 * H * W)


def total_loss(pair, state, weights, margin_fraction=0.01, ssim_window=3,
               gates=None):
    """The full symmetrized objective for one pair; deterministic given the
    tape seed.

    The occlusion masks and the SSIM falloff constant rho are gates: they
    come from current values and carry no gradient.  Passing a previous
    report's ``gates`` dict re-evaluates the objective with those gates
    frozen, which is the exact function the analytic gradient differentiates
    (finite-difference oracles need this).
    """
    from .motion import rotation_matrix  # local to avoid import cycle noise

    fwd, bwd = symmetrize(state.depth_a, state.depth_b, state.angles_ab,
                          state.tfield_ab, state.angles_ba, state.tfield_ba,
                          state.cam, margin_fraction)
    if gates is not None:
        fwd.occlusion_mask = gates["mask_fwd"]
        bwd.occlusion_mask = gates["mask_bwd"]
        fwd.validity = gates["valid_fwd"]
        bwd.validity = gates["valid_bwd"]
    # gauge normalizer: any statistic scaling linearly with the scene works
    if gates is not None:
        depth_scale = gates["depth_scale"]
    else:
        depth_scale = 0.5 * (float(np.mean(_data(state.depth_a)))
                             + float(np.mean(_data(state.depth_b))))
    shape = _data(state.depth_a).shape
    rot_ab = rotation_matrix(state.angles_ab)
    rot_ba = rotation_matrix(state.angles_ba)
    tgrid_ab = broadcast_translation(state.tfield_ab, shape)
    tgrid_ba = broadcast_translation(state.tfield_ba, shape)

    terms = {}
    counts = {}
    rho2_used = []
    rgb_terms, ssim_terms, depth_terms = [], [], []
    for i, (w, src_rgb, tgt_rgb) in enumerate(((fwd, pair.rgb_a, pair.rgb_b),
                                               (bwd, pair.rgb_b, pair.rgb_a))):
        sampled_rgb, _ = bilinear_sample(tgt_rgb, w.target_coords)
        rgb_terms.append(occlusion_aware_l1(sampled_rgb, src_rgb,
                                            w.occlusion_mask))
        disc = ad.absolute(w.warped_depth - w.sampled_target_depth)
        if gates is not None:
            rho2 = gates["rho2"][i]
        else:
            dv = _data(disc)
            rho2 = float(np.mean(dv * dv))
        rho2_used.append(rho2)
        ssim_terms.append(weighted_ssim_loss(sampled_rgb, src_rgb, disc,
                                             valid=w.validity,
                                             window=ssim_window, rho2=rho2))
        depth_terms.append(occlusion_aware_l1(
            w.warped_depth * (1.0 / depth_scale),
            w.sampled_target_depth * (1.0 / depth_scale), w.occlusion_mask))
    rot_term, cyc_fwd = cycle_consistency(rot_ab, rot_ba, tgrid_ab, tgrid_ba,
                                          fwd, scale=depth_scale)
    _, cyc_bwd = cycle_consistency(rot_ba, rot_ab, tgrid_ba, tgrid_ab,
                                   bwd, scale=depth_scale)

    terms["rgb_l1"] = rgb_terms[0] + rgb_terms[1]
    terms["ssim"] = ssim_terms[0] + ssim_terms[1]
    terms["depth_l1"] = depth_terms[0] + depth_terms[1]
    terms["cycle_rotation"] = rot_term
    terms["cycle_translation"] = cyc_fwd + cyc_bwd
    has_residual = (state.tfield_ab.residual is not None
                    or state.tfield_ba.residual is not None)
    smooth = 0.0
    t_norm = 0.0
    if has_residual:
        smooth = translation_smoothness(state.tfield_ab) \
            + translation_smoothness(state.tfield_ba)
        if gates is not None:
            t_norm = gates["t_norm"]
        else:
            t_norm = 0.5 * (float(np.mean(np.sum(np.abs(_data(tgrid_ab)), axis=-1)))
                            + float(np.mean(np.sum(np.abs(_data(tgrid_ba)), axis=-1))))
        smooth = smooth * (1.0 / max(t_norm, _TINY))
    terms["smoothness"] = smooth

    counts["rgb_l1"] = int(fwd.occlusion_mask.sum() + bwd.occlusion_mask.sum())
    counts["ssim"] = int(fwd.validity.sum() + bwd.validity.sum())
    counts["depth_l1"] = counts["rgb_l1"]
    counts["cycle_rotation"] = 2
    counts["cycle_translation"] = counts["rgb_l1"]
    counts["smoothness"] = int(np.prod(shape)) * 2

    total = (weights.rgb * terms["rgb_l1"]
             + weights.ssim * terms["ssim"]
             + weights.depth * terms["depth_l1"]
             + weights.cycle_rotation * terms["cycle_rotation"]
             + weights.cycle_translation * terms["cycle_translation"]
             + weights.smoothness * terms["smoothness"])
    report = LossReport(total=total, terms=terms, pixel_counts=counts,
                        weights=weights)
    report.warps = (fwd, bwd)
    report.gates = {"mask_fwd": fwd.occlusion_mask, "mask_bwd": bwd.occlusion_mask,
                    "valid_fwd": fwd.validity, "valid_bwd": bwd.validity,
                    "rho2": rho2_used, "depth_scale": depth_scale,
                    "t_norm": t_norm}
    return report
