"""Frame-to-frame differentiable warping and the geometric occlusion gate.

Each source pixel is unprojected with its depth (distortion-aware), moved by
the rigid rotation and the per-pixel translation field, and reprojected into
the target view.  The moved depth z' compared against the target depth map
resampled at the landing coordinates decides which pixels may carry
consistency losses: a moved pixel participates only if it lands at or in
front of the target surface (within a margin).  The comparison itself is a
hard gate with no gradient; everything else is differentiable with respect
to depth, motion, and all six intrinsics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import _data
from .camera import _distort_factor, undistort_normalized
from .image import bilinear_sample
from .motion import broadcast_translation, rotation_matrix

_MIN_DEPTH = 1e-9


@dataclass
class WarpResult:
    target_coords: object            # (H, W, 2) landing positions in the target
    warped_depth: object             # (H, W) depth z' of each moved source point
    validity: np.ndarray             # in front of the camera and in bounds
    sampled_target_depth: object = None  # target depth resampled at the coords
    occlusion_mask: np.ndarray = None    # validity minus occluded landings


def pixel_grid(height, width):
    us, vs = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    return np.stack([us, vs], axis=-1)


def warp_frame(source_depth, angles, tfield, cam):
    """Warp every source pixel into the target view.

    source_depth is an (H, W) grid (strictly positive), angles the rotation
    angles, tfield a TranslationField; returns a WarpResult with the landing
    coordinates and z'.  Points moved behind the camera are marked invalid
    rather than raising.
    """
    depth_vals = _data(source_depth)
    if np.any(depth_vals <= 0.0):
        raise ValueError("warp needs positive source depth")
    H, W = depth_vals.shape
    coords = pixel_grid(H, W)
    xd = (coords[..., 0] - cam.x0) / cam.fx
    yd = (coords[..., 1] - cam.y0) / cam.fy
    if cam.has_distortion():
        xn, yn = undistort_normalized(cam, xd, yd)
    else:
        xn, yn = xd, yd
    pts = ad.stack([xn * source_depth, yn * source_depth,
                    source_depth * np.ones((H, W))], axis=-1)
    rot = rotation_matrix(angles)
    moved = ad.apply_matrix(pts, rot) + broadcast_translation(tfield, (H, W))
    x = moved[..., 0]
    y = moved[..., 1]
    z = moved[..., 2]
    in_front = _data(z) > _MIN_DEPTH
    z_safe = ad.where(in_front, z, 1.0)
    xn_t = x / z_safe
    yn_t = y / z_safe
    if cam.has_distortion():
        f = _distort_factor(cam, xn_t, yn_t)
        xn_t = xn_t * f
        yn_t = yn_t * f
    u = cam.fx * xn_t + cam.x0
    v = cam.fy * yn_t + cam.y0
    target_coords = ad.stack([u, v], axis=-1)
    uv = _data(target_coords)
    in_bounds = ((uv[..., 0] >= 0.0) & (uv[..., 0] <= W - 1.0)
                 & (uv[..., 1] >= 0.0) & (uv[..., 1] <= H - 1.0))
    return WarpResult(target_coords=target_coords, warped_depth=z,
                      validity=in_front & in_bounds)


def occlusion_mask(warp, target_depth, margin=0.0):
    """Gate for the consistency losses: 1 where the warp is valid and the
    moved depth lands at or in front of the resampled target depth,
    z' <= z_target + margin.

    margin may be a scalar or a per-pixel array; the comparison uses plain
    values (no gradient flows through the gate).  The resampled target depth
    is stored on the WarpResult (that path IS differentiable) and the mask
    both stored and returned.
    """
    sampled, sample_valid = bilinear_sample(target_depth, warp.target_coords)
    warp.sampled_target_depth = sampled
    margin_vals = _data(margin) if not np.isscalar(margin) else margin
    mask = warp.validity & sample_valid & \
        (_data(warp.warped_depth) <= _data(sampled) + margin_vals)
    warp.occlusion_mask = mask
    return mask


def symmetrize(depth_a, depth_b, angles_ab, tfield_ab, angles_ba, tfield_ba,
               cam, margin_fraction=0.01):
    """Warp a->b and b->a and attach both occlusion masks.

    The downstream losses sum both directions; swapping the frame roles
    swaps the two results exactly.  The margin is `margin_fraction` of the
    resampled target depth (0 gives the strict gate).
    """
    fwd = warp_frame(depth_a, angles_ab, tfield_ab, cam)
    bwd = warp_frame(depth_b, angles_ba, tfield_ba, cam)
    for w, target in ((fwd, depth_b), (bwd, depth_a)):
        sampled, sample_valid = bilinear_sample(target, w.target_coords)
        w.sampled_target_depth = sampled
        margin = margin_fraction * _data(sampled)
        w.occlusion_mask = w.validity & sample_valid & \
            (_data(w.warped_depth) <= _data(sampled) + margin)
    return fwd, bwd
