"""Rigid motion, per-pixel translation fields, and mobile-mask utilities.

Rotations use Z-Y-X Euler angles (R = Rz @ Ry @ Rx); frame-to-frame rotations
here are small enough that any small-angle-consistent convention agrees to
first order.  The per-pixel translation combines a global vector with a
masked residual field: t(x, y) = t_global + m(x, y) * dt(x, y), so the field
equals the global vector bit-exactly wherever the binary mask is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, _data


@dataclass
class RigidMotion:
    """Camera egomotion between two frames: X_target = R X_source + t."""
    angles: object   # (3,) rx, ry, rz in radians; array or Var
    translation: object  # (3,) scene units; array or Var

    def detached(self):
        return RigidMotion(np.array(_data(self.angles), dtype=np.float64),
                           np.array(_data(self.translation), dtype=np.float64))

    def matrix(self):
        return rotation_matrix(self.angles)


@dataclass
class TranslationField:
    """Global translation plus a masked residual: t0 + m * dt."""
    translation: object          # (3,)
    residual: object = None      # (H, W, 3) or None for a pure global field
    mask: object = None          # (H, W) binary; required with a residual

    def grid_shape(self):
        if self.residual is None:
            return None
        return _data(self.residual).shape[:2]


def rotation_matrix(angles):
    """3x3 rotation from Z-Y-X Euler angles (rx, ry, rz); differentiable."""
    rx, ry, rz = angles[0], angles[1], angles[2]
    cx, sx = ad.cos(rx), ad.sin(rx)
    cy, sy = ad.cos(ry), ad.sin(ry)
    cz, sz = ad.cos(rz), ad.sin(rz)
    one, zero = 1.0, 0.0
    r_x = ad.stack([ad.stack([one, zero, zero]),
                    ad.stack([zero, cx, -1.0 * sx]),
                    ad.stack([zero, sx, cx])], axis=0)
    r_y = ad.stack([ad.stack([cy, zero, sy]),
                    ad.stack([zero, one, zero]),
                    ad.stack([-1.0 * sy, zero, cy])], axis=0)
    r_z = ad.stack([ad.stack([cz, -1.0 * sz, zero]),
                    ad.stack([sz, cz, zero]),
                    ad.stack([zero, zero, one])], axis=0)
    return ad.matmul33(r_z, ad.matmul33(r_y, r_x))


def euler_angles(matrix):
    """Z-Y-X Euler angles of a rotation matrix (value-level inverse of
    rotation_matrix; valid away from the |ry| = pi/2 gimbal)."""
    m = np.asarray(_data(matrix), dtype=np.float64)
    ry = -np.arcsin(np.clip(m[2, 0], -1.0, 1.0))
    rx = np.arctan2(m[2, 1], m[2, 2])
    rz = np.arctan2(m[1, 0], m[0, 0])
    return np.array([rx, ry, rz])


def invert_motion(m):
    """The opposite transform: rotation R^T, translation -R^T t."""
    r = np.asarray(_data(m.matrix()))
    t = np.asarray(_data(m.translation))
    return RigidMotion(euler_angles(r.T), -r.T @ t)


def compose_motion(second, first):
    """Motion applying `first` then `second` (value-level)."""
    r1, t1 = np.asarray(_data(first.matrix())), np.asarray(_data(first.translation))
    r2, t2 = np.asarray(_data(second.matrix())), np.asarray(_data(second.translation))
    return RigidMotion(euler_angles(r2 @ r1), r2 @ t1 + t2)


def compose_translation(field):
    """Pointwise t0 + m * dt as an (H, W, 3) grid.

    With no residual the result is the constant global field.  Raises on
    shape mismatch between residual and mask.
    """
    t0 = field.translation
    if field.residual is None:
        raise ValueError("compose_translation needs a grid-shaped field; "
                         "use broadcast_translation for a pure global one")
    res_shape = _data(field.residual).shape
    if field.mask is None:
        raise ValueError("masked residual field needs a mask")
    mask = np.asarray(_data(field.mask))
    if res_shape[:2] != mask.shape or res_shape[2:] != (3,):
        raise ValueError(f"residual {res_shape} does not match mask {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    return t0 + mask[..., None] * field.residual


def broadcast_translation(field, shape):
    """The composed field on an (H, W) grid, handling the no-residual case."""
    if field.residual is None:
        return field.translation * np.ones(tuple(shape) + (1,))
    return compose_translation(field)


def rotation_is_valid(matrix, tol=1e-12):
    m = np.asarray(_data(matrix))
    return (np.max(np.abs(m.T @ m - np.eye(3))) <= tol
            and abs(np.linalg.det(m) - 1.0) <= tol)


def boxify(instance_masks, shape=None):
    """Union of the tight axis-aligned bounding boxes of each instance mask.

    Empty instances contribute nothing; with no instances at all the grid
    shape must be given explicitly and the result is all zeros.
    """
    masks = [np.asarray(m).astype(bool) for m in instance_masks]
    if not masks:
        if shape is None:
            raise ValueError("no instances: pass the grid shape explicitly")
        return np.zeros(shape, dtype=bool)
    shape = masks[0].shape
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.shape != shape:
            raise ValueError("instance masks must share one shape")
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        if rows.size == 0:
            continue
        out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = True
    return out
