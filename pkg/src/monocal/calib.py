"""Closed-form calibration analysis: how much rotation pins down the focal
lengths, the rotation/focal error compensation it implies, the matrix
certificate for intrinsics identifiability, and the inference-time rotation
correction for mis-calibrated focal lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import intrinsic_matrix
from .motion import RigidMotion


@dataclass
class ToleranceReport:
    """How precisely two frames with rotation (rx, ry) determine the focal
    lengths: |delta fx| < 2 fx^2 / (w^2 |ry|) and symmetrically for fy.
    A zero rotation component gives an infinite bound (no supervision)."""
    delta_fx_bound: float
    delta_fy_bound: float
    rotation_used: tuple      # (rx, ry) radians
    image_size: tuple         # (w, h) pixels


def focal_tolerance(cam, rx, ry):
    c = cam.detached()
    dfx = 2.0 * c.fx ** 2 / (c.width ** 2 * abs(ry)) if ry != 0.0 else np.inf
    dfy = 2.0 * c.fy ** 2 / (c.height ** 2 * abs(rx)) if rx != 0.0 else np.inf
    return ToleranceReport(delta_fx_bound=dfx, delta_fy_bound=dfy,
                           rotation_used=(float(rx), float(ry)),
                           image_size=(c.width, c.height))


def compensated_rotation(ry, fx_true, fx_assumed):
    """The rotation that masks a wrong focal length at the image center:
    predicting ry * fx_true / fx_assumed cancels the pixel shift there,
    leaving only the quadratic residual toward the edges."""
    if fx_assumed <= 0:
        raise ValueError("assumed focal length must be positive")
    return ry * fx_true / fx_assumed


def correct_rotation_for_intrinsics(pred, pred_cam, true_cam):
    """Inference-time fix: for small errors, rx*fy and ry*fx are
    approximately constant, so a prediction made under wrong focal lengths
    is corrected by ry <- ry f'x / fx and rx <- rx f'y / fy (primes are the
    predicted camera).  rz and the translation are unchanged."""
    p = pred_cam.detached()
    t = true_cam.detached()
    if p.fx <= 0 or p.fy <= 0 or t.fx <= 0 or t.fy <= 0:
        raise ValueError("focal lengths must be positive")
    rx, ry, rz = np.asarray(pred.angles, dtype=np.float64)
    corrected = np.array([rx * p.fy / t.fy, ry * p.fx / t.fx, rz])
    return RigidMotion(corrected, np.array(pred.translation, dtype=np.float64))


def identifiability_certificate(cam, cam_tilde, tol=1e-9):
    """The commuting matrix A = K^-1 K~ K~^T K^-T.  A equals the identity
    exactly when K~ K~^T = K K^T, which for upper-triangular intrinsic
    matrices happens only at K~ = K; any rotation content then exposes a
    wrong K~.  Distortion is ignored (the derivation is pinhole).
    Returns (A, whether ||A - I||_F <= tol)."""
    K, K_inv = intrinsic_matrix(cam)
    Kt, _ = intrinsic_matrix(cam_tilde)
    A = K_inv @ Kt @ Kt.T @ K_inv.T
    is_identity = bool(np.linalg.norm(A - np.eye(3)) <= tol)
    return A, is_identity
