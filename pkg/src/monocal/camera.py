"""Pinhole camera with quadratic/quartic radial distortion.

Projection applies the forward radial polynomial d(r^2) = 1 + k1 r^2 + k2 r^4
to normalized coordinates before the focal scaling; unprojection inverts it by
fixed-point iteration.  All operations accept tape Vars for the intrinsics
and for the point/pixel payloads, so everything is differentiable end to end.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Var, _data
from . import formats

DISTORTION_MAX_ITER = 20
DISTORTION_TOL = 1e-10  # normalized coordinates


class BehindCameraError(ValueError):
    """A point with non-positive depth was projected."""


class DistortionInversionError(RuntimeError):
    """Fixed-point inversion of the radial polynomial did not converge."""

    def __init__(self, residual):
        super().__init__(f"distortion inversion stalled, residual {residual:.3e}")
        self.residual = residual


class PixelCoord(NamedTuple):
    u: float
    v: float


class CameraModel:
    """Intrinsics fx, fy, x0, y0 (pixels), radial distortion k1, k2, and the
    image size.  Fields may be floats or tape Vars; the model itself is an
    immutable value.
    """

    __slots__ = ("fx", "fy", "x0", "y0", "k1", "k2", "width", "height")

    def __init__(self, fx, fy, x0, y0, k1=0.0, k2=0.0, width=None, height=None,
                 validate=True):
        if width is None or height is None:
            raise ValueError("camera needs width and height")
        self.fx, self.fy, self.x0, self.y0 = fx, fy, x0, y0
        self.k1, self.k2 = k1, k2
        self.width, self.height = int(width), int(height)
        if validate:
            self._check()

    def _check(self):
        fx, fy = float(_data(self.fx)), float(_data(self.fy))
        x0, y0 = float(_data(self.x0)), float(_data(self.y0))
        if fx <= 0 or fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {fx}, {fy}")
        if not (0 < x0 < self.width) or not (0 < y0 < self.height):
            raise ValueError("principal point must lie inside the image")
        k1, k2 = float(_data(self.k1)), float(_data(self.k2))
        if k1 == 0.0 and k2 == 0.0:
            return
        # d(r^2) must stay positive up to the undistorted corner radius
        corners_u = np.array([0.0, self.width - 1.0, 0.0, self.width - 1.0])
        corners_v = np.array([0.0, 0.0, self.height - 1.0, self.height - 1.0])
        xd = (corners_u - x0) / fx
        yd = (corners_v - y0) / fy
        xn, yn = xd.copy(), yd.copy()
        for _ in range(200):
            f = 1.0 + k1 * (xn * xn + yn * yn) + k2 * (xn * xn + yn * yn) ** 2
            if np.any(f <= 0):
                raise ValueError(
                    f"distortion polynomial non-positive on sensor (k1={k1}, k2={k2})")
            xn_new, yn_new = xd / f, yd / f
            if max(np.abs(xn_new - xn).max(), np.abs(yn_new - yn).max()) < 1e-12:
                xn, yn = xn_new, yn_new
                break
            xn, yn = xn_new, yn_new
        else:
            raise ValueError("distortion outside invertible range for this sensor")
        r2_max = (xn * xn + yn * yn).max() * 1.05
        r2 = np.linspace(0.0, r2_max, 512)
        if np.any(1.0 + k1 * r2 + k2 * r2 * r2 <= 0.0):
            raise ValueError(
                f"distortion polynomial non-positive on sensor (k1={k1}, k2={k2})")

    def detached(self):
        """Float-only snapshot of the current parameter values."""
        return CameraModel(float(_data(self.fx)), float(_data(self.fy)),
                           float(_data(self.x0)), float(_data(self.y0)),
                           float(_data(self.k1)), float(_data(self.k2)),
                           self.width, self.height, validate=False)

    def has_distortion(self):
        k1, k2 = _data(self.k1), _data(self.k2)
        return isinstance(self.k1, Var) or isinstance(self.k2, Var) \
            or float(k1) != 0.0 or float(k2) != 0.0

    def __repr__(self):
        c = self.detached()
        return (f"CameraModel(fx={c.fx:.6g}, fy={c.fy:.6g}, x0={c.x0:.6g}, "
                f"y0={c.y0:.6g}, k1={c.k1:.6g}, k2={c.k2:.6g}, "
                f"size={c.width}x{c.height})")


def _distort_factor(cam, xn, yn):
    r2 = xn * xn + yn * yn
    return 1.0 + cam.k1 * r2 + cam.k2 * (r2 * r2)


def project(point, cam):
    """Project camera-frame points to (distorted) pixel coordinates.

    point is (..., 3); returns (pixel coords (..., 2), depth (...)).
    Raises BehindCameraError if any depth is <= 0.
    """
    if not isinstance(point, Var):
        point = np.asarray(point, dtype=np.float64)
    x = point[..., 0]
    y = point[..., 1]
    z = point[..., 2]
    if np.any(_data(z) <= 0.0):
        raise BehindCameraError("projection needs z > 0")
    xn = x / z
    yn = y / z
    if cam.has_distortion():
        f = _distort_factor(cam, xn, yn)
        xn = xn * f
        yn = yn * f
    u = cam.fx * xn + cam.x0
    v = cam.fy * yn + cam.y0
    return ad.stack([u, v], axis=-1), z


def undistort_normalized(cam, xd, yd):
    """Invert the radial polynomial by fixed-point iteration (unrolled on the
    tape, so gradients flow to k1, k2 and the inputs).  Starting from the
    first-order guess (xd, yd)/d(rd^2) keeps the EuRoC-strength distortion
    within the iteration budget."""
    f0 = _distort_factor(cam, xd, yd)
    xn, yn = xd / f0, yd / f0
    residual = np.inf
    for _ in range(DISTORTION_MAX_ITER):
        f = _distort_factor(cam, xn, yn)
        xn_new = xd / f
        yn_new = yd / f
        residual = max(np.max(np.abs(_data(xn_new) - _data(xn))),
                       np.max(np.abs(_data(yn_new) - _data(yn))))
        xn, yn = xn_new, yn_new
        if residual < DISTORTION_TOL:
            return xn, yn
    raise DistortionInversionError(residual)


def unproject(pix, depth, cam):
    """Pixel coordinates plus depth to a camera-frame 3-vector (or grid of
    them): pix is (..., 2), depth broadcastable to (...,)."""
    if not isinstance(pix, Var):
        pix = np.asarray(pix, dtype=np.float64)
    if np.any(_data(depth) <= 0.0):
        raise ValueError("unproject needs depth > 0")
    u = pix[..., 0]
    v = pix[..., 1]
    xd = (u - cam.x0) / cam.fx
    yd = (v - cam.y0) / cam.fy
    if cam.has_distortion():
        xn, yn = undistort_normalized(cam, xd, yd)
    else:
        xn, yn = xd, yd
    shape = np.shape(_data(xn))
    z = depth if np.shape(_data(depth)) == shape else depth * np.ones(shape)
    return ad.stack([xn * depth, yn * depth, z], axis=-1)


def intrinsic_matrix(cam):
    """The 3x3 intrinsic matrix and its closed-form inverse (numeric)."""
    c = cam.detached()
    K = np.array([[c.fx, 0.0, c.x0],
                  [0.0, c.fy, c.y0],
                  [0.0, 0.0, 1.0]])
    K_inv = np.array([[1.0 / c.fx, 0.0, -c.x0 / c.fx],
                      [0.0, 1.0 / c.fy, -c.y0 / c.fy],
                      [0.0, 0.0, 1.0]])
    return K, K_inv


def adjust_intrinsics(cam, crop=None, resize=None):
    """Intrinsics after cropping and/or resizing the image.

    crop = (left, top, new_w, new_h) subtracts (left, top) from the principal
    point; resize = (out_w, out_h) scales x-related parameters by out_w/new_w
    and y-related ones by out_h/new_h.  Distortion coefficients are unchanged
    by both.
    """
    fx, fy, x0, y0 = cam.fx, cam.fy, cam.x0, cam.y0
    w, h = cam.width, cam.height
    if crop is not None:
        left, top, new_w, new_h = crop
        if left < 0 or top < 0 or left + new_w > w or top + new_h > h:
            raise ValueError(f"crop {crop} outside {w}x{h} image")
        x0 = x0 - left
        y0 = y0 - top
        w, h = int(new_w), int(new_h)
    if resize is not None:
        out_w, out_h = resize
        if out_w <= 0 or out_h <= 0:
            raise ValueError("resize must be positive")
        sx = out_w / w
        sy = out_h / h
        fx, x0 = fx * sx, x0 * sx
        fy, y0 = fy * sy, y0 * sy
        w, h = int(out_w), int(out_h)
    return CameraModel(fx, fy, x0, y0, cam.k1, cam.k2, w, h)


# -- config file I/O -----------------------------------------------------------

def save_camera(path, cam):
    c = cam.detached()
    formats.write_kv(path, {"fx": c.fx, "fy": c.fy, "x0": c.x0, "y0": c.y0,
                            "k1": c.k1, "k2": c.k2,
                            "width": c.width, "height": c.height})


def load_camera(path):
    kv = formats.read_kv(path)
    return CameraModel(kv["fx"], kv["fy"], kv["x0"], kv["y0"],
                       kv.get("k1", 0.0), kv.get("k2", 0.0),
                       int(kv["width"]), int(kv["height"]))
