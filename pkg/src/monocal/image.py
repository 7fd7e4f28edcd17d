"""Differentiable image primitives: sampling, window statistics, SSIM,
randomized layer normalization.

All functions accept Vars (see autodiff) and plain arrays interchangeably;
grids are (H, W) or (H, W, C) with pixel (x, y) = (column, row) and the
origin at the center of the top-left pixel.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var, _data, _tape_of


def bilinear_sample(grid, coords):
    """Sample `grid` at continuous (x, y) positions.

    coords has shape (..., 2) with x = coords[..., 0], y = coords[..., 1].
    Returns (sampled, valid): sampled has shape coords.shape[:-1] plus the
    grid's channel axis if present; valid is a plain boolean array, True
    where the position lies inside [0, W-1] x [0, H-1].  Out-of-range
    positions sample the clamped edge value and are flagged invalid; they
    receive no coordinate gradient.  Differentiable w.r.t. both the grid
    values and the coordinates.
    """
    gd, cd = _data(grid), _data(coords)
    H, W = gd.shape[:2]
    has_chan = gd.ndim == 3
    x, y = cd[..., 0], cd[..., 1]
    valid = (x >= 0.0) & (x <= W - 1.0) & (y >= 0.0) & (y <= H - 1.0)
    xc = np.clip(x, 0.0, W - 1.0)
    yc = np.clip(y, 0.0, H - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = xc - x0
    wy = yc - y0
    w00 = (1.0 - wx) * (1.0 - wy)
    w10 = wx * (1.0 - wy)
    w01 = (1.0 - wx) * wy
    w11 = wx * wy
    flat = gd.reshape(-1, gd.shape[2]) if has_chan else gd.reshape(-1)
    i00 = y0 * W + x0
    i11 = y1 * W + x1
    g00, g10 = flat[i00], flat[i00 + (x1 - x0)]
    g01, g11 = flat[i11 - (x1 - x0)], flat[i11]
    if has_chan:
        out = (w00[..., None] * g00 + w10[..., None] * g10
               + w01[..., None] * g01 + w11[..., None] * g11)
    else:
        out = w00 * g00 + w10 * g10 + w01 * g01 + w11 * g11

    # coordinate gradients vanish where the position was clamped
    in_x = (x >= 0.0) & (x <= W - 1.0)
    in_y = (y >= 0.0) & (y <= H - 1.0)

    def vjp_grid(g):
        # bincount over flattened corner indices (much faster than add.at)
        idx = np.concatenate([(y0 * W + x0).ravel(), (y0 * W + x1).ravel(),
                              (y1 * W + x0).ravel(), (y1 * W + x1).ravel()])
        if has_chan:
            C = gd.shape[2]
            z = np.empty((H * W, C))
            for c in range(C):
                wgt = np.concatenate([(g[..., c] * w00).ravel(),
                                      (g[..., c] * w10).ravel(),
                                      (g[..., c] * w01).ravel(),
                                      (g[..., c] * w11).ravel()])
                z[:, c] = np.bincount(idx, weights=wgt, minlength=H * W)
            return z.reshape(gd.shape)
        wgt = np.concatenate([(g * w00).ravel(), (g * w10).ravel(),
                              (g * w01).ravel(), (g * w11).ravel()])
        return np.bincount(idx, weights=wgt, minlength=H * W).reshape(H, W)

    def vjp_coords(g):
        ddx = (1.0 - wy)[..., None] * (g10 - g00) + wy[..., None] * (g11 - g01) \
            if has_chan else (1.0 - wy) * (g10 - g00) + wy * (g11 - g01)
        ddy = (1.0 - wx)[..., None] * (g01 - g00) + wx[..., None] * (g11 - g10) \
            if has_chan else (1.0 - wx) * (g01 - g00) + wx * (g11 - g10)
        if has_chan:
            gx = (g * ddx).sum(axis=-1)
            gy = (g * ddy).sum(axis=-1)
        else:
            gx = g * ddx
            gy = g * ddy
        return np.stack([gx * in_x, gy * in_y], axis=-1)

    grid_is_var = isinstance(grid, Var)
    coords_is_var = isinstance(coords, Var)
    if not grid_is_var and not coords_is_var:
        return out, valid
    tape = _tape_of(*(v for v in (grid, coords) if isinstance(v, Var)))
    if grid_is_var and coords_is_var:
        sampled = tape._append(out, (grid.id, coords.id),
                               lambda g: (vjp_grid(g), vjp_coords(g)),
                               "bilinear_sample")
    elif grid_is_var:
        sampled = tape._append(out, (grid.id,), lambda g: (vjp_grid(g),),
                               "bilinear_sample")
    else:
        sampled = tape._append(out, (coords.id,), lambda g: (vjp_coords(g),),
                               "bilinear_sample")
    return sampled, valid


def _window_sum(a, k):
    """Zero-padded k x k box sum with same-shape output (k odd)."""
    H, W = a.shape[:2]
    r = k // 2
    pad = [(r, r), (r, r)] + [(0, 0)] * (a.ndim - 2)
    p = np.pad(a, pad)
    if k <= 5:  # direct shift-add beats integral images for small windows
        out = np.zeros_like(a)
        for dy in range(k):
            for dx in range(k):
                out += p[dy:dy + H, dx:dx + W]
        return out
    integral = p.cumsum(axis=0).cumsum(axis=1)
    integral = np.pad(integral, [(1, 0), (1, 0)] + [(0, 0)] * (a.ndim - 2))
    return (integral[k:k + H, k:k + W] - integral[0:H, k:k + W]
            - integral[k:k + H, 0:W] + integral[0:H, 0:W])


def window_counts(shape, k):
    """Number of in-bounds pixels inside each k x k window."""
    return _window_sum(np.ones(shape[:2], dtype=np.float64), k)


def window_mean(x, k=3):
    """Uniform k x k local average (k odd), borders normalized by the
    actual in-bounds window size.  The adjoint of a count-normalized box
    sum is the box sum of the count-normalized adjoint, so this is a single
    fused tape node.
    """
    if k % 2 != 1:
        raise ValueError("window size must be odd")
    xd = _data(x)
    counts = window_counts(xd.shape, k)
    cexp = counts if xd.ndim == 2 else counts[..., None]
    out = _window_sum(xd, k) / cexp
    if not isinstance(x, Var):
        return out
    return x.tape._append(out, (x.id,),
                          lambda g: (_window_sum(g / cexp, k),), "window_mean")


def ssim(a, b, window=3):
    """Per-pixel structural similarity for images in [0, 1].

    Uses uniform window averaging for the local statistics and the standard
    stabilizers c1 = (0.01 L)^2, c2 = (0.03 L)^2 with L = 1.  Channels are
    scored independently; output shape equals the input shape.
    """
    if _data(a).shape != _data(b).shape:
        raise ValueError(f"shape mismatch: {_data(a).shape} vs {_data(b).shape}")
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_a = window_mean(a, window)
    mu_b = window_mean(b, window)
    var_a = window_mean(a * a, window) - mu_a * mu_a
    var_b = window_mean(b * b, window) - mu_b * mu_b
    cov = window_mean(a * b, window) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    con = (2.0 * cov + c2) / (var_a + var_b + c2)
    return lum * con


def randomized_layer_norm(x, noise_std, rng=None, additive=False, eps=1e-3,
                          return_stats=False):
    """Layer normalization with noisy per-channel statistics.

    Spatial mean and variance are computed per channel, then each is
    perturbed by an independent (1 + N(0, noise_std^2)) factor (or, with
    ``additive=True``, by added N(0, noise_std^2) samples) drawn from ``rng``
    (defaulting to the tape's seeded stream).  Output is
    (x - mu~) / sqrt(var~ + eps).  Noise is resampled on every call.  A
    variance driven negative by the noise is clamped at zero and counted in
    ``tape.norm_clamp_count``.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    tape = x.tape if isinstance(x, Var) else None
    if rng is None:
        if tape is None:
            raise ValueError("pass rng when input is not on a tape")
        rng = tape.rng
    xd = _data(x)
    axes = (0, 1)
    nchan = xd.shape[2] if xd.ndim == 3 else None
    size = () if nchan is None else (nchan,)
    xi_mu = rng.normal(0.0, 1.0, size=size) * noise_std
    xi_var = rng.normal(0.0, 1.0, size=size) * noise_std

    mu = ad.mean_(x, axis=axes) if isinstance(x, Var) else xd.mean(axis=axes)
    centered = x - mu
    var = ad.mean_(centered * centered, axis=axes) if isinstance(x, Var) \
        else (_data(centered) ** 2).mean(axis=axes)
    if additive:
        mu_t = mu + xi_mu
        var_t = var + xi_var
    else:
        mu_t = mu * (1.0 + xi_mu)
        var_t = var * (1.0 + xi_var)
    var_t_data = _data(var_t)
    n_clamped = int(np.count_nonzero(np.atleast_1d(var_t_data) < 0.0))
    if n_clamped and tape is not None:
        tape.norm_clamp_count += n_clamped
    if isinstance(var_t, Var):
        var_t = ad.maximum(var_t, 0.0)
    else:
        var_t = np.maximum(var_t, 0.0)
    denom = ad.sqrt(var_t + eps) if isinstance(var_t, Var) else np.sqrt(var_t + eps)
    out = (x - mu_t) / denom
    if return_stats:
        return out, mu_t, var_t
    return out
