"""Quantitative evaluation: standard monocular depth error metrics, 5-point
absolute trajectory error, and relative translation/rotation drift.

Monocular scale conventions: depth uses median scaling, ATE scales each
5-frame snippet independently by least squares, drift applies one global
scale to the whole trajectory (each can be disabled).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formats
from .motion import rotation_is_valid


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float

    def as_row(self):
        return [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.a1, self.a2, self.a3]

    COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses (N, 3, 4)."""
    poses: np.ndarray
    times: np.ndarray = None

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 3 or self.poses.shape[1:] != (3, 4):
            raise ValueError("poses must be (N, 3, 4)")
        if self.times is None:
            self.times = np.arange(len(self.poses), dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        for p in self.poses:
            if not rotation_is_valid(p[:, :3], tol=1e-9):
                raise ValueError("pose rotation not in SO(3)")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return self.poses[:, :, 3]

    @property
    def rotations(self):
        return self.poses[:, :, :3]

    def save(self, path):
        formats.write_kitti_trajectory(path, self.poses)

    @classmethod
    def load(cls, path):
        return cls(formats.read_kitti_trajectory(path))


def integrate_relative_motions(motions, initial=None):
    """Chain frame-to-frame motions (X_next = R X_prev + t) into a
    camera-to-world trajectory starting at `initial` (default identity)."""
    pose = np.hstack([np.eye(3), np.zeros((3, 1))]) if initial is None \
        else np.asarray(initial, dtype=np.float64)
    poses = [pose]
    for m in motions:
        r_rel = np.asarray(m.matrix(), dtype=np.float64)
        t_rel = np.asarray(m.translation, dtype=np.float64)
        r_prev, c_prev = pose[:, :3], pose[:, 3]
        r_new = r_prev @ r_rel.T
        c_new = c_prev - r_new @ t_rel
        pose = np.hstack([r_new, c_new[:, None]])
        poses.append(pose)
    return Trajectory(np.stack(poses))


def depth_metrics(pred, gt, cutoff=80.0, scale_align=True):
    """Depth errors over pixels where the ground truth is valid (> 0 and at
    most the cutoff); optionally pre-scales the prediction by the ratio of
    medians."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = (gt > 0) & (gt <= cutoff)
    if not valid.any():
        raise ValueError("no valid ground-truth pixels under cutoff")
    p = pred[valid]
    g = gt[valid]
    if scale_align:
        p = p * (np.median(g) / np.median(p))
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25 ** 2)),
        a3=float(np.mean(ratio < 1.25 ** 3)),
    )


def ate_5point(pred, gt):
    """Mean and standard deviation, over all 5-frame snippets, of the mean
    position error after scaling each predicted snippet to the ground truth
    by least squares."""
    if len(pred) != len(gt):
        raise ValueError("trajectories must have equal length")
    if len(pred) < 5:
        raise ValueError("need at least 5 poses")
    errors = []
    pp, gp = pred.positions, gt.positions
    for i in range(len(pred) - 4):
        p = pp[i:i + 5] - pp[i]
        g = gp[i:i + 5] - gp[i]
        denom = float(np.sum(p * p))
        scale = float(np.sum(p * g)) / denom if denom > 0 else 1.0
        errors.append(float(np.mean(np.linalg.norm(scale * p - g, axis=1))))
    return float(np.mean(errors)), float(np.std(errors))


def _relative_rotation_angles(pred, gt):
    angles = []
    for i in range(len(pred) - 1):
        rp = pred.rotations[i].T @ pred.rotations[i + 1]
        rg = gt.rotations[i].T @ gt.rotations[i + 1]
        m = rp.T @ rg
        cos = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
        angles.append(np.degrees(np.arccos(cos)))
    return np.array(angles)


def relative_drift(pred, gt, start_after=100.0, scale_align=True):
    """Average translational drift (percent of distance traveled) and
    rotational drift (degrees per 100 m), both evaluated past the first
    `start_after` meters of ground-truth travel.

    Positions are taken relative to the first frame; with scale alignment a
    single global least-squares scale maps the prediction onto the ground
    truth first.  Rotational drift averages the per-100m-bin accumulated
    geodesic angle between predicted and true frame-to-frame rotations.
    """
    if len(pred) != len(gt):
        raise ValueError("trajectories must have equal length")
    gp = gt.positions - gt.positions[0]
    pp = pred.positions - pred.positions[0]
    steps = np.linalg.norm(np.diff(gp, axis=0), axis=1)
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    if dist[-1] <= start_after:
        raise ValueError(f"trajectory covers {dist[-1]:.1f} m, needs more "
                         f"than {start_after:.1f} m")
    if scale_align:
        denom = float(np.sum(pp * pp))
        scale = float(np.sum(pp * gp)) / denom if denom > 0 else 1.0
        pp = scale * pp
    sel = dist > start_after
    t_rel = float(np.mean(np.linalg.norm(pp[sel] - gp[sel], axis=1)
                          / dist[sel]) * 100.0)

    angles = _relative_rotation_angles(pred, gt)
    step_sel = dist[1:] > start_after
    bins = np.floor((dist[1:][step_sel] - start_after) / 100.0).astype(int)
    r_rates = []
    for b in np.unique(bins):
        in_bin = bins == b
        bin_dist = float(np.sum(steps[step_sel][in_bin]))
        if bin_dist > 0:
            r_rates.append(np.sum(angles[step_sel][in_bin]) / bin_dist * 100.0)
    r_rel = float(np.mean(r_rates)) if r_rates else 0.0
    return t_rel, r_rel
