"""Synthetic-scene oracle: parametric 3D scenes rendered by brute-force ray
casting with a z-buffer, giving exact depth, cross-view correspondences,
occlusion masks, and per-pixel translation fields to test the differentiable
pipeline against.  Also the pointcloud-to-sparse-depth renderer.

Scenes are lists of textured planar patches and spheres; a surface with a
nonzero velocity is a mover that translates rigidly between frames.  Every
camera ray inside the tested field of view must hit at least one surface, so
scenes normally include a large backdrop plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, project, undistort_normalized, unproject
from .motion import RigidMotion, euler_angles, rotation_matrix

_MISS = np.inf
_RAY_EPS = 1e-9


def _texture(seed, freq, a, b):
    """Band-limited procedural RGB texture on local surface coordinates.

    A couple of low-frequency components keep the photometric basin wide;
    the rest sit near `freq` cycles per unit so the texture is nonconstant
    at the SSIM window scale once projected.
    """
    rng = np.random.default_rng(seed)
    channels = []
    for _ in range(3):
        val = np.full(np.shape(a), 0.5)
        for f_rel, amp in ((0.10, 0.15), (0.22, 0.10)):
            th = rng.uniform(0, 2 * np.pi)
            ph = rng.uniform(0, 2 * np.pi)
            val = val + amp * np.cos(2 * np.pi * f_rel * freq
                                     * (np.cos(th) * a + np.sin(th) * b) + ph)
        for _ in range(6):
            f = rng.uniform(0.6, 1.0) * freq
            th = rng.uniform(0, 2 * np.pi)
            ph = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.03, 0.07)
            val = val + amp * np.cos(2 * np.pi * f
                                     * (np.cos(th) * a + np.sin(th) * b) + ph)
        channels.append(val)
    return np.clip(np.stack(channels, axis=-1), 0.02, 0.98)


@dataclass
class Plane:
    """Textured rectangular patch: center, Z-Y-X orientation angles (the
    patch normal is the rotated +z axis), full extents along the local x/y
    axes."""
    center: np.ndarray
    angles: np.ndarray
    extent: tuple
    texture_seed: int = 0
    texture_freq: float = 1.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def frame(self):
        r = rotation_matrix(np.asarray(self.angles, dtype=np.float64))
        return r[:, 0], r[:, 1], r[:, 2]

    def intersect(self, origin, dirs, time):
        e1, e2, n = self.frame()
        center = np.asarray(self.center, dtype=np.float64) \
            + np.asarray(self.velocity) * time
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((center - origin) @ n) / denom
        pts = origin + t[..., None] * dirs
        rel = pts - center
        a = rel @ e1
        b = rel @ e2
        ok = (np.abs(denom) > 1e-12) & (t > _RAY_EPS) \
            & (np.abs(a) <= self.extent[0] / 2.0) \
            & (np.abs(b) <= self.extent[1] / 2.0)
        return np.where(ok, t, _MISS)

    def local_coords(self, pts, time):
        e1, e2, _ = self.frame()
        center = np.asarray(self.center, dtype=np.float64) \
            + np.asarray(self.velocity) * time
        rel = pts - center
        return rel @ e1, rel @ e2

    def shade(self, pts, time):
        a, b = self.local_coords(pts, time)
        return _texture(self.texture_seed, self.texture_freq, a, b)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture_seed: int = 0
    texture_freq: float = 1.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def intersect(self, origin, dirs, time):
        center = np.asarray(self.center, dtype=np.float64) \
            + np.asarray(self.velocity) * time
        oc = origin - center
        a = np.sum(dirs * dirs, axis=-1)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4.0 * a * c
        with np.errstate(invalid="ignore"):
            t = (-b - np.sqrt(disc)) / (2.0 * a)
        ok = (disc > 0) & (t > _RAY_EPS)
        return np.where(ok, t, _MISS)

    def local_coords(self, pts, time):
        center = np.asarray(self.center, dtype=np.float64) \
            + np.asarray(self.velocity) * time
        rel = (pts - center) / self.radius
        rel = np.clip(rel, -1.0, 1.0)
        theta = np.arctan2(rel[..., 0], rel[..., 2])
        phi = np.arcsin(np.clip(rel[..., 1], -1.0, 1.0))
        return theta * self.radius, phi * self.radius

    def shade(self, pts, time):
        a, b = self.local_coords(pts, time)
        return _texture(self.texture_seed, self.texture_freq, a, b)


@dataclass
class Scene:
    surfaces: list

    def movers(self):
        return [i for i, s in enumerate(self.surfaces)
                if np.any(np.asarray(s.velocity) != 0.0)]


@dataclass
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray = None


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    surface_id: np.ndarray
    points_world: np.ndarray
    correspondence: np.ndarray = None        # (H, W, 2) pixel coords in the other view
    correspondence_valid: np.ndarray = None  # in front of the other camera
    occlusion_from_other: np.ndarray = None  # 1 = visible in both views
    translation_field: np.ndarray = None     # per-pixel translation into the other view
    instance_masks: list = None              # one boolean grid per mover


def _pose_rt(pose):
    pose = np.asarray(pose, dtype=np.float64)
    return pose[:, :3], pose[:, 3]


def _ray_dirs(cam, pose, us, vs):
    """World-frame ray directions with unit camera-frame z, so the ray
    parameter equals camera depth."""
    c = cam.detached()
    xd = (us - c.x0) / c.fx
    yd = (vs - c.y0) / c.fy
    if c.has_distortion():
        xn, yn = undistort_normalized(c, xd, yd)
    else:
        xn, yn = xd, yd
    dirs_cam = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    r, _ = _pose_rt(pose)
    return dirs_cam @ r.T


def _cast(scene, cam, pose, time, us, vs):
    """Nearest-hit z-buffer over all surfaces.  Returns (depth, surface id,
    world points); raises if any ray escapes the scene."""
    _, c = _pose_rt(pose)
    dirs = _ray_dirs(cam, pose, us, vs)
    depth = np.full(us.shape, _MISS)
    sid = np.full(us.shape, -1, dtype=np.intp)
    for k, s in enumerate(scene.surfaces):
        t = s.intersect(c, dirs, time)
        closer = t < depth
        depth = np.where(closer, t, depth)
        sid = np.where(closer, k, sid)
    if np.any(~np.isfinite(depth)):
        n = int(np.count_nonzero(~np.isfinite(depth)))
        raise ValueError(f"{n} rays missed every surface; scene has holes")
    return depth, sid, c + depth[..., None] * dirs


def _shade(scene, sid, pts, time):
    rgb = np.zeros(pts.shape[:-1] + (3,))
    for k, s in enumerate(scene.surfaces):
        mask = sid == k
        if np.any(mask):
            rgb[mask] = s.shade(pts[mask], time)
    return rgb


def render(scene, cam, pose, time=0.0, supersample=2):
    """Ray-cast the scene: RGB is averaged over supersample^2 subpixel rays,
    depth and geometry come from the pixel-center ray."""
    H, W = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    depth, sid, pts = _cast(scene, cam, pose, time, us, vs)
    rgb = np.zeros((H, W, 3))
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    for du in offsets:
        for dv in offsets:
            d_s, sid_s, pts_s = _cast(scene, cam, pose, time, us + du, vs + dv)
            rgb += _shade(scene, sid_s, pts_s, time)
    rgb /= supersample ** 2
    return RenderOutput(rgb=rgb, depth=depth, surface_id=sid, points_world=pts)


def _visible_in(scene, cam, pose, time, pts_world, tol_rel=1e-6):
    """Z-buffer visibility of world points from another view: the point must
    project inside the image with positive depth and be (within tolerance)
    the nearest hit along its own ray."""
    r, c = _pose_rt(pose)
    pts_cam = (pts_world - c) @ r
    z = pts_cam[..., 2]
    in_front = z > _RAY_EPS
    vis = np.zeros(z.shape, dtype=bool)
    if not np.any(in_front):
        return vis
    cd = cam.detached()
    safe = np.where(in_front, z, 1.0)
    pix, _ = project(np.concatenate([pts_cam[..., :2],
                                     safe[..., None]], axis=-1), cd)
    u, v = pix[..., 0], pix[..., 1]
    slack = 1e-9  # float noise at the image border must not flip visibility
    in_img = in_front & (u >= -slack) & (u <= cd.width - 1 + slack) \
        & (v >= -slack) & (v <= cd.height - 1 + slack)
    if not np.any(in_img):
        return vis
    dirs = (pts_world - c) / np.where(in_front, z, 1.0)[..., None]
    nearest = np.full(z.shape, _MISS)
    for s in scene.surfaces:
        t = s.intersect(c, dirs, time)
        nearest = np.minimum(nearest, t)
    vis = in_img & (z <= nearest * (1.0 + tol_rel) + _RAY_EPS)
    return vis


def render_pair(scene, cam, pose_a, pose_b, times=(0.0, 1.0), supersample=2):
    """Render two views and fill in the cross-view ground truth on both:
    exact correspondences, visibility ("occlusion_from_other"), the true
    per-pixel translation field, and instance masks for movers."""
    out = []
    for pose, time in ((pose_a, times[0]), (pose_b, times[1])):
        out.append(render(scene, cam, pose, time, supersample))
    for this, (pose_this, time_this, pose_other, time_other) in zip(
            out, ((pose_a, times[0], pose_b, times[1]),
                  (pose_b, times[1], pose_a, times[0]))):
        r_this, c_this = _pose_rt(pose_this)
        r_other, c_other = _pose_rt(pose_other)
        dt = time_other - time_this
        # displace mover points to the other frame's time
        pts_then = this.points_world.copy()
        for k in scene.movers():
            m = this.surface_id == k
            pts_then[m] += np.asarray(scene.surfaces[k].velocity) * dt
        pts_cam = (pts_then - c_other) @ r_other
        z = pts_cam[..., 2]
        valid = z > _RAY_EPS
        safe = np.where(valid, z, 1.0)
        pix, _ = project(np.concatenate([pts_cam[..., :2], safe[..., None]],
                                        axis=-1), cam.detached())
        this.correspondence = pix
        this.correspondence_valid = valid
        this.occlusion_from_other = _visible_in(scene, cam, pose_other,
                                                time_other, pts_then)
        # true translation field in the warp convention X_b = R X_a + t(x, y)
        r_rel = r_other.T @ r_this
        t_rel = r_other.T @ (c_this - c_other)
        tfield = np.broadcast_to(t_rel, this.points_world.shape).copy()
        for k in scene.movers():
            m = this.surface_id == k
            tfield[m] += (r_other.T @ (np.asarray(scene.surfaces[k].velocity)
                                       * dt))
        this.translation_field = tfield
        this.instance_masks = [this.surface_id == k for k in scene.movers()]
    return out[0], out[1]


def relative_motion(pose_a, pose_b):
    """RigidMotion taking camera-a coordinates to camera-b coordinates."""
    r_a, c_a = _pose_rt(pose_a)
    r_b, c_b = _pose_rt(pose_b)
    r_rel = r_b.T @ r_a
    t_rel = r_b.T @ (c_a - c_b)
    return RigidMotion(euler_angles(r_rel), t_rel)


def brute_force_occlusion(scene, pose_a, pose_b, cam, times=(0.0, 1.0)):
    """For each pixel of view A: 1 if its surface point is also visible in
    view B (nearest hit along B's ray within 1e-6 relative depth)."""
    ra = render(scene, cam, pose_a, times[0], supersample=1)
    pts = ra.points_world.copy()
    dt = times[1] - times[0]
    for k in scene.movers():
        m = ra.surface_id == k
        pts[m] += np.asarray(scene.surfaces[k].velocity) * dt
    return _visible_in(scene, cam, pose_b, times[1], pts)


def depth_edge_band(depth, rel_threshold=0.03, dilate=1):
    """Pixels within `dilate` steps of a depth discontinuity (relative jump
    between 4-neighbors above the threshold).  Occlusion comparisons are
    only meaningful away from this band."""
    depth = np.asarray(depth)
    edge = np.zeros(depth.shape, dtype=bool)
    jump_v = np.abs(np.diff(depth, axis=0)) / np.minimum(depth[1:, :],
                                                         depth[:-1, :])
    edge[1:, :] |= jump_v > rel_threshold
    edge[:-1, :] |= jump_v > rel_threshold
    jump_h = np.abs(np.diff(depth, axis=1)) / np.minimum(depth[:, 1:],
                                                         depth[:, :-1])
    edge[:, 1:] |= jump_h > rel_threshold
    edge[:, :-1] |= jump_h > rel_threshold
    for _ in range(dilate):
        grown = edge.copy()
        grown[1:, :] |= edge[:-1, :]
        grown[:-1, :] |= edge[1:, :]
        grown[:, 1:] |= edge[:, :-1]
        grown[:, :-1] |= edge[:, 1:]
        edge = grown
    return edge


# -- pointcloud rendering (sparse depth ground truth) --------------------------

@dataclass
class PointcloudRenderParams:
    angular_width: float           # radians
    depth_ratio_threshold: float = 1.1
    grid_cell: float = 1.0         # pixels

    def __post_init__(self):
        if self.angular_width <= 0 or self.grid_cell <= 0:
            raise ValueError("pointcloud params must be positive")
        if self.depth_ratio_threshold <= 1.0:
            raise ValueError("depth ratio threshold must exceed 1")


def default_pointcloud_params(cam):
    """The defaults expressed in image terms: 1.5 px occlusion width,
    ratio 1.1, 1 px grid cells."""
    c = cam.detached()
    return PointcloudRenderParams(angular_width=1.5 / ((c.fx + c.fy) / 2.0))


def render_depth_from_pointcloud(cloud, cam, pose, params=None):
    """Project a pointcloud to a sparse depth map.

    Points landing within the angular width of a closer point whose depth
    ratio exceeds the threshold are dropped (crude occlusion), then at most
    one point (the nearest) survives per projective grid cell.  Pixels with
    no surviving point hold 0.
    """
    if params is None:
        params = default_pointcloud_params(cam)
    c = cam.detached()
    H, W = c.height, c.width
    out = np.zeros((H, W))
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if pts.size == 0:
        return out
    r, t = _pose_rt(pose)
    pts_cam = (pts - t) @ r
    z = pts_cam[..., 2]
    keep = z > _RAY_EPS
    pts_cam, z = pts_cam[keep], z[keep]
    if z.size == 0:
        return out
    pix, _ = project(pts_cam, c)
    u, v = pix[:, 0], pix[:, 1]
    inside = (u >= -0.5) & (u < W - 0.5) & (v >= -0.5) & (v < H - 0.5)
    u, v, z = u[inside], v[inside], z[inside]
    if z.size == 0:
        return out

    # pairwise occlusion pruning inside the angular width
    radius_px = params.angular_width * (c.fx + c.fy) / 2.0
    cell = max(radius_px, 1e-9)
    cu = np.floor(u / cell).astype(np.intp)
    cv = np.floor(v / cell).astype(np.intp)
    buckets = {}
    for i in range(z.size):
        buckets.setdefault((cu[i], cv[i]), []).append(i)
    drop = np.zeros(z.size, dtype=bool)
    for (bu, bv), members in buckets.items():
        neighbors = []
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                neighbors.extend(buckets.get((bu + du, bv + dv), ()))
        neighbors = np.array(neighbors)
        for i in members:
            d2 = (u[neighbors] - u[i]) ** 2 + (v[neighbors] - v[i]) ** 2
            close = neighbors[(d2 <= radius_px ** 2) & (neighbors != i)]
            if close.size and np.any(z[i] / z[close] > params.depth_ratio_threshold):
                drop[i] = True
    u, v, z = u[~drop], v[~drop], z[~drop]

    # one nearest point per projective grid cell
    gu = np.floor((u + 0.5) / params.grid_cell).astype(np.intp)
    gv = np.floor((v + 0.5) / params.grid_cell).astype(np.intp)
    best = {}
    for i in range(z.size):
        key = (gu[i], gv[i])
        if key not in best or z[i] < z[best[key]]:
            best[key] = i
    for i in best.values():
        out[int(round(v[i])), int(round(u[i]))] = z[i]
    return out


# -- scene text format ----------------------------------------------------------

def save_scene(path, scene):
    with open(path, "w") as f:
        for s in scene.surfaces:
            vel = np.asarray(s.velocity, dtype=np.float64)
            if isinstance(s, Plane):
                f.write("plane " + " ".join(
                    f"{x:.9g}" for x in (*s.center, *s.angles, *s.extent))
                    + f" {s.texture_seed} {s.texture_freq:.9g}")
            elif isinstance(s, Sphere):
                f.write("sphere " + " ".join(
                    f"{x:.9g}" for x in (*s.center, s.radius))
                    + f" {s.texture_seed} {s.texture_freq:.9g}")
            else:
                raise TypeError(f"unknown surface {type(s)}")
            if np.any(vel != 0.0):
                f.write(" vel " + " ".join(f"{x:.9g}" for x in vel))
            f.write("\n")


def load_scene(path):
    surfaces = []
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            kind = tok[0]
            vel = np.zeros(3)
            if "vel" in tok:
                i = tok.index("vel")
                vel = np.array(tok[i + 1:i + 4], dtype=np.float64)
                tok = tok[:i]
            if kind == "plane":
                vals = np.array(tok[1:9], dtype=np.float64)
                surfaces.append(Plane(center=vals[0:3], angles=vals[3:6],
                                      extent=(vals[6], vals[7]),
                                      texture_seed=int(tok[9]),
                                      texture_freq=float(tok[10]),
                                      velocity=vel))
            elif kind == "sphere":
                vals = np.array(tok[1:5], dtype=np.float64)
                surfaces.append(Sphere(center=vals[0:3], radius=vals[3],
                                       texture_seed=int(tok[5]),
                                       texture_freq=float(tok[6]),
                                       velocity=vel))
            else:
                raise ValueError(f"unknown primitive {kind!r} in {path}")
    return Scene(surfaces)


# -- presets ---------------------------------------------------------------------

def default_camera(width=128, height=96, fx=None):
    fx = fx if fx is not None else 1.05 * max(width, height)
    return CameraModel(fx, fx, width / 2.0, height / 2.0, 0.0, 0.0,
                       width, height)


def pose_from_motion(angles, position):
    """Camera-to-world 3x4 from world-frame orientation angles and position."""
    return np.concatenate([rotation_matrix(np.asarray(angles, float)),
                           np.reshape(np.asarray(position, float), (3, 1))],
                          axis=1)


def preset_two_planes(cam=None, baseline=0.06):
    """Near patch partially covering a far backdrop; two laterally separated
    camera poses.  The scene lives near unit depth (scene units are
    arbitrary and the optimizer initializes depth at 1), and the planes are
    mildly tilted so interpolated depth is strictly convex along them (exact
    ties would make the strict occlusion comparison a coin flip)."""
    cam = cam or default_camera()
    z_far, z_near = 1.8, 1.0
    far_freq = cam.detached().fx / (6.0 * z_far)
    near_freq = cam.detached().fx / (6.0 * z_near)
    scene = Scene([
        Plane(center=np.array([0.0, 0.0, z_far]),
              angles=np.array([0.06, 0.10, 0.0]), extent=(12.0, 9.0),
              texture_seed=7, texture_freq=far_freq),
        Plane(center=np.array([0.1, 0.03, z_near]),
              angles=np.array([-0.05, 0.08, 0.0]), extent=(0.55, 0.75),
              texture_seed=21, texture_freq=near_freq),
    ])
    poses = [pose_from_motion(np.zeros(3), np.zeros(3)),
             pose_from_motion(np.array([0.0, 0.02, 0.0]),
                              np.array([baseline, 0.0, 0.0]))]
    return scene, cam, poses


def preset_mover(cam=None):
    """A rigid background with one small moving patch in front; used for the
    object-motion recovery checks."""
    cam = cam or default_camera()
    fx = cam.detached().fx
    scene = Scene([
        Plane(center=np.array([0.0, 0.0, 2.1]), angles=np.array([0.08, -0.06, 0.0]),
              extent=(15.0, 12.0), texture_seed=3, texture_freq=fx / (6.0 * 2.1)),
        Plane(center=np.array([0.18, -0.06, 1.25]), angles=np.array([0.1, 0.15, 0.0]),
              extent=(0.75, 0.55), texture_seed=5, texture_freq=fx / (6.0 * 1.25)),
        Plane(center=np.array([-0.16, 0.08, 0.8]), angles=np.array([0.0, 0.05, 0.1]),
              extent=(0.28, 0.22), texture_seed=11, texture_freq=fx / (6.0 * 0.8),
              velocity=np.array([0.035, 0.009, 0.0])),
    ])
    return scene, cam


def random_scene(seed, with_sphere=True, cam=None):
    """Randomized tilted-plane scene with full backdrop coverage, living
    near unit depth."""
    rng = np.random.default_rng(seed)
    cam = cam or default_camera()
    fx = cam.detached().fx
    z_far = rng.uniform(1.5, 2.4)
    surfaces = [Plane(center=np.array([0.0, 0.0, z_far]),
                      angles=rng.uniform(-0.12, 0.12, 3) * np.array([1, 1, 0]),
                      extent=(18.0, 14.0), texture_seed=int(rng.integers(1 << 16)),
                      texture_freq=fx / (6.0 * z_far))]
    for _ in range(rng.integers(1, 3)):
        z = rng.uniform(0.7, 1.4)
        surfaces.append(Plane(
            center=np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), z]),
            angles=rng.uniform(-0.25, 0.25, 3) * np.array([1, 1, 0]),
            extent=(rng.uniform(0.25, 0.7), rng.uniform(0.25, 0.6)),
            texture_seed=int(rng.integers(1 << 16)),
            texture_freq=fx / (6.0 * z)))
    if with_sphere and rng.random() < 0.6:
        z = rng.uniform(0.8, 1.3)
        surfaces.append(Sphere(
            center=np.array([rng.uniform(-0.25, 0.25), rng.uniform(-0.15, 0.15), z]),
            radius=rng.uniform(0.1, 0.2),
            texture_seed=int(rng.integers(1 << 16)),
            texture_freq=fx / (6.0 * z)))
    return Scene(surfaces)
