"""Direct-variable optimization: per-frame depth logits, per-pair motion and
translation fields, and shared camera intrinsics, all updated by Adam against
the symmetrized consistency objective.

Depth is parameterized as softplus(logits) so it stays strictly positive.
Each step rebuilds a fresh tape from the current numpy values (define-by-run),
so the registry itself holds plain arrays plus Adam state.  Determinism: a
fixed schedule seed makes every trace bit-identical across runs.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import calib
from .autodiff import _data
from .camera import CameraModel, adjust_intrinsics
from .image import bilinear_sample, randomized_layer_norm
from .losses import FramePair, LossWeights, PairState, total_loss
from .motion import RigidMotion, TranslationField, invert_motion

DEPTH_ONE_LOGIT = float(np.log(np.e - 1.0))  # softplus(x) = 1
GROUPS = ("depth", "motion", "field", "intrinsics")
ROTATION_FLOOR = 1e-3  # rad; below this no pair supervises the focal lengths


class OptimizationDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class Schedule:
    steps: int = 300
    lr_depth: float = 1e-2
    lr_motion: float = 1e-2
    lr_intrinsics: float = 1e-3
    seed: int = 0
    coarse_to_fine: tuple = (4, 2, 1)   # trailing 1 = full resolution
    level_fraction: float = 0.35        # share of steps per coarse level
    margin_fraction: float = 0.01
    ssim_window: int = 3
    rln_noise_std: float = 0.0          # optional input normalization noise


@dataclass
class ProblemConfig:
    camera: CameraModel = None          # initial intrinsics override
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule = field(default_factory=Schedule)
    masks: list = None                  # per-pair mobile masks (or one shared)
    share_intrinsics: bool = True
    fix_translation_norm: float = None  # gauge anchor for the first pair
    init_jitter: float = 0.0            # relative jitter on initial intrinsics
    gt_depths: list = None              # per-frame ground truth (freezes depth)
    gt_motions: list = None             # per-pair RigidMotion (freezes motion)
    freeze: tuple = ()


@dataclass
class TraceEntry:
    step: int
    total: float
    terms: dict
    intrinsics: tuple
    grad_norm: float


class Adam:
    """Standard Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, key, value, grad, lr):
        m = self.m.get(key)
        if m is None:
            m = np.zeros_like(value)
            self.m[key] = m
            self.v[key] = np.zeros_like(value)
            self.t[key] = 0
        self.t[key] += 1
        t = self.t[key]
        self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * grad
        self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * grad * grad
        m_hat = self.m[key] / (1.0 - self.beta1 ** t)
        v_hat = self.v[key] / (1.0 - self.beta2 ** t)
        return value - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class OptimProblem:
    """Variable registry and optimizer state over a frame sequence."""

    def __init__(self, frames, config):
        if len(frames) < 2:
            raise ValueError("need at least one frame pair")
        self.frames = [np.asarray(f, dtype=np.float64) for f in frames]
        self.config = config
        self.weights = config.weights
        self.schedule = config.schedule
        H, W = self.frames[0].shape[:2]
        for f in self.frames:
            if f.shape[:2] != (H, W):
                raise ValueError("inconsistent frame sizes")
        self.shape = (H, W)
        self.n_pairs = len(frames) - 1
        self.masks = self._normalize_masks(config.masks)
        self.frozen = set(config.freeze)
        self.step_count = 0
        self.adam = Adam()
        self.variables = {}
        self._init_variables()

    # -- setup ---------------------------------------------------------------
    def _normalize_masks(self, masks):
        if masks is None:
            return [None] * self.n_pairs
        if isinstance(masks, np.ndarray):
            masks = [masks] * self.n_pairs
        return [None if m is None else np.asarray(m).astype(bool) for m in masks]

    def _init_variables(self):
        cfg = self.config
        H, W = self.shape
        for i in range(len(self.frames)):
            if cfg.gt_depths is not None:
                depth = np.asarray(cfg.gt_depths[i], dtype=np.float64)
                logits = np.log(np.expm1(np.maximum(depth, 1e-8)))
            else:
                logits = np.full((H, W), DEPTH_ONE_LOGIT)
            self.variables[("depth_logits", i)] = logits
        if cfg.gt_depths is not None:
            self.frozen.add("depth")
        for p in range(self.n_pairs):
            if cfg.gt_motions is not None:
                fwd = cfg.gt_motions[p]
                bwd = invert_motion(fwd)
                self.variables[("angles", p, "fwd")] = np.array(fwd.angles, float)
                self.variables[("translation", p, "fwd")] = np.array(fwd.translation, float)
                self.variables[("angles", p, "bwd")] = np.array(bwd.angles, float)
                self.variables[("translation", p, "bwd")] = np.array(bwd.translation, float)
            else:
                for d in ("fwd", "bwd"):
                    self.variables[("angles", p, d)] = np.zeros(3)
                    self.variables[("translation", p, d)] = np.zeros(3)
            if self.masks[p] is not None and self.masks[p].any():
                for d in ("fwd", "bwd"):
                    self.variables[("residual", p, d)] = np.zeros((H, W, 3))
        if cfg.gt_motions is not None:
            self.frozen.add("motion")
        rng = np.random.default_rng(self.schedule.seed)
        jitter = (lambda: 1.0 + rng.uniform(-cfg.init_jitter, cfg.init_jitter)) \
            if cfg.init_jitter > 0 else (lambda: 1.0)
        if cfg.camera is not None:
            c = cfg.camera.detached()
            intr = np.array([c.fx * jitter(), c.fy * jitter(),
                             c.x0, c.y0, c.k1, c.k2])
        else:
            f = float(max(W, H))
            intr = np.array([f * jitter(), f * jitter(), W / 2.0, H / 2.0,
                             0.0, 0.0])
        keys = [("intrinsics",)] if cfg.share_intrinsics else \
            [("intrinsics", p) for p in range(self.n_pairs)]
        for k in keys:
            self.variables[k] = intr.copy()

    # -- variable plumbing -----------------------------------------------------
    def _group_of(self, key):
        name = key[0]
        return {"depth_logits": "depth", "angles": "motion",
                "translation": "motion", "residual": "field",
                "intrinsics": "intrinsics"}[name]

    def intrinsics_key(self, p=0):
        return ("intrinsics",) if self.config.share_intrinsics else ("intrinsics", p)

    def camera(self, p=0):
        fx, fy, x0, y0, k1, k2 = self.variables[self.intrinsics_key(p)]
        H, W = self.shape
        return CameraModel(fx, fy, x0, y0, k1, k2, W, H, validate=False)

    def depth(self, i):
        return np.logaddexp(0.0, self.variables[("depth_logits", i)])

    def motion(self, p, direction="fwd"):
        return RigidMotion(self.variables[("angles", p, direction)].copy(),
                           self.variables[("translation", p, direction)].copy())

    def pair(self, p):
        rgb_a, rgb_b = self.frames[p], self.frames[p + 1]
        return FramePair(rgb_a=rgb_a, rgb_b=rgb_b, mobile_mask=self.masks[p],
                         index_a=p, index_b=p + 1)

    # -- one optimization step ---------------------------------------------------
    def _build_states(self, tape):
        """Wrap the registry into per-pair PairStates on the tape."""
        H, W = self.shape
        wrapped = {k: tape.variable(v, name=str(k))
                   for k, v in self.variables.items()}
        states = []
        for p in range(self.n_pairs):
            intr = wrapped[self.intrinsics_key(p)]
            cam = CameraModel(intr[0], intr[1], intr[2], intr[3],
                              intr[4], intr[5], W, H, validate=False)
            mask = self.masks[p]
            depth_a = ad.softplus(wrapped[("depth_logits", p)])
            depth_b = ad.softplus(wrapped[("depth_logits", p + 1)])
            fields = {}
            for d in ("fwd", "bwd"):
                resid = wrapped.get(("residual", p, d))
                fields[d] = TranslationField(
                    wrapped[("translation", p, d)], resid,
                    mask.astype(float) if (resid is not None) else None)
            states.append(PairState(
                depth_a=depth_a, depth_b=depth_b,
                angles_ab=wrapped[("angles", p, "fwd")],
                tfield_ab=fields["fwd"],
                angles_ba=wrapped[("angles", p, "bwd")],
                tfield_ba=fields["bwd"],
                cam=cam))
        return wrapped, states

    def _preprocessed(self, pair, tape):
        if self.schedule.rln_noise_std <= 0:
            return pair
        noisy_a = randomized_layer_norm(pair.rgb_a, self.schedule.rln_noise_std,
                                        rng=tape.rng)
        noisy_b = randomized_layer_norm(pair.rgb_b, self.schedule.rln_noise_std,
                                        rng=tape.rng)
        return replace(pair, rgb_a=noisy_a, rgb_b=noisy_b)

    def evaluate(self, tape=None):
        """Current total loss (report per pair) without updating anything."""
        tape = tape or ad.Tape(self.schedule.seed + self.step_count)
        wrapped, states = self._build_states(tape)
        reports = []
        for p, state in enumerate(states):
            pair = self._preprocessed(self.pair(p), tape)
            reports.append(total_loss(pair, state, self.weights,
                                      self.schedule.margin_fraction,
                                      self.schedule.ssim_window))
        total = reports[0].total
        for r in reports[1:]:
            total = total + r.total
        return total, reports, wrapped

    def step(self):
        """One Adam update of all unfrozen variables; returns a TraceEntry."""
        tape = ad.Tape(self.schedule.seed + self.step_count)
        total, reports, wrapped = self.evaluate(tape)
        total_val = float(_data(total))
        trace = self._trace_entry(total_val, reports, grad_norm=np.nan)
        if not np.isfinite(total_val):
            raise OptimizationDiverged(f"non-finite loss at step "
                                       f"{self.step_count}", trace)
        try:
            grads = ad.backward(total)
        except ad.NonFiniteGradientError as e:
            raise OptimizationDiverged(str(e), trace) from e
        sq_norm = 0.0
        lr = {"depth": self.schedule.lr_depth, "motion": self.schedule.lr_motion,
              "field": self.schedule.lr_motion,
              "intrinsics": self.schedule.lr_intrinsics}
        for key, var in wrapped.items():
            g = np.asarray(grads[var.id])
            sq_norm += float((g * g).sum())
            group = self._group_of(key)
            if group in self.frozen:
                continue
            self.variables[key] = self.adam.step(key, self.variables[key], g,
                                                 lr[group])
        if self.config.fix_translation_norm is not None and \
                "motion" not in self.frozen:
            self._project_translation_norm()
        self.step_count += 1
        trace.grad_norm = float(np.sqrt(sq_norm))
        return trace

    def _project_translation_norm(self):
        key = ("translation", 0, "fwd")
        t = self.variables[key]
        norm = float(np.linalg.norm(t))
        if norm > 1e-12:
            self.variables[key] = t * (self.config.fix_translation_norm / norm)

    def _trace_entry(self, total_val, reports, grad_norm):
        terms = {}
        for r in reports:
            for name, v in r.terms.items():
                terms[name] = terms.get(name, 0.0) + float(_data(v))
        return TraceEntry(step=self.step_count, total=total_val, terms=terms,
                          intrinsics=tuple(self.variables[self.intrinsics_key()]),
                          grad_norm=grad_norm)


def init_problem(frames, config=None):
    """Fresh problem: uniform depth 1, zero motion, default or overridden
    intrinsics.  Deterministic for a fixed config."""
    return OptimProblem(frames, config or ProblemConfig())


def step(problem):
    return problem.step()


def freeze(problem, group):
    if group not in GROUPS:
        raise ValueError(f"unknown variable group {group!r}")
    problem.frozen.add(group)


def unfreeze(problem, group):
    if group not in GROUPS:
        raise ValueError(f"unknown variable group {group!r}")
    problem.frozen.discard(group)


# -- multi-resolution driver -----------------------------------------------------

def _downsample_rgb(img, f):
    H, W = img.shape[:2]
    if img.ndim == 3:
        return img.reshape(H // f, f, W // f, f, img.shape[2]).mean(axis=(1, 3))
    return img.reshape(H // f, f, W // f, f).mean(axis=(1, 3))


def _downsample_mask(mask, f):
    H, W = mask.shape
    return mask.reshape(H // f, f, W // f, f).max(axis=(1, 3))


def _upsample_bilinear(grid, shape):
    H, W = shape
    h, w = grid.shape[:2]
    us = (np.arange(W) + 0.5) * (w / W) - 0.5
    vs = (np.arange(H) + 0.5) * (h / H) - 0.5
    coords = np.stack(np.meshgrid(us, vs), axis=-1)
    out, _ = bilinear_sample(np.asarray(grid, dtype=np.float64), coords)
    return out


def solve(problem, callback=None):
    """Run the schedule: coarse-to-fine warmup levels (when the image size
    allows them and depth is not frozen to ground truth), then full
    resolution.  Returns the list of TraceEntries."""
    sched = problem.schedule
    cfg = problem.config
    trace = []
    H, W = problem.shape
    levels = [f for f in sched.coarse_to_fine
              if f > 1 and H % f == 0 and W % f == 0]
    run_c2f = levels and cfg.gt_depths is None and "depth" not in problem.frozen
    if run_c2f:
        carry = None
        for f in levels:
            sub_cfg = replace(
                cfg,
                camera=adjust_intrinsics(problem.camera(), resize=(W // f, H // f)),
                schedule=replace(sched, coarse_to_fine=()),
                masks=[None if m is None else _downsample_mask(m, f)
                       for m in problem.masks],
                gt_depths=None, gt_motions=None)
            sub = OptimProblem([_downsample_rgb(img, f) for img in problem.frames],
                               sub_cfg)
            sub.frozen = set(problem.frozen)
            if carry is not None:
                _carry_state(carry, sub)
            n = max(1, int(sched.steps * sched.level_fraction / len(levels)))
            for _ in range(n):
                entry = sub.step()
                trace.append(entry)
                if callback:
                    callback(entry)
            carry = sub
        _carry_state(carry, problem)
    for _ in range(sched.steps):
        entry = problem.step()
        trace.append(entry)
        if callback:
            callback(entry)
    for i, entry in enumerate(trace):
        entry.step = i
    return trace


def _carry_state(src, dst):
    """Move optimized variables up one resolution level."""
    H, W = dst.shape
    for key, val in src.variables.items():
        kind = key[0]
        if kind == "depth_logits":
            dst.variables[key] = _upsample_bilinear(val, (H, W))
        elif kind == "residual":
            if key in dst.variables:
                dst.variables[key] = _upsample_bilinear(val, (H, W))
        elif kind == "intrinsics":
            sub_cam = CameraModel(val[0], val[1], val[2], val[3], val[4], val[5],
                                  src.shape[1], src.shape[0], validate=False)
            up = adjust_intrinsics(sub_cam, resize=(W, H)).detached()
            dst.variables[key] = np.array([up.fx, up.fy, up.x0, up.y0,
                                           up.k1, up.k2])
        else:
            dst.variables[key] = val.copy()


# -- the intrinsics protocol -------------------------------------------------------

@dataclass
class IntrinsicsSolution:
    camera: CameraModel
    trace: list
    tolerance: object          # ToleranceReport at the median pair rotation
    warning: str = None


def solve_intrinsics(frames, config=None):
    """Optimize with the intrinsics unfrozen (depth/motion either frozen to
    supplied ground truth or learned jointly) and report the recovered
    camera together with the focal-length tolerance bound evaluated at the
    median per-pair rotation.  Rotation-free data cannot determine the focal
    lengths; that case is flagged with a warning rather than an error."""
    config = config or ProblemConfig()
    problem = init_problem(frames, config)
    unfreeze(problem, "intrinsics")
    trace = solve(problem)
    cam = problem.camera().detached()
    rotations = np.array([np.linalg.norm(problem.variables[("angles", p, "fwd")])
                          for p in range(problem.n_pairs)])
    rx_med = float(np.median([abs(problem.variables[("angles", p, "fwd")][0])
                              for p in range(problem.n_pairs)]))
    ry_med = float(np.median([abs(problem.variables[("angles", p, "fwd")][1])
                              for p in range(problem.n_pairs)]))
    tol = calib.focal_tolerance(cam, rx_med, ry_med)
    warning = None
    if np.all(rotations < ROTATION_FLOOR):
        warning = ("all pairs are rotation-free (max |r| = "
                   f"{rotations.max():.2e} rad): translations alone provide "
                   "no supervision for the intrinsics")
        warnings.warn(warning)
    return IntrinsicsSolution(camera=cam, trace=trace, tolerance=tol,
                              warning=warning)


def trace_to_csv(trace, path):
    names = ["rgb_l1", "ssim", "depth_l1", "cycle_rotation",
             "cycle_translation", "smoothness"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "total", *names,
                         "fx", "fy", "x0", "y0", "k1", "k2", "grad_norm"])
        for e in trace:
            writer.writerow([e.step, repr(e.total),
                             *[repr(e.terms.get(n, 0.0)) for n in names],
                             *[repr(v) for v in e.intrinsics],
                             repr(e.grad_norm)])
