"""File formats used at the package boundaries.

PFM    portable float map, little-endian, scanlines bottom-to-top,
       scale header -1.0; one channel ("Pf") or three ("PF").
PGM    binary P5, 8-bit; masks use 0 = static, 255 = possibly mobile.
PLY    ASCII pointclouds with float x y z and optional intensity.
KITTI  odometry trajectories: one line per frame, 12 reals forming a
       row-major 3x4 camera-to-world matrix.
conf   flat "key=value" text with '#' comments, one entry per line.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        raw = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.flipud(raw.reshape(shape)).astype(np.float64)


# -- PGM ---------------------------------------------------------------------

def write_pgm_mask(path, mask):
    """Binary mask to 8-bit P5: True -> 255 (possibly mobile), False -> 0."""
    mask = np.asarray(mask)
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm_mask(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM file: {path}")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = map(int, line.split())
        maxval = int(f.readline())
        if maxval > 255:
            raise ValueError("only 8-bit PGM supported")
        data = np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w)
    return data >= 128


# -- PLY ---------------------------------------------------------------------

def write_ply(path, points, intensity=None):
    points = np.asarray(points, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if intensity is not None:
        lines.append("property float intensity")
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        for i, p in enumerate(points):
            row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
            if intensity is not None:
                row += f" {intensity[i]:.9g}"
            f.write(row + "\n")


def read_ply(path):
    """Returns (points (N, 3), intensity (N,) or None)."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"not a PLY file: {path}")
        n = None
        props = []
        for line in f:
            token = line.strip()
            if token.startswith("element vertex"):
                n = int(token.split()[-1])
            elif token.startswith("property"):
                props.append(token.split()[-1])
            elif token == "end_header":
                break
        if n is None:
            raise ValueError("PLY header missing vertex count")
        rows = [f.readline().split() for _ in range(n)]
    data = np.array(rows, dtype=np.float64)
    points = data[:, :3]
    intensity = data[:, 3] if "intensity" in props else None
    return points, intensity


# -- KITTI trajectories --------------------------------------------------------

def write_kitti_trajectory(path, poses):
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 3 or poses.shape[1:] != (3, 4):
        raise ValueError("trajectory must be (N, 3, 4)")
    with open(path, "w") as f:
        for p in poses:
            f.write(" ".join(f"{v:.12e}" for v in p.reshape(-1)) + "\n")


def read_kitti_trajectory(path):
    rows = []
    with open(path) as f:
        for line in f:
            vals = line.split()
            if not vals:
                continue
            if len(vals) != 12:
                raise ValueError("each trajectory line needs 12 values")
            rows.append(np.array(vals, dtype=np.float64).reshape(3, 4))
    return np.stack(rows)


# -- key=value configs ---------------------------------------------------------

def read_kv(path):
    out = {}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = float(val.strip())
    return out


def write_kv(path, entries):
    with open(path, "w") as f:
        for key, val in entries.items():
            f.write(f"{key}={val!r}\n")


# -- PNG -----------------------------------------------------------------------

def write_png(path, rgb):
    """RGB floats in [0, 1] to 8-bit PNG."""
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_png(path):
    return np.asarray(Image.open(path), dtype=np.float64)[..., :3] / 255.0
