"""Procedural synthetic scenes with exact ground-truth colors, labels and
poses, and the on-disk dataset format every other module consumes.

A scene is a handful of analytic primitives (sphere / box / disc) under
ambient plus one directional lambertian light, viewed from a ring of poses
looking at the scene center.  Rays that miss everything get the constant
background color and the background class, which matches white-background
compositing at training time.
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from . import kernels
from .rays import CameraIntrinsics, pixel_directions, validate_pose
from .rng import STREAM_SCENE, stream_rng

UNLABELED = 255

_KIND_IDS = {"sphere": kernels.PRIM_SPHERE, "box": kernels.PRIM_BOX, "disc": kernels.PRIM_DISC}


@dataclass
class Primitive:
    kind: str                      # sphere | box | disc
    center: tuple
    size: tuple                    # sphere/disc: (radius,), box: half extents
    albedo: tuple
    class_id: int
    normal: tuple = (0.0, 0.0, 1.0)        # disc only
    checker: tuple = None                  # (r, g, b, cell) second albedo
    bright_spot: tuple = None              # (x, y, radius) near-white patch

    def __post_init__(self):
        if self.kind not in _KIND_IDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.class_id < 0 or self.class_id >= UNLABELED:
            raise ValueError("class_id out of range")


@dataclass
class SceneSpec:
    primitives: list
    background_class: int = 0
    background_color: tuple = (1.0, 1.0, 1.0)
    ambient: float = 0.35
    light_direction: tuple = (-0.45, 0.3, -0.85)
    diffuse: float = 0.65
    world_radius: float = 2.5

    def __post_init__(self):
        ids = sorted({p.class_id for p in self.primitives} | {self.background_class})
        if ids != list(range(len(ids))):
            raise ValueError(f"class ids must be dense starting at 0, got {ids}")
        if not any(p.class_id != self.background_class for p in self.primitives):
            raise ValueError("scene needs at least one non-background class")
        for p in self.primitives:
            if np.linalg.norm(p.center) > self.world_radius:
                raise ValueError(f"primitive at {p.center} outside world bounds")

    @property
    def class_count(self):
        return max([self.background_class] + [p.class_id for p in self.primitives]) + 1


@dataclass
class RingConfig:
    n_views: int = 16
    radius: float = 2.0
    elevation_deg: float = 28.0
    look_at: tuple = (0.0, 0.0, -0.15)
    fov_deg: float = 42.0
    width: int = 64
    height: int = 64
    t_near: float = 0.6
    t_far: float = 4.2
    jitter: float = 0.02


@dataclass
class SceneDataset:
    intrinsics: CameraIntrinsics
    frames: list                   # (pose 4x4, rgb uint8 HxWx3, label uint8 HxW)
    class_count: int
    t_near: float
    t_far: float

    def split(self, hold_every=8):
        """(train, test) frame indices; every hold_every-th view is held out."""
        test = list(range(0, len(self.frames), hold_every))
        train = [i for i in range(len(self.frames)) if i not in test]
        return train, test


def _pack_primitives(spec):
    kinds = np.array([_KIND_IDS[p.kind] for p in spec.primitives], dtype=np.int64)
    params = np.zeros((len(spec.primitives), 7))
    for i, p in enumerate(spec.primitives):
        params[i, :3] = p.center
        if p.kind == "sphere":
            params[i, 3] = p.size[0]
        elif p.kind == "box":
            params[i, 3:6] = p.size
        else:
            n = np.asarray(p.normal, dtype=np.float64)
            params[i, 3:6] = n / np.linalg.norm(n)
            params[i, 6] = p.size[0]
    return kinds, params


def _surface_normal(prim, points, dirs):
    if prim.kind == "sphere":
        n = points - np.asarray(prim.center)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return n
    if prim.kind == "box":
        rel = (points - np.asarray(prim.center)) / np.asarray(prim.size)
        axis = np.argmax(np.abs(rel), axis=1)
        n = np.zeros_like(points)
        n[np.arange(len(points)), axis] = np.sign(rel[np.arange(len(points)), axis])
        return n
    n = np.asarray(prim.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    # face the incoming ray
    flip = (dirs @ n > 0)
    out = np.tile(n, (len(points), 1))
    out[flip] *= -1
    return out


def _albedo(prim, points):
    base = np.tile(np.asarray(prim.albedo, dtype=np.float64), (len(points), 1))
    if prim.checker is not None:
        other = np.asarray(prim.checker[:3], dtype=np.float64)
        cell = prim.checker[3]
        parity = (np.floor(points[:, 0] / cell) + np.floor(points[:, 1] / cell)) % 2
        base[parity == 1] = other
    if prim.bright_spot is not None:
        sx, sy, sr = prim.bright_spot
        d2 = (points[:, 0] - sx) ** 2 + (points[:, 1] - sy) ** 2
        base[d2 <= sr * sr] = (0.98, 0.98, 0.94)
    return base


def shade_rays(spec, origins, dirs):
    """Analytic render of a ray batch: (rgb float, class id, hit distance)."""
    kinds, params = _pack_primitives(spec)
    t, hit = kernels.raytrace(np.ascontiguousarray(origins, dtype=np.float64),
                              np.ascontiguousarray(dirs, dtype=np.float64),
                              kinds, params)
    rgb = np.tile(np.asarray(spec.background_color, dtype=np.float64), (len(dirs), 1))
    labels = np.full(len(dirs), spec.background_class, dtype=np.uint8)
    light = np.asarray(spec.light_direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for i, prim in enumerate(spec.primitives):
        sel = hit == i
        if not sel.any():
            continue
        pts = origins[sel] + t[sel, None] * dirs[sel]
        n = _surface_normal(prim, pts, dirs[sel])
        lambert = np.maximum(0.0, -(n @ light))
        shade = np.clip(spec.ambient + spec.diffuse * lambert, 0.0, 1.0)
        rgb[sel] = np.clip(_albedo(prim, pts) * shade[:, None], 0.0, 1.0)
        labels[sel] = prim.class_id
    return rgb, labels, t


def raytrace_pixel(spec, ray):
    """Single-ray wrapper: (rgb, class id, hit distance or inf)."""
    rgb, labels, t = shade_rays(spec, ray.origin[None, :], ray.direction[None, :])
    return rgb[0], int(labels[0]), float(t[0])


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)):
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    upv = np.cross(right, fwd)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = upv
    c2w[:3, 2] = -fwd
    c2w[:3, 3] = eye
    return c2w


def ring_intrinsics(ring):
    f = 0.5 * ring.width / np.tan(np.deg2rad(ring.fov_deg) / 2.0)
    return CameraIntrinsics(fx=f, fy=f, cx=ring.width / 2.0, cy=ring.height / 2.0,
                            width=ring.width, height=ring.height)


def generate_scene(spec, ring, seed=0):
    """Ray-trace the spec from a jittered ring of poses; labels are exact."""
    if ring.n_views < 1:
        raise ValueError("need at least one view")
    intr = ring_intrinsics(ring)
    rng = stream_rng(seed, STREAM_SCENE)
    frames = []
    for v in range(ring.n_views):
        theta = 2.0 * np.pi * v / ring.n_views + rng.uniform(-ring.jitter, ring.jitter)
        phi = np.deg2rad(ring.elevation_deg) + rng.uniform(-ring.jitter, ring.jitter)
        eye = np.asarray(ring.look_at) + ring.radius * np.array(
            [np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)])
        pose = look_at_pose(eye, ring.look_at)
        dirs = pixel_directions(intr, pose).reshape(-1, 3)
        origins = np.broadcast_to(pose[:3, 3], dirs.shape)
        rgb, labels, _ = shade_rays(spec, origins, dirs)
        rgb_u8 = np.round(rgb * 255.0).astype(np.uint8).reshape(ring.height, ring.width, 3)
        frames.append((pose, rgb_u8, labels.reshape(ring.height, ring.width).copy()))
    return SceneDataset(intrinsics=intr, frames=frames, class_count=spec.class_count,
                        t_near=ring.t_near, t_far=ring.t_far)


def area_ratio_of(dataset, target_classes):
    total = 0
    hits = 0
    for _, _, labels in dataset.frames:
        total += labels.size
        hits += int(np.isin(labels, list(target_classes)).sum())
    return hits / total


def default_desk_scene(object_scale=1.0):
    """The standard fixture: textured ground with a bright patch, two
    occluding objects of distinct classes, and one small bright target."""
    s = object_scale
    ground = Primitive(kind="disc", center=(0.0, 0.0, -0.6), size=(2.2,),
                       albedo=(0.46, 0.33, 0.22), class_id=0,
                       checker=(0.23, 0.17, 0.11, 0.4),
                       bright_spot=(0.85, -0.55, 0.38))
    block = Primitive(kind="box", center=(-0.38, 0.05, -0.28), size=(0.30 * s, 0.24 * s, 0.34 * s),
                      albedo=(0.20, 0.45, 0.85), class_id=1)
    ball = Primitive(kind="sphere", center=(0.22, 0.38, -0.30), size=(0.30 * s,),
                     albedo=(0.88, 0.72, 0.20), class_id=2)
    small = Primitive(kind="sphere", center=(0.55, -0.52, -0.44), size=(0.16 * s,),
                      albedo=(0.93, 0.12, 0.10), class_id=3)
    return SceneSpec(primitives=[ground, block, ball, small])


def scale_scene_to_alpha(make_spec, target_alpha, ring, target_classes, seed=0,
                         tol=0.01, max_iter=24):
    """Bisection over the object scale until the target pixel fraction of
    `target_classes` is within tol of target_alpha.  `make_spec` maps a
    scale factor to a SceneSpec."""
    probe = replace(ring, n_views=max(2, min(4, ring.n_views)), jitter=0.0)

    def measure(scale):
        ds = generate_scene(make_spec(scale), probe, seed=seed)
        return area_ratio_of(ds, target_classes)

    lo, hi = 0.05, 3.0
    a_lo, a_hi = measure(lo), measure(hi)
    if not a_lo <= target_alpha <= a_hi:
        raise ValueError(
            f"target alpha {target_alpha} outside achievable range [{a_lo:.4f}, {a_hi:.4f}]")
    scale = 1.0
    for _ in range(max_iter):
        scale = 0.5 * (lo + hi)
        a = measure(scale)
        if abs(a - target_alpha) <= tol * 0.5:
            break
        if a < target_alpha:
            lo = scale
        else:
            hi = scale
    return scale


# -- dataset files ----------------------------------------------------------

MANIFEST_NAME = "manifest.json"


class DatasetError(Exception):
    pass


def write_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    frames = []
    for i, (pose, rgb, labels) in enumerate(dataset.frames):
        rgb_name = f"frame_{i:03d}_rgb.png"
        label_name = f"frame_{i:03d}_label.png"
        Image.fromarray(rgb, mode="RGB").save(os.path.join(directory, rgb_name))
        Image.fromarray(labels, mode="L").save(os.path.join(directory, label_name))
        frames.append({"rgb": rgb_name, "label": label_name,
                       "camera_to_world": [float(x) for x in np.asarray(pose).ravel()]})
    intr = dataset.intrinsics
    manifest = {
        "format_version": 1,
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                       "width": intr.width, "height": intr.height},
        "t_near": dataset.t_near,
        "t_far": dataset.t_far,
        "class_count": dataset.class_count,
        "frames": frames,
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_dataset(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DatasetError(f"missing manifest {path}")
    with open(path) as f:
        manifest = json.load(f)
    try:
        mi = manifest["intrinsics"]
        intr = CameraIntrinsics(fx=mi["fx"], fy=mi["fy"], cx=mi["cx"], cy=mi["cy"],
                                width=int(mi["width"]), height=int(mi["height"]))
        class_count = int(manifest["class_count"])
        t_near = float(manifest["t_near"])
        t_far = float(manifest["t_far"])
        frame_entries = manifest["frames"]
    except (KeyError, TypeError) as e:
        raise DatasetError(f"malformed manifest {path}: {e}") from e
    frames = []
    for i, entry in enumerate(frame_entries):
        pose = np.asarray(entry["camera_to_world"], dtype=np.float64)
        if pose.size != 16:
            raise DatasetError(f"frame {i}: camera_to_world needs 16 numbers")
        pose = validate_pose(pose.reshape(4, 4), tol=1e-6)
        rgb_path = os.path.join(directory, entry["rgb"])
        label_path = os.path.join(directory, entry["label"])
        for p in (rgb_path, label_path):
            if not os.path.exists(p):
                raise DatasetError(f"frame {i}: missing image file {p}")
        rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.uint8)
        labels = np.asarray(Image.open(label_path), dtype=np.uint8)
        if rgb.shape[:2] != (intr.height, intr.width):
            raise DatasetError(f"frame {i}: rgb is {rgb.shape[:2]}, expected "
                               f"{(intr.height, intr.width)}")
        if labels.shape != (intr.height, intr.width):
            raise DatasetError(f"frame {i}: label map is {labels.shape}, expected "
                               f"{(intr.height, intr.width)}")
        bad = (labels >= class_count) & (labels != UNLABELED)
        if bad.any():
            value = int(labels[bad][0])
            raise DatasetError(f"frame {i}: label value {value} >= class_count {class_count}")
        frames.append((pose, rgb, labels))
    return SceneDataset(intrinsics=intr, frames=frames, class_count=class_count,
                        t_near=t_near, t_far=t_far)
