"""Pinhole camera model, ray generation and along-ray sampling.

Conventions: right-handed camera frame looking down -z, pixel centers at
+0.5, rows growing downward.  The global ray shuffle is keyed by
(seed, epoch) so every epoch gets a fresh permutation and any iteration's
batch can be reconstructed without replaying the stream.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .rng import STREAM_SHUFFLE, stream_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


def validate_pose(c2w, tol=1e-6):
    """Require a rigid camera-to-world transform (orthonormal, det +1)."""
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape != (4, 4):
        raise ValueError("pose must be a 4x4 matrix")
    r = c2w[:3, :3]
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        raise ValueError("pose rotation block is not orthonormal")
    if np.linalg.det(r) < 0:
        raise ValueError("pose rotation has negative determinant")
    return c2w


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not 0 <= self.t_near < self.t_far:
            raise ValueError("require 0 <= t_near < t_far")


def pixel_directions(intr, c2w):
    """World-space unit directions for every pixel, shape (H, W, 3)."""
    c2w = np.asarray(c2w, dtype=np.float64)
    cols = np.arange(intr.width) + 0.5
    rows = np.arange(intr.height) + 0.5
    x = (cols[None, :] - intr.cx) / intr.fx
    y = -(rows[:, None] - intr.cy) / intr.fy
    d = np.empty((intr.height, intr.width, 3))
    d[..., 0] = x
    d[..., 1] = y
    d[..., 2] = -1.0
    d = d @ c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d


def generate_ray(intr, pose, pixel, t_near, t_far):
    """Ray through one pixel given as (row, col)."""
    row, col = pixel
    if not (0 <= row < intr.height and 0 <= col < intr.width):
        raise ValueError(f"pixel {pixel} outside {intr.height}x{intr.width} image")
    c2w = validate_pose(pose)
    d_cam = np.array([(col + 0.5 - intr.cx) / intr.fx,
                      -(row + 0.5 - intr.cy) / intr.fy,
                      -1.0])
    d = c2w[:3, :3] @ d_cam
    d /= np.linalg.norm(d)
    return Ray(origin=c2w[:3, 3].copy(), direction=d, t_near=t_near, t_far=t_far)


def stratified_batch(t_near, t_far, n_samples, n_rays, rng, dtype=np.float32):
    """One uniform draw per equal-width bin of [t_near, t_far), per ray."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    width = (t_far - t_near) / n_samples
    u = rng.random((n_rays, n_samples))
    t = t_near + (np.arange(n_samples) + u) * width
    return t.astype(dtype)


def stratified_samples(ray, n_samples, rng):
    """Per-ray stratified quadrature points and their deltas."""
    t = stratified_batch(ray.t_near, ray.t_far, n_samples, 1, rng, dtype=np.float64)[0]
    return t, deltas_for(t[None, :], ray.t_far)[0]


def deltas_for(t, t_far):
    """delta_k = t_{k+1} - t_k; the last delta closes the interval at t_far."""
    d = np.empty_like(t)
    d[:, :-1] = t[:, 1:] - t[:, :-1]
    d[:, -1] = t_far - t[:, -1]
    return d


def _strictly_increasing(t):
    # merged coarse+fine draws can collide after float rounding; nudge upward
    for _ in range(4):
        bad = t[:, 1:] <= t[:, :-1]
        if not bad.any():
            return t
        t[:, 1:][bad] = np.nextafter(t[:, 1:][bad], np.inf)
    return t


def hierarchical_resample(t_coarse, weights, n_fine, rng, t_near, t_far):
    """Importance-resample n_fine points and merge them with the coarse ones.

    The piecewise-constant proposal puts the coarse weight of sample k on the
    span [t_k, t_{k+1}) (the last span ends at t_far).  Rays whose weights are
    all zero (or non-finite) fall back to uniform draws over [t_near, t_far].
    """
    t_coarse = np.asarray(t_coarse)
    weights = np.asarray(weights)
    n_rays, n_bins = weights.shape
    if np.any(weights < 0):
        raise ValueError("coarse weights must be nonnegative")
    edges = np.concatenate(
        [t_coarse, np.full((n_rays, 1), t_far, dtype=t_coarse.dtype)], axis=1)
    u = rng.random((n_rays, n_fine)).astype(t_coarse.dtype)

    row_sum = weights.sum(axis=1)
    degenerate = ~np.isfinite(row_sum) | (row_sum <= 0)
    if degenerate.any():
        log.warning("hierarchical_resample: %d/%d rays degenerate, uniform fallback",
                    int(degenerate.sum()), n_rays)
        weights = np.where(degenerate[:, None], 1.0, weights).astype(weights.dtype)

    t_fine = kernels.sample_pdf(edges, weights, u)
    if degenerate.any():
        t_fine = np.where(degenerate[:, None], t_near + u * (t_far - t_near), t_fine)
    merged = np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)
    return _strictly_increasing(merged)


def epoch_permutation(n_records, seed, epoch, row_major=False):
    """Training order of record indices for one epoch."""
    if row_major:
        return np.arange(n_records)
    return stream_rng(seed, STREAM_SHUFFLE, epoch).permutation(n_records)


def shuffle_rays(dataset, seed, epoch=0, row_major=False):
    """Yield (ray, rgb, label) supervision records in training order.

    Records run over all pixels of all frames; `row_major` keeps the
    (frame, row, col) lexicographic order instead of shuffling.
    """
    frames = dataset.frames
    if not frames:
        raise ValueError("dataset has no frames")
    h, w = dataset.intrinsics.height, dataset.intrinsics.width
    order = epoch_permutation(len(frames) * h * w, seed, epoch, row_major)
    for idx in order:
        f, rest = divmod(int(idx), h * w)
        row, col = divmod(rest, w)
        pose, rgb, label = frames[f]
        ray = generate_ray(dataset.intrinsics, pose, (row, col), dataset.t_near, dataset.t_far)
        yield ray, rgb[row, col], label[row, col]
