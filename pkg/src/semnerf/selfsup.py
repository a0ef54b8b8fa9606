"""Self-supervised label correction.

Periodically during training, target-class keep-only renders of the train
views are cleaned with morphological opening then closing and k-means++
clustering of the surviving foreground pixels; clusters below a size floor
are dropped as noise.  The cleaned maps are written back as semantic
supervision, which fills in regions (typically occlusion shadows) that had
no human labels.
"""

import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .render import RenderSettings, render_image
from .rng import STREAM_CLUSTER, stream_rng
from .scene import UNLABELED


@dataclass
class SelfSupSchedule:
    warmup_iterations: int = 2000
    interval: int = 500
    structuring_element_radius: int = 1
    k: int = 1
    min_cluster_fraction: float = 0.02
    target_class: int = 1
    background_class: int = 0
    trust_human_labels: bool = False
    debug_dir: str = None

    def __post_init__(self):
        if self.warmup_iterations < 0 or self.interval < 1:
            raise ValueError("warmup must be >= 0 and interval >= 1")
        if self.structuring_element_radius < 1 or self.k < 1:
            raise ValueError("radius and k must be >= 1")
        if not 0 <= self.min_cluster_fraction < 1:
            raise ValueError("min_cluster_fraction must be in [0, 1)")

    def due(self, iteration):
        return (iteration >= self.warmup_iterations
                and (iteration - self.warmup_iterations) % self.interval == 0)


def disk_offsets(radius):
    """Structuring element {(dy, dx): dy^2 + dx^2 <= r^2} (3x3 square at r=1)."""
    r = int(radius)
    if r == 1:
        span = [-1, 0, 1]
        return np.array([(dy, dx) for dy in span for dx in span], dtype=np.int64)
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= r * r]
    return np.array(offs, dtype=np.int64)


def _as_u8(mask):
    return np.ascontiguousarray(np.asarray(mask) != 0, dtype=np.uint8).view(np.uint8)


def morph_erode(mask, radius=1):
    return kernels.binary_erode(_as_u8(mask), disk_offsets(radius)).astype(bool)


def morph_dilate(mask, radius=1):
    return kernels.binary_dilate(_as_u8(mask), disk_offsets(radius)).astype(bool)


def morph_open(mask, radius=1):
    return morph_dilate(morph_erode(mask, radius), radius)


def morph_close(mask, radius=1):
    return morph_erode(morph_dilate(mask, radius), radius)


class ClusterResult(NamedTuple):
    assignments: np.ndarray
    centers: np.ndarray
    distortions: list


def kmeanspp_cluster(points, k, rng, max_iter=100):
    """k-means++ seeding followed by Lloyd iterations to a fixed point.

    Empty clusters are re-seeded at the point farthest from its own center.
    Returns assignments, centers and the per-iteration distortion trace.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n points, got k={k}, n={n}")
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = points[rng.integers(n)]
        else:
            centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))

    assign = np.full(n, -1, dtype=np.int64)
    distortions = []
    for _ in range(max_iter):
        dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dist, axis=1)
        distortions.append(float(dist[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            sel = assign == c
            if sel.any():
                centers[c] = points[sel].mean(axis=0)
            else:
                centers[c] = points[np.argmax(dist[np.arange(n), assign])]
    return ClusterResult(assign, centers, distortions)


def correct_semantic_map(labels_img, target_class, background_class, schedule, rng):
    """Clean one rendered class-id image; returns (corrected, had_foreground).

    Binarize target vs rest, open, close, cluster the surviving foreground
    coordinates, drop clusters below min_cluster_fraction of the foreground,
    and reassemble with the surviving foreground as the target class and
    dropped/removed target pixels as background.
    """
    labels_img = np.asarray(labels_img)
    fg = labels_img == target_class
    if not fg.any():
        return labels_img.copy(), False
    r = schedule.structuring_element_radius
    cleaned = morph_close(morph_open(fg, r), r)
    out = labels_img.copy()
    out[fg] = background_class
    if cleaned.any():
        coords = np.argwhere(cleaned).astype(np.float64)
        k = min(schedule.k, coords.shape[0])
        result = kmeanspp_cluster(coords, k, rng)
        counts = np.bincount(result.assignments, minlength=k)
        keep = counts >= schedule.min_cluster_fraction * coords.shape[0]
        survivors = coords[keep[result.assignments]].astype(np.int64)
        out[survivors[:, 0], survivors[:, 1]] = target_class
    return out, True


def run_selfsup_cycle(params, dataset, train_indices, labels_flat, schedule,
                      sampling, seed, cycle_index):
    """Render, correct and re-label every train frame; returns (labels, changed).

    labels_flat is the trainer's supervision array over train frames in
    (frame, row, col) order; only target-class decisions are written back.
    With trust_human_labels, pixels carrying a human label other than the
    background keep it.
    """
    intr = dataset.intrinsics
    h, w = intr.height, intr.width
    settings = RenderSettings(edit_mode="unique_display",
                              target_class=schedule.target_class,
                              background_class=schedule.background_class)
    new_labels = labels_flat.copy()
    changed = 0
    for slot, frame_idx in enumerate(train_indices):
        pose, _, _ = dataset.frames[frame_idx]
        img = render_image(params, intr, pose, settings, sampling,
                           dataset.t_near, dataset.t_far, seed=seed)
        rng = stream_rng(seed, STREAM_CLUSTER, cycle_index, slot)
        corrected, _ = correct_semantic_map(img.label, schedule.target_class,
                                            schedule.background_class, schedule, rng)
        if schedule.debug_dir:
            from PIL import Image
            os.makedirs(schedule.debug_dir, exist_ok=True)
            Image.fromarray(corrected.astype(np.uint8), mode="L").save(
                os.path.join(schedule.debug_dir,
                             f"cycle_{cycle_index:03d}_frame_{frame_idx:03d}.png"))
        sl = slice(slot * h * w, (slot + 1) * h * w)
        current = new_labels[sl].reshape(h, w)
        write = corrected == schedule.target_class
        if schedule.trust_human_labels:
            human_ok = (current == UNLABELED) | (current == schedule.background_class) \
                | (current == schedule.target_class)
            write &= human_ok
        changed += int(np.count_nonzero(current[write] != schedule.target_class))
        current[write] = schedule.target_class
        new_labels[sl] = current.reshape(-1)
    return new_labels, changed
