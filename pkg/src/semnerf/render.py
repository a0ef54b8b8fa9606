"""Quadrature compositing of color, semantics and depth, plus edit-mask
rendering (keep-only / mask-out of one semantic class) and full-image
rendering.

Editing zeroes density at masked sample points *before* transmittance is
computed, so occluded content behind a masked object becomes visible; the
keep-only mode additionally gates color work on the ray-level semantic
argmax, which suppresses stray point labels and skips color evaluation for
rays that will render as the sentinel anyway.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .field import (encode_directions, encode_positions, forward_color,
                    forward_geometry, softmax_probs)
from .rays import deltas_for, hierarchical_resample, pixel_directions, stratified_batch
from .rng import STREAM_RENDER, stream_rng

EDIT_MODES = ("full_scene", "unique_display", "mask_out")

DEPTH_SENTINEL = np.inf
_DEPTH_EPS = 1e-8
_OPACITY_CUTOFF = 0.01


@dataclass
class RenderSettings:
    edit_mode: str = "full_scene"
    target_class: int = 0
    background_class: int = 0
    white_background: bool = True
    sentinel_color: tuple = (1.0, 1.0, 1.0)

    def validate(self, class_count):
        if self.edit_mode not in EDIT_MODES:
            raise ValueError(f"edit_mode must be one of {EDIT_MODES}")
        if self.edit_mode != "full_scene":
            if self.target_class == self.background_class:
                raise ValueError("target and background class must differ when editing")
            if not (0 <= self.target_class < class_count):
                raise ValueError(f"target_class {self.target_class} out of range")
            if not (0 <= self.background_class < class_count):
                raise ValueError(f"background_class {self.background_class} out of range")


@dataclass
class SamplingConfig:
    n_coarse: int = 32
    n_fine: int = 32

    def __post_init__(self):
        if self.n_coarse < 2 or self.n_fine < 1:
            raise ValueError("need n_coarse >= 2 and n_fine >= 1")


def transmittance(sigmas, deltas):
    """Per-sample transmittance exp(-sum of sigma*delta before each sample)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigmas.shape != deltas.shape:
        raise ValueError("sigma/delta length mismatch")
    if np.any(sigmas < 0):
        raise ValueError("negative density")
    if np.any(deltas <= 0):
        raise ValueError("deltas must be positive")
    _, trans = kernels.render_weights(sigmas[None, :], deltas[None, :])
    return trans[0, :-1]


def _check_mask(mask, shape):
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise ValueError("mask length mismatch")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    return mask


def masked_weights(sigma, delta, mask=None):
    """Compositing weights with densities zeroed at masked-out samples."""
    sigma = np.atleast_2d(sigma)
    delta = np.atleast_2d(delta)
    if sigma.shape != delta.shape:
        raise ValueError("sigma/delta shape mismatch")
    mask = _check_mask(mask, sigma.shape)
    if mask is not None:
        sigma = sigma * mask
    return kernels.render_weights(sigma, delta)


def composite_color(sigma, delta, colors, mask=None, white_background=False):
    """Expected ray color sum_k w_k c_k; optional white-background fill."""
    colors = np.atleast_2d(np.asarray(colors))
    if colors.ndim == 2:
        colors = colors[None, ...]
    weights, _ = masked_weights(sigma, delta, mask)
    if colors.shape[:2] != weights.shape:
        raise ValueError("color array shape mismatch")
    out = np.einsum("bk,bkc->bc", weights, colors)
    if white_background:
        out = out + (1.0 - weights.sum(axis=1, keepdims=True))
    return out


def composite_semantics(sigma, delta, logits, mask=None):
    """Composite logits, then softmax: returns (probs, label) per ray.

    Ties in the argmax resolve to the lowest class index.
    """
    logits = np.asarray(logits)
    if logits.ndim == 2:
        logits = logits[None, ...]
    weights, _ = masked_weights(sigma, delta, mask)
    if logits.shape[:2] != weights.shape:
        raise ValueError("logits array shape mismatch")
    z = np.einsum("bk,bkl->bl", weights, logits)
    probs = softmax_probs(z)
    return probs, np.argmax(z, axis=1)


def edit_mask(point_labels, mode, target_class, background_class):
    """Per-sample keep mask from per-sample argmax class labels."""
    labels = np.asarray(point_labels)
    if mode == "full_scene":
        return np.ones_like(labels, dtype=np.uint8)
    if mode == "unique_display":
        keep = (labels == target_class) | (labels == background_class)
    elif mode == "mask_out":
        keep = labels != target_class
    else:
        raise ValueError(f"unknown edit mode {mode!r}")
    return keep.astype(np.uint8)


def expected_depth(weights, t):
    """Opacity-normalized expected ray distance; inf where the ray is empty."""
    weights = np.atleast_2d(weights)
    t = np.atleast_2d(t)
    opacity = weights.sum(axis=1)
    depth = (weights * t).sum(axis=1) / np.maximum(opacity, _DEPTH_EPS)
    return np.where(opacity < _OPACITY_CUTOFF, DEPTH_SENTINEL, depth)


def render_unique_display(sigma, delta, point_logits, point_colors,
                          target_class, background_class,
                          sentinel_color=(1.0, 1.0, 1.0), white_background=False):
    """Keep-only rendering of one class with ray-level noise suppression.

    Density survives only at samples whose argmax class is the target or the
    background; a ray renders color only when its composited argmax equals
    the target, otherwise it gets the sentinel color.  Returns
    (colors (B, 3), labels (B,), selected (B,)).
    """
    sigma = np.atleast_2d(sigma)
    delta = np.atleast_2d(delta)
    point_logits = np.asarray(point_logits)
    if point_logits.ndim == 2:
        point_logits = point_logits[None, ...]
    point_colors = np.asarray(point_colors)
    if point_colors.ndim == 2:
        point_colors = point_colors[None, ...]
    point_labels = np.argmax(point_logits, axis=2)
    keep = edit_mask(point_labels, "unique_display", target_class, background_class)
    _, labels = composite_semantics(sigma, delta, point_logits, mask=keep)
    colors = np.tile(np.asarray(sentinel_color, dtype=point_colors.dtype), (sigma.shape[0], 1))
    selected = labels == target_class
    if selected.any():
        colors[selected] = composite_color(
            sigma[selected], delta[selected], point_colors[selected],
            mask=keep[selected], white_background=white_background)
    return colors, labels, selected


@dataclass
class RenderedImage:
    rgb: np.ndarray       # (H, W, 3) float in [0, 1]
    label: np.ndarray     # (H, W) class ids
    depth: np.ndarray     # (H, W) float, inf where empty
    opacity: np.ndarray   # (H, W) float in [0, 1]


def render_rays(params, origins, dirs, settings, sampling, t_near, t_far, rng):
    """Full two-pass pipeline for a batch of rays; returns per-ray outputs."""
    n = dirs.shape[0]
    arch = params.arch
    dtype = params.dtype
    o = np.ascontiguousarray(origins, dtype=dtype)
    d = np.ascontiguousarray(dirs, dtype=dtype)
    d_enc = encode_directions(d, arch)
    editing = settings.edit_mode != "full_scene"

    def geometry(t):
        k = t.shape[1]
        pos = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
        geom = forward_geometry(params, encode_positions(pos, arch))
        sigma = geom.sigma.reshape(n, k)
        if editing:
            pt_labels = np.argmax(geom.logits, axis=1).reshape(n, k)
            keep = edit_mask(pt_labels, settings.edit_mode,
                             settings.target_class, settings.background_class)
            sigma = sigma * keep
        return geom, sigma

    t_c = stratified_batch(t_near, t_far, sampling.n_coarse, n, rng, dtype=dtype)
    _, sigma_c = geometry(t_c)
    w_c, _ = kernels.render_weights(sigma_c, deltas_for(t_c, t_far))
    t_m = hierarchical_resample(t_c, w_c, sampling.n_fine, rng, t_near, t_far)

    geom_f, sigma_f = geometry(t_m)
    delta_f = deltas_for(t_m, t_far)
    w_f, _ = kernels.render_weights(sigma_f, delta_f)
    k_m = t_m.shape[1]
    z = np.einsum("bk,bkl->bl", w_f, geom_f.logits.reshape(n, k_m, -1))
    labels = np.argmax(z, axis=1)
    opacity = w_f.sum(axis=1)
    depth = expected_depth(w_f, t_m)

    if settings.edit_mode == "unique_display":
        select = labels == settings.target_class
    else:
        select = np.ones(n, dtype=bool)
    rgb = np.tile(np.asarray(settings.sentinel_color, dtype=dtype), (n, 1))
    if select.any():
        # color head only where a color will actually be shown
        idx = np.nonzero(select)[0]
        flat = (idx[:, None] * k_m + np.arange(k_m)[None, :]).ravel()
        geom_sub = _GeometrySlice(geom_f, flat)
        color = forward_color(params, geom_sub, np.repeat(d_enc[idx], k_m, axis=0))
        c = color.rgb.reshape(idx.size, k_m, 3)
        rgb[idx] = np.einsum("bk,bkc->bc", w_f[idx], c)
        if settings.white_background:
            rgb[idx] += (1.0 - opacity[idx, None])
    return rgb, labels, depth, opacity


class _GeometrySlice:
    """View of a geometry pass restricted to a flat subset of samples."""

    __slots__ = ("hidden",)

    def __init__(self, geom, flat_idx):
        self.hidden = [geom.hidden[-1][flat_idx]]


def render_image(params, intr, pose, settings, sampling, t_near, t_far,
                 seed=0, chunk_size=4096):
    """Render a full frame; deterministic for a fixed seed."""
    settings.validate(params.arch.class_count)
    dirs = pixel_directions(intr, pose).reshape(-1, 3)
    origin = np.asarray(pose, dtype=np.float64)[:3, 3]
    h, w = intr.height, intr.width
    rgb = np.empty((h * w, 3), dtype=np.float32)
    label = np.empty(h * w, dtype=np.int64)
    depth = np.empty(h * w, dtype=np.float32)
    opacity = np.empty(h * w, dtype=np.float32)
    for start in range(0, h * w, chunk_size):
        sl = slice(start, min(start + chunk_size, h * w))
        rng = stream_rng(seed, STREAM_RENDER, start)
        o = np.broadcast_to(origin, (sl.stop - sl.start, 3))
        r, l, dep, op = render_rays(params, o, dirs[sl], settings, sampling,
                                    t_near, t_far, rng)
        rgb[sl] = r
        label[sl] = l
        depth[sl] = dep
        opacity[sl] = op
    return RenderedImage(rgb=rgb.reshape(h, w, 3),
                         label=label.reshape(h, w),
                         depth=depth.reshape(h, w),
                         opacity=opacity.reshape(h, w))
