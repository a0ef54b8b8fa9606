"""Training: losses wired to exact gradients, Adam, the semantic-first
warmup, target-focused fast training (positive/negative ray split with an
adaptive high-contrast reset color and sparse negative sampling), weak-label
subsampling, and the self-supervision hook.

An iteration takes a fixed-size window from the shuffled stream of all
train-frame pixels.  Fast training filters that window down to its kept
supervision set (labeled rays; negatives thinned to the sampling rate), so
an iteration touches the same region of the stream in every mode but does
strictly less work per iteration in fast mode.
"""

import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .field import (NetworkArchitecture, backward_batch, forward_color,
                    forward_geometry, encode_directions, encode_positions,
                    init_params, save_checkpoint, zero_grads)
from .losses import focal_loss_from_logits, photometric_loss_grad, total_loss
from .metrics import psnr, ssim
from .rays import deltas_for, epoch_permutation, hierarchical_resample, \
    pixel_directions, stratified_batch
from .render import RenderSettings, SamplingConfig, render_image
from .rng import STREAM_LABELS, STREAM_NEGATIVES, STREAM_SAMPLES, stream_rng
from .scene import UNLABELED, area_ratio_of
from .selfsup import SelfSupSchedule, run_selfsup_cycle

SAMPLE_FULL = 0
SAMPLE_POSITIVE = 1
SAMPLE_NEGATIVE = 2

TRAIN_MODES = ("full", "fast", "semantic_only")
RAY_ORDERS = ("shuffled", "row_major")

CHECKPOINT_NAME = "checkpoint.bin"
STATE_NAME = "trainer_state.npz"
METRICS_NAME = "metrics.tsv"
METRICS_HEADER = "iteration\twall_seconds\tloss_p\tloss_s\tbatch_psnr\ttest_ssim"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FastTrainConfig:
    target_classes: tuple
    negative_sampling_rate: float = 0.15
    reset_color: object = "adaptive"   # "adaptive" or an (r, g, b) in 0..255

    def __post_init__(self):
        self.target_classes = tuple(int(c) for c in self.target_classes)
        if not self.target_classes:
            raise ValueError("target_classes must be non-empty")
        if not 0 < self.negative_sampling_rate <= 1:
            raise ValueError("negative_sampling_rate must be in (0, 1]")
        if self.reset_color != "adaptive":
            rc = tuple(float(v) for v in self.reset_color)
            if len(rc) != 3 or any(not 0 <= v <= 255 for v in rc):
                raise ValueError("reset_color must be 'adaptive' or an RGB triple in 0..255")
            self.reset_color = rc


@dataclass
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 512
    lambda_semantic: float = 0.04
    gamma: float = 1.0
    semantic_only_iterations: int = 2000
    learning_rate: float = 5e-4
    lr_final: float = 5e-5
    seed: int = 0
    precision: str = "float32"   # float32 | float64
    mode: str = "full"
    ray_order: str = "shuffled"
    label_sampling_rate: float = 1.0
    white_background: bool = True
    log_interval: int = 100
    eval_interval: int = 0       # 0 disables periodic held-out SSIM
    hold_every: int = 8
    fast: FastTrainConfig = None
    selfsup: SelfSupSchedule = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lambda_semantic < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be >= 0")
        if not 0 < self.label_sampling_rate <= 1:
            raise ValueError("label_sampling_rate must be in (0, 1]")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")
        if self.ray_order not in RAY_ORDERS:
            raise ValueError(f"ray_order must be one of {RAY_ORDERS}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.mode == "fast" and self.fast is None:
            raise ValueError("fast mode requires a fast training config")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n, dtype):
        return cls(m=np.zeros(n, dtype=dtype), v=np.zeros(n, dtype=dtype))


def adam_step(flat, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected adaptive-moment update, in place."""
    if flat.shape != grad.shape or flat.shape != state.m.shape:
        raise ValueError("parameter/gradient/state shape mismatch")
    state.t += 1
    state.m += (1.0 - beta1) * (grad - state.m)
    state.v += (1.0 - beta2) * (grad * grad - state.v)
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    flat -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(flat.dtype)


def area_ratio(dataset, target_classes):
    """Fraction of all dataset pixels carrying a target-class label."""
    if not dataset.frames:
        raise ValueError("empty dataset")
    return area_ratio_of(dataset, target_classes)


def mean_target_color(dataset, target_classes):
    """Per-channel mean over target-labeled pixels, on the 0..255 scale."""
    sums = np.zeros(3)
    count = 0
    for _, rgb, labels in dataset.frames:
        sel = np.isin(labels, list(target_classes))
        sums += rgb[sel].reshape(-1, 3).sum(axis=0)
        count += int(sel.sum())
    if count == 0:
        raise ValueError("no target-class pixels in dataset")
    return sums / count


def color_difference(c1, c2):
    """Red-mean weighted RGB distance on 0..255 components."""
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if np.any(c1 < 0) or np.any(c1 > 255) or np.any(c2 < 0) or np.any(c2 > 255):
        raise ValueError("components must be in [0, 255]")
    tau = (c1[..., 0] + c2[..., 0]) / 2.0
    d = c1 - c2
    return np.sqrt((2.0 + tau / 256.0) * d[..., 0] ** 2
                   + 4.0 * d[..., 1] ** 2
                   + (2.0 + (255.0 - tau) / 256.0) * d[..., 2] ** 2)


def _reset_color_candidates():
    # lexicographic (R, G, B) order; the 8 cube corners are grid points
    axis = np.linspace(0.0, 255.0, 17)
    r, g, b = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([r.ravel(), g.ravel(), b.ravel()], axis=1)


def find_reset_color(mean_color):
    """Candidate color maximizing the contrast score against mean_color.

    The search set is a 17^3 uniform RGB grid plus (implicitly, as grid
    points) the 8 cube corners; ties resolve to the lexicographically
    smallest (R, G, B).
    """
    mean_color = np.asarray(mean_color, dtype=np.float64)
    candidates = _reset_color_candidates()
    scores = color_difference(np.broadcast_to(mean_color, candidates.shape), candidates)
    return candidates[int(np.argmax(scores))]


def subsample_labels(labels, rate, rng):
    """Keep each labeled entry with probability `rate`, else mark unlabeled."""
    if not 0 < rate <= 1:
        raise ValueError("rate must be in (0, 1]")
    labels = np.asarray(labels)
    out = labels.copy()
    if rate < 1.0:
        drop = (labels != UNLABELED) & (rng.random(labels.shape) >= rate)
        out[drop] = UNLABELED
    return out


def subsample_dataset_labels(dataset, rate, seed):
    rng = stream_rng(seed, STREAM_LABELS)
    frames = [(pose, rgb, subsample_labels(labels, rate, rng))
              for pose, rgb, labels in dataset.frames]
    return replace(dataset, frames=frames)


def fast_training_plan(labels, colors, fast, rng):
    """Keep mask, recolored supervision and sample classes for fast training.

    labels is (N,), colors (N, 3) in [0, 1].  Unlabeled rays are dropped;
    negatives keep their label, get the reset color, and survive
    independently with the configured sampling rate.
    """
    labels = np.asarray(labels)
    labeled = labels != UNLABELED
    positive = labeled & np.isin(labels, list(fast.target_classes))
    if not positive.any():
        raise ValueError("fast training needs at least one positive ray")
    negative = labeled & ~positive
    if fast.reset_color == "adaptive":
        mean_rgb = colors[positive].mean(axis=0) * 255.0
        reset = find_reset_color(mean_rgb)
    else:
        reset = np.asarray(fast.reset_color, dtype=np.float64)
    keep = positive | (negative & (rng.random(labels.shape) < fast.negative_sampling_rate))
    new_colors = colors.copy()
    new_colors[negative] = (reset / 255.0).astype(colors.dtype)
    sample_class = np.full(labels.shape, SAMPLE_NEGATIVE, dtype=np.uint8)
    sample_class[positive] = SAMPLE_POSITIVE
    return keep, new_colors, sample_class, reset


@dataclass
class RaySupervisionSet:
    frame_index: np.ndarray
    pixel_index: np.ndarray
    gt_color: np.ndarray     # float in [0, 1], negatives recolored
    gt_label: np.ndarray
    sample_class: np.ndarray
    reset_color: np.ndarray  # 0..255


def prepare_fast_training(dataset, fast, rng):
    """Record-level fast-training supervision over all frames of `dataset`."""
    labels = np.concatenate([f[2].reshape(-1) for f in dataset.frames])
    colors = np.concatenate([f[1].reshape(-1, 3) for f in dataset.frames]).astype(np.float32) / 255.0
    keep, new_colors, sample_class, reset = fast_training_plan(labels, colors, fast, rng)
    h, w = dataset.intrinsics.height, dataset.intrinsics.width
    idx = np.nonzero(keep)[0]
    return RaySupervisionSet(frame_index=idx // (h * w),
                             pixel_index=idx % (h * w),
                             gt_color=new_colors[idx],
                             gt_label=labels[idx],
                             sample_class=sample_class[idx],
                             reset_color=reset)


@dataclass
class LogRow:
    iteration: int
    wall_seconds: float
    loss_p: float
    loss_s: float
    batch_psnr: float
    test_ssim: float = None

    def format(self):
        t = "" if self.test_ssim is None else f"{self.test_ssim:.6g}"
        return (f"{self.iteration}\t{self.wall_seconds:.3f}\t{self.loss_p:.6g}"
                f"\t{self.loss_s:.6g}\t{self.batch_psnr:.6g}\t{t}")


class Trainer:
    """Single-scene trainer; deterministic given the config seed."""

    def __init__(self, dataset, config, arch=None, sampling=None, run_dir=None):
        self.dataset = dataset
        self.config = config
        self.sampling = sampling or SamplingConfig()
        self.arch = arch or NetworkArchitecture(class_count=dataset.class_count)
        if self.arch.class_count < dataset.class_count:
            raise ValueError("network has fewer classes than the dataset")
        self.dtype = np.float32 if config.precision == "float32" else np.float64
        self.run_dir = run_dir
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
        self.train_indices, self.test_indices = dataset.split(config.hold_every)
        self._build_supervision()
        self.params = init_params(self.arch, config.seed, self.dtype)
        self.grads = zero_grads(self.arch, self.dtype)
        self.adam = AdamState.zeros(self.arch.parameter_count, self.dtype)
        self.iteration = 0
        self.rows = []
        self._perms = {}
        self._wall_offset = 0.0
        self._t0 = time.perf_counter()

    # -- data ---------------------------------------------------------------

    def _build_supervision(self):
        cfg = self.config
        ds = self.dataset
        intr = ds.intrinsics
        origins, dirs, colors, labels = [], [], [], []
        for fi in self.train_indices:
            pose, rgb, lab = ds.frames[fi]
            d = pixel_directions(intr, pose).reshape(-1, 3)
            dirs.append(d)
            origins.append(np.broadcast_to(pose[:3, 3], d.shape))
            colors.append(rgb.reshape(-1, 3).astype(np.float32) / 255.0)
            labels.append(lab.reshape(-1))
        self.rays_o = np.concatenate(origins).astype(self.dtype)
        self.rays_d = np.concatenate(dirs).astype(self.dtype)
        self.d_enc = encode_directions(self.rays_d, self.arch)
        self.colors = np.concatenate(colors).astype(self.dtype)
        labels = np.concatenate(labels)
        if cfg.label_sampling_rate < 1.0:
            labels = subsample_labels(labels, cfg.label_sampling_rate,
                                      stream_rng(cfg.seed, STREAM_LABELS))
        self.labels = labels
        self.n_records = labels.shape[0]
        self.keep_mask = None
        self.sample_class = np.full(self.n_records, SAMPLE_FULL, dtype=np.uint8)
        self.reset_color = None
        if cfg.mode == "fast":
            keep, new_colors, sample_class, reset = fast_training_plan(
                self.labels, self.colors, cfg.fast,
                stream_rng(cfg.seed, STREAM_NEGATIVES))
            self.keep_mask = keep
            self.colors = new_colors
            self.sample_class = sample_class
            self.reset_color = reset

    def _perm(self, epoch):
        if epoch not in self._perms:
            self._perms = {k: v for k, v in self._perms.items() if k >= epoch - 1}
            self._perms[epoch] = epoch_permutation(
                self.n_records, self.config.seed, epoch,
                row_major=self.config.ray_order == "row_major")
        return self._perms[epoch]

    def batch_indices(self, iteration):
        """Window of the concatenated per-epoch permutation stream."""
        b = self.config.batch_size
        epoch, off = divmod(iteration * b, self.n_records)
        p = self._perm(epoch)
        if off + b <= self.n_records:
            idx = p[off:off + b]
        else:
            idx = np.concatenate([p[off:], self._perm(epoch + 1)[:off + b - self.n_records]])
        if self.keep_mask is not None:
            idx = idx[self.keep_mask[idx]]
        return idx

    # -- optimization -------------------------------------------------------

    def learning_rate(self, iteration):
        cfg = self.config
        if cfg.iterations <= 1:
            return cfg.learning_rate
        frac = iteration / (cfg.iterations - 1)
        return cfg.learning_rate * (cfg.lr_final / cfg.learning_rate) ** frac

    def _forward(self, origins, dirs, d_enc, t, need_color):
        n, k = t.shape
        pos = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
        geom = forward_geometry(self.params, encode_positions(pos, self.arch))
        color = None
        if need_color:
            color = forward_color(self.params, geom, np.repeat(d_enc, k, axis=0))
        return geom, color

    def _composite(self, geom, color, t, t_far, n):
        k = t.shape[1]
        delta = deltas_for(t, t_far)
        sigma = geom.sigma.reshape(n, k)
        weights, trans = kernels.render_weights(sigma, delta)
        z = np.einsum("bk,bkl->bl", weights, geom.logits.reshape(n, k, -1))
        rgb = None
        if color is not None:
            rgb = np.einsum("bk,bkc->bc", weights, color.rgb.reshape(n, k, 3))
            if self.config.white_background:
                rgb = rgb + (1.0 - weights.sum(axis=1, keepdims=True))
        return delta, weights, trans, z, rgb

    def _backward_pass(self, geom, color, weights, trans, delta, d_color, d_logits, n):
        k = weights.shape[1]
        d_w = np.zeros_like(weights)
        if d_logits is not None:
            d_w += np.einsum("bl,bkl->bk", d_logits, geom.logits.reshape(n, k, -1))
        d_rgb_pts = None
        if d_color is not None:
            rgb_pts = color.rgb.reshape(n, k, 3)
            d_w += np.einsum("bc,bkc->bk", d_color, rgb_pts)
            if self.config.white_background:
                d_w -= d_color.sum(axis=1, keepdims=True)
            d_rgb_pts = (weights[..., None] * d_color[:, None, :]).reshape(-1, 3)
        d_logits_pts = None
        if d_logits is not None:
            d_logits_pts = (weights[..., None] * d_logits[:, None, :]).reshape(-1, geom.logits.shape[1])
        d_sigma = kernels.render_weights_backward(d_w, weights, trans, delta).reshape(-1)
        backward_batch(self.params, geom, color, d_sigma, d_rgb_pts, d_logits_pts, self.grads)

    def semantic_only_at(self, iteration):
        return (self.config.mode == "semantic_only"
                or iteration < self.config.semantic_only_iterations)

    def _step(self, iteration):
        cfg = self.config
        idx = self.batch_indices(iteration)
        if idx.size == 0:
            return 0.0, 0.0, np.nan
        sem_only = self.semantic_only_at(iteration)
        o = self.rays_o[idx]
        d = self.rays_d[idx]
        denc = self.d_enc[idx]
        gt_color = self.colors[idx]
        gt_label = self.labels[idx]
        n = idx.size
        t_far = self.dataset.t_far
        rng = stream_rng(cfg.seed, STREAM_SAMPLES, iteration)

        t_c = stratified_batch(self.dataset.t_near, t_far, self.sampling.n_coarse,
                               n, rng, self.dtype)
        geom_c, color_c = self._forward(o, d, denc, t_c, need_color=not sem_only)
        delta_c, w_c, trans_c, z_c, rgb_c = self._composite(geom_c, color_c, t_c, t_far, n)

        t_m = hierarchical_resample(t_c, w_c, self.sampling.n_fine, rng,
                                    self.dataset.t_near, t_far)
        geom_f, color_f = self._forward(o, d, denc, t_m, need_color=not sem_only)
        delta_f, w_f, trans_f, z_f, rgb_f = self._composite(geom_f, color_f, t_m, t_far, n)

        loss_p = 0.0
        d_cc = d_cf = None
        if not sem_only:
            loss_p, d_cc, d_cf = photometric_loss_grad(rgb_c, rgb_f, gt_color)
        ls_c, dz_c = focal_loss_from_logits(z_c, gt_label, cfg.gamma)
        ls_f, dz_f = focal_loss_from_logits(z_f, gt_label, cfg.gamma)
        loss_s = ls_c + ls_f
        loss = total_loss(loss_p, loss_s, cfg.lambda_semantic, semantic_only=sem_only)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"iteration {iteration}: non-finite loss (photometric={loss_p}, semantic={loss_s})")

        lam = cfg.lambda_semantic
        self.grads.flat[:] = 0
        self._backward_pass(geom_c, color_c, w_c, trans_c, delta_c, d_cc, lam * dz_c, n)
        self._backward_pass(geom_f, color_f, w_f, trans_f, delta_f, d_cf, lam * dz_f, n)
        adam_step(self.params.flat, self.grads.flat, self.adam, self.learning_rate(iteration))

        batch_psnr = np.nan
        if rgb_f is not None:
            batch_psnr = psnr(gt_color, np.clip(rgb_f, 0.0, 1.0), max_value=1.0)
        return loss_p, loss_s, batch_psnr

    # -- loop ---------------------------------------------------------------

    def wall_seconds(self):
        return time.perf_counter() - self._t0 + self._wall_offset

    def _held_out_ssim(self):
        if not self.test_indices:
            return None
        fi = self.test_indices[0]
        pose, rgb, _ = self.dataset.frames[fi]
        img = render_image(self.params, self.dataset.intrinsics, pose,
                           RenderSettings(white_background=self.config.white_background),
                           self.sampling, self.dataset.t_near, self.dataset.t_far,
                           seed=self.config.seed)
        return ssim(rgb.astype(np.float64) / 255.0, img.rgb)

    def run(self, until=None):
        cfg = self.config
        target = cfg.iterations if until is None else min(until, cfg.iterations)
        while self.iteration < target:
            i = self.iteration
            if cfg.selfsup is not None and cfg.selfsup.due(i):
                cycle = (i - cfg.selfsup.warmup_iterations) // cfg.selfsup.interval
                self.labels, _ = run_selfsup_cycle(
                    self.params, self.dataset, self.train_indices, self.labels,
                    cfg.selfsup, self.sampling, cfg.seed, cycle)
            loss_p, loss_s, batch_psnr = self._step(i)
            self.iteration = i + 1
            if cfg.log_interval and (self.iteration % cfg.log_interval == 0
                                     or self.iteration == cfg.iterations):
                test = None
                if cfg.eval_interval and self.iteration % cfg.eval_interval == 0:
                    test = self._held_out_ssim()
                row = LogRow(self.iteration, self.wall_seconds(), loss_p, loss_s,
                             batch_psnr, test)
                self.rows.append(row)
                self._append_log(row)
        if self.run_dir:
            self.save_run_state()
        return self

    # -- persistence ----------------------------------------------------------

    def _append_log(self, row):
        if not self.run_dir:
            return
        path = os.path.join(self.run_dir, METRICS_NAME)
        new = not os.path.exists(path)
        with open(path, "a") as f:
            if new:
                f.write(METRICS_HEADER + "\n")
            f.write(row.format() + "\n")

    def checkpoint_path(self):
        return os.path.join(self.run_dir, CHECKPOINT_NAME)

    def save_run_state(self):
        save_checkpoint(self.params.astype(np.float32), self.checkpoint_path())
        np.savez(os.path.join(self.run_dir, STATE_NAME),
                 iteration=self.iteration,
                 params=self.params.flat,
                 adam_m=self.adam.m, adam_v=self.adam.v, adam_t=self.adam.t,
                 labels=self.labels, colors=self.colors,
                 keep_mask=(np.zeros(0, dtype=bool) if self.keep_mask is None
                            else self.keep_mask),
                 sample_class=self.sample_class,
                 wall=self.wall_seconds())

    def resume(self):
        """Restore parameters, optimizer and supervision from the run dir."""
        state = np.load(os.path.join(self.run_dir, STATE_NAME))
        self.iteration = int(state["iteration"])
        self.params.flat[:] = state["params"]
        self.adam.m[:] = state["adam_m"]
        self.adam.v[:] = state["adam_v"]
        self.adam.t = int(state["adam_t"])
        self.labels = state["labels"]
        self.colors = state["colors"]
        self.sample_class = state["sample_class"]
        keep = state["keep_mask"]
        self.keep_mask = None if keep.size == 0 else keep
        self._wall_offset = float(state["wall"])
        self._t0 = time.perf_counter()
        return self


def train(dataset, config, arch=None, sampling=None, run_dir=None):
    """Train to config.iterations; returns the Trainer with final state."""
    return Trainer(dataset, config, arch=arch, sampling=sampling, run_dir=run_dir).run()
