"""The learned scene representation.

A single MLP trunk over frequency-encoded positions feeds three heads:
density (softplus), semantic logits (linear) and color (sigmoid).  Density
and semantics branch off before the view direction is injected, so they are
view-invariant by construction.  Forward and backward passes are hand-written
batch numpy; gradients are exact for this architecture and are pinned against
central finite differences in the tests.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .rng import STREAM_INIT, stream_rng

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkArchitecture:
    trunk_depth: int = 4
    trunk_width: int = 64
    position_levels: int = 6
    direction_levels: int = 2
    class_count: int = 4

    def __post_init__(self):
        if self.trunk_depth < 1:
            raise ValueError("trunk_depth must be >= 1")
        if self.trunk_width < 1:
            raise ValueError("trunk_width must be >= 1")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.position_levels < 0 or self.direction_levels < 0:
            raise ValueError("encoding levels must be >= 0")

    @property
    def position_dim(self):
        return 3 + 6 * self.position_levels

    @property
    def direction_dim(self):
        return 3 + 6 * self.direction_levels

    def layer_shapes(self):
        """(weight shape, bias shape) pairs in flat storage order."""
        w = self.trunk_width
        shapes = [((w, self.position_dim), (w,))]
        shapes += [((w, w), (w,)) for _ in range(self.trunk_depth - 1)]
        shapes.append(((1, w), (1,)))                           # density
        shapes.append(((self.class_count, w), (self.class_count,)))  # semantics
        shapes.append(((w, w + self.direction_dim), (w,)))      # color hidden
        shapes.append(((3, w), (3,)))                           # color out
        return shapes

    @property
    def parameter_count(self):
        return sum(int(np.prod(ws)) + int(np.prod(bs)) for ws, bs in self.layer_shapes())


class ParameterSet:
    """Flat parameter vector plus per-layer views into it.

    The views alias ``flat``, so optimizer updates on the flat vector are
    visible to the layer matrices and vice versa.  Gradient buffers reuse
    this class (zeros of the same layout).
    """

    def __init__(self, arch, flat):
        flat = np.asarray(flat)
        if flat.ndim != 1 or flat.size != arch.parameter_count:
            raise ValueError(
                f"flat parameter vector must have length {arch.parameter_count}, got {flat.shape}")
        self.arch = arch
        self.flat = flat
        self.weights = []
        self.biases = []
        off = 0
        for ws, bs in arch.layer_shapes():
            n = int(np.prod(ws))
            self.weights.append(flat[off:off + n].reshape(ws))
            off += n
            n = int(np.prod(bs))
            self.biases.append(flat[off:off + n].reshape(bs))
            off += n

    # trunk layers are weights[0:depth]; heads follow in the order below
    @property
    def w_sigma(self):
        return self.weights[self.arch.trunk_depth]

    @property
    def b_sigma(self):
        return self.biases[self.arch.trunk_depth]

    @property
    def w_sem(self):
        return self.weights[self.arch.trunk_depth + 1]

    @property
    def b_sem(self):
        return self.biases[self.arch.trunk_depth + 1]

    @property
    def w_color1(self):
        return self.weights[self.arch.trunk_depth + 2]

    @property
    def b_color1(self):
        return self.biases[self.arch.trunk_depth + 2]

    @property
    def w_color2(self):
        return self.weights[self.arch.trunk_depth + 3]

    @property
    def b_color2(self):
        return self.biases[self.arch.trunk_depth + 3]

    @property
    def dtype(self):
        return self.flat.dtype

    def copy(self):
        return ParameterSet(self.arch, self.flat.copy())

    def astype(self, dtype):
        return ParameterSet(self.arch, self.flat.astype(dtype))


def init_params(arch, seed, dtype=np.float32):
    """Scaled-uniform weights (+/- sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = stream_rng(seed, STREAM_INIT)
    flat = np.empty(arch.parameter_count, dtype=np.float64)
    off = 0
    for ws, bs in arch.layer_shapes():
        fan_out, fan_in = ws
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        n = fan_out * fan_in
        flat[off:off + n] = rng.uniform(-bound, bound, n)
        off += n
        flat[off:off + bs[0]] = 0.0
        off += bs[0]
    return ParameterSet(arch, flat.astype(dtype))


def zero_grads(arch, dtype=np.float32):
    return ParameterSet(arch, np.zeros(arch.parameter_count, dtype=dtype))


@dataclass
class FieldOutput:
    sigma: float
    rgb: np.ndarray
    logits: np.ndarray


def positional_encode(v, levels, include_raw=True):
    """Encode a single 3-vector; see kernels.encode_frequencies for batches."""
    v = np.asarray(v, dtype=np.float64).reshape(1, 3)
    if levels < 0:
        raise ValueError("levels must be >= 0")
    return kernels.encode_frequencies(v, levels, include_raw)[0]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _relu_(x):
    return np.maximum(x, 0, out=x)


class GeometryPass:
    """Cached activations of the view-invariant part of the network."""

    __slots__ = ("x_enc", "hidden", "sigma_pre", "sigma", "logits")

    def __init__(self, x_enc, hidden, sigma_pre, sigma, logits):
        self.x_enc = x_enc
        self.hidden = hidden
        self.sigma_pre = sigma_pre
        self.sigma = sigma
        self.logits = logits


class ColorPass:
    __slots__ = ("cat", "g", "rgb")

    def __init__(self, cat, g, rgb):
        self.cat = cat
        self.g = g
        self.rgb = rgb


def forward_geometry(params, x_enc):
    """Trunk + density + semantic heads for encoded positions (N, Dpos)."""
    h = x_enc
    hidden = []
    for i in range(params.arch.trunk_depth):
        h = _relu_(h @ params.weights[i].T + params.biases[i])
        hidden.append(h)
    sigma_pre = h @ params.w_sigma[0] + params.b_sigma[0]
    sigma = np.logaddexp(0, sigma_pre)
    logits = h @ params.w_sem.T + params.b_sem
    return GeometryPass(x_enc, hidden, sigma_pre, sigma, logits)


def forward_color(params, geom, d_enc):
    """Color head on top of a geometry pass; d_enc is (N, Ddir)."""
    cat = np.concatenate([geom.hidden[-1], d_enc], axis=1)
    g = _relu_(cat @ params.w_color1.T + params.b_color1)
    rgb = _sigmoid(g @ params.w_color2.T + params.b_color2)
    return ColorPass(cat, g, rgb)


def encode_positions(positions, arch):
    return kernels.encode_frequencies(np.ascontiguousarray(positions), arch.position_levels, True)


def encode_directions(directions, arch):
    return kernels.encode_frequencies(np.ascontiguousarray(directions), arch.direction_levels, True)


def field_forward(params, position, direction):
    """Single-point evaluation with input validation (the batch path skips it)."""
    position = np.asarray(position, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if not (np.all(np.isfinite(position)) and np.all(np.isfinite(direction))):
        raise ValueError("non-finite field input")
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("direction must be a unit vector")
    p64 = params if params.dtype == np.float64 else params.astype(np.float64)
    geom = forward_geometry(p64, encode_positions(position.reshape(1, 3), params.arch))
    color = forward_color(p64, geom, encode_directions(direction.reshape(1, 3), params.arch))
    return FieldOutput(sigma=float(geom.sigma[0]), rgb=color.rgb[0], logits=geom.logits[0])


def backward_batch(params, geom, color, d_sigma, d_rgb, d_logits, grads):
    """Accumulate d(loss)/d(params) into `grads` for one evaluated batch.

    Upstream gradients may be None to skip a head (e.g. no color pass during
    semantic-only training).  Shapes must match the forward batch.
    """
    n = geom.x_enc.shape[0]
    arch = params.arch
    for name, g, dim in (("sigma", d_sigma, None), ("rgb", d_rgb, 3), ("logits", d_logits, arch.class_count)):
        if g is not None and (g.shape[0] != n or (dim is not None and g.shape[1] != dim)):
            raise ValueError(f"upstream {name} gradient shape mismatch")
    h_last = geom.hidden[-1]
    dh = np.zeros_like(h_last)

    if d_rgb is not None:
        if color is None:
            raise ValueError("color gradients supplied without a color pass")
        dpre2 = d_rgb * color.rgb * (1.0 - color.rgb)
        grads.w_color2 += dpre2.T @ color.g
        grads.b_color2 += dpre2.sum(axis=0)
        dg = dpre2 @ params.w_color2
        dg[color.g <= 0] = 0
        grads.w_color1 += dg.T @ color.cat
        grads.b_color1 += dg.sum(axis=0)
        dh += (dg @ params.w_color1)[:, :arch.trunk_width]

    if d_sigma is not None:
        dpre = d_sigma * _sigmoid(geom.sigma_pre)
        grads.w_sigma[0] += dpre @ h_last
        grads.b_sigma[0] += dpre.sum()
        dh += dpre[:, None] * params.w_sigma[0][None, :]

    if d_logits is not None:
        grads.w_sem += d_logits.T @ h_last
        grads.b_sem += d_logits.sum(axis=0)
        dh += d_logits @ params.w_sem

    below = [geom.x_enc] + geom.hidden[:-1]
    for i in range(arch.trunk_depth - 1, -1, -1):
        dh[geom.hidden[i] <= 0] = 0
        grads.weights[i] += dh.T @ below[i]
        grads.biases[i] += dh.sum(axis=0)
        if i > 0:
            dh = dh @ params.weights[i]


def softmax_probs(logits):
    """Row-wise stabilized softmax; accepts (L,) or (N, L)."""
    z = np.asarray(logits)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def save_checkpoint(params, path):
    """Header of little-endian uint32 (version + architecture), then float32 params."""
    a = params.arch
    header = struct.pack(
        "<6I", CHECKPOINT_VERSION, a.trunk_depth, a.trunk_width,
        a.position_levels, a.direction_levels, a.class_count)
    payload = np.ascontiguousarray(params.flat, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 24:
        raise ValueError(f"{path}: truncated checkpoint header")
    version, depth, width, lpos, ldir, classes = struct.unpack("<6I", raw[:24])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arch = NetworkArchitecture(depth, width, lpos, ldir, classes)
    flat = np.frombuffer(raw[24:], dtype="<f4")
    if flat.size != arch.parameter_count:
        raise ValueError(
            f"{path}: payload holds {flat.size} floats, architecture needs {arch.parameter_count}")
    return ParameterSet(arch, flat.astype(np.float32))
