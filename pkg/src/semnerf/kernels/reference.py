"""Pure-numpy reference implementations of the hot kernels.

Each function has a numba twin in ``semnerf.kernels.jitted`` with identical
semantics; ``semnerf.kernels`` binds one set at import time (see the
SEMNERF_BACKEND environment flag).  These versions are the ground truth the
jitted ones are tested against.
"""

import numpy as np

BACKEND_NAME = "numpy"


def encode_frequencies(v, levels, include_raw=True):
    """Frequency features [v?, sin(2^k pi v), cos(2^k pi v)] for k < levels.

    v is (N, D); output is (N, D * (include_raw + 2 * levels)), laid out as
    the raw vector (when kept) followed by one sin block and one cos block
    per frequency, all componentwise.
    """
    v = np.ascontiguousarray(v)
    n, d = v.shape
    raw = 1 if include_raw else 0
    out = np.empty((n, d * (raw + 2 * levels)), dtype=v.dtype)
    col = 0
    if include_raw:
        out[:, :d] = v
        col = d
    for k in range(levels):
        arg = (np.pi * float(2 ** k)) * v
        np.sin(arg, out=out[:, col:col + d])
        np.cos(arg, out=out[:, col + d:col + 2 * d])
        col += 2 * d
    return out


def render_weights(sigma, delta):
    """Quadrature compositing weights for a batch of rays.

    sigma, delta are (B, K) with sigma >= 0, delta > 0.  Returns
    (weights, trans): weights[b, k] is the contribution of sample k along
    ray b, trans[b, k] (shape (B, K+1)) is the transmittance reaching
    sample k; trans[b, -1] is what survives the whole ray.
    """
    a = sigma * delta
    trans = np.empty((a.shape[0], a.shape[1] + 1), dtype=a.dtype)
    trans[:, 0] = 1.0
    np.exp(-np.cumsum(a, axis=1), out=trans[:, 1:])
    weights = trans[:, :-1] * (-np.expm1(-a))
    return weights, trans


def render_weights_backward(d_weights, weights, trans, delta):
    """d(loss)/d(sigma) given d(loss)/d(weights) from render_weights."""
    s = d_weights * weights
    # suffix[b, j] = sum_{k > j} s[b, k]
    suffix = np.cumsum(s[:, ::-1], axis=1)[:, ::-1] - s
    da = d_weights * trans[:, 1:] - suffix
    return da * delta


def sample_pdf(edges, weights, u):
    """Inverse-CDF draws from a piecewise-constant density over bins.

    edges is (B, K+1) ascending, weights (B, K) nonnegative with strictly
    positive row sums, u (B, Nf) in [0, 1).  Returns (B, Nf) positions,
    uniform within each selected bin.
    """
    n_rays, n_bins = weights.shape
    cdf = np.cumsum(weights, axis=1)
    cdf = cdf / cdf[:, -1:]
    # rows are separated by +2 so one flat searchsorted covers the batch
    offs = 2.0 * np.arange(n_rays, dtype=cdf.dtype)[:, None]
    flat = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right")
    k = flat.reshape(u.shape) - np.arange(n_rays)[:, None] * n_bins
    k = np.clip(k, 0, n_bins - 1)
    cdf_full = np.concatenate([np.zeros((n_rays, 1), dtype=cdf.dtype), cdf], axis=1)
    lo = np.take_along_axis(cdf_full, k, axis=1)
    seg = np.take_along_axis(cdf_full, k + 1, axis=1) - lo
    frac = np.where(seg > 0, (u - lo) / np.where(seg > 0, seg, 1.0), 0.0)
    e_lo = np.take_along_axis(edges, k, axis=1)
    e_hi = np.take_along_axis(edges, k + 1, axis=1)
    return e_lo + frac * (e_hi - e_lo)


def _shift(mask, dy, dx):
    # out[y, x] = mask[y + dy, x + dx], zero where that falls off the image
    out = np.zeros_like(mask)
    h, w = mask.shape
    out[max(0, -dy):min(h, h - dy), max(0, -dx):min(w, w - dx)] = \
        mask[max(0, dy):min(h, h + dy), max(0, dx):min(w, w + dx)]
    return out


def binary_erode(mask, offsets):
    """1 iff every structuring-element neighbor is 1; outside the image is 0."""
    out = np.ones_like(mask)
    for dy, dx in offsets:
        out &= _shift(mask, int(dy), int(dx))
    return out


def binary_dilate(mask, offsets):
    """1 iff any structuring-element neighbor is 1; outside the image is 0."""
    out = np.zeros_like(mask)
    for dy, dx in offsets:
        out |= _shift(mask, int(dy), int(dx))
    return out


# primitive kinds for raytrace
PRIM_SPHERE = 0
PRIM_BOX = 1
PRIM_DISC = 2

_EPS_T = 1e-6


def raytrace(origins, dirs, kinds, params):
    """Nearest analytic intersection per ray.

    kinds is (P,) int: 0 sphere (params cx,cy,cz,r), 1 box (params are
    center xyz + half extents xyz), 2 disc (center xyz, unit normal xyz,
    radius).  Returns (t, hit_index) with t = +inf and index -1 on a miss.
    Tangent rays (zero discriminant) count as hits.
    """
    n = origins.shape[0]
    best_t = np.full(n, np.inf, dtype=origins.dtype)
    best_i = np.full(n, -1, dtype=np.int64)
    for i in range(kinds.shape[0]):
        p = params[i]
        if kinds[i] == PRIM_SPHERE:
            oc = origins - p[:3]
            b = np.sum(oc * dirs, axis=1)
            c0 = np.sum(oc * oc, axis=1) - p[3] * p[3]
            disc = b * b - c0
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t = -b - sq
            t2 = -b + sq
            t = np.where(t > _EPS_T, t, t2)
            t = np.where(ok & (t > _EPS_T), t, np.inf)
        elif kinds[i] == PRIM_BOX:
            lo = p[:3] - p[3:6]
            hi = p[:3] + p[3:6]
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                t0 = (lo - origins) * inv
                t1 = (hi - origins) * inv
            # a parallel ray inside the slab never bounds; outside it always misses
            par = np.abs(dirs) < 1e-12
            inside = (origins >= lo) & (origins <= hi)
            t0 = np.where(par, np.where(inside, -np.inf, np.inf), t0)
            t1 = np.where(par, np.where(inside, np.inf, -np.inf), t1)
            t_enter = np.max(np.minimum(t0, t1), axis=1)
            t_exit = np.min(np.maximum(t0, t1), axis=1)
            hit = (t_enter <= t_exit) & (t_exit > _EPS_T)
            t = np.where(t_enter > _EPS_T, t_enter, t_exit)
            t = np.where(hit, t, np.inf)
        else:
            nrm = p[3:6]
            denom = dirs @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((p[:3] - origins) @ nrm) / denom
            pt = origins + t[:, None] * dirs - p[:3]
            inside = np.sum(pt * pt, axis=1) <= p[6] * p[6]
            t = np.where((np.abs(denom) > 1e-12) & (t > _EPS_T) & inside, t, np.inf)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_i[closer] = i
    return best_t, best_i
