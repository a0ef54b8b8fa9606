"""Numba @njit twins of the reference kernels.

Same contracts as ``semnerf.kernels.reference``; the loops here fuse the
temporaries the numpy versions allocate.  Results agree with the reference
to float rounding (summation order differs), which the kernel tests pin.
"""

import numpy as np
from numba import njit

from .reference import PRIM_BOX, PRIM_DISC, PRIM_SPHERE, _EPS_T

BACKEND_NAME = "numba"


@njit(cache=True)
def encode_frequencies(v, levels, include_raw=True):
    n, d = v.shape
    raw = 1 if include_raw else 0
    out = np.empty((n, d * (raw + 2 * levels)), dtype=v.dtype)
    for i in range(n):
        col = 0
        if include_raw:
            for j in range(d):
                out[i, j] = v[i, j]
            col = d
        for k in range(levels):
            f = np.pi * float(2 ** k)
            for j in range(d):
                a = f * v[i, j]
                out[i, col + j] = np.sin(a)
                out[i, col + d + j] = np.cos(a)
            col += 2 * d
    return out


@njit(cache=True)
def render_weights(sigma, delta):
    n_rays, n_samples = sigma.shape
    weights = np.empty_like(sigma)
    trans = np.empty((n_rays, n_samples + 1), dtype=sigma.dtype)
    for b in range(n_rays):
        acc = sigma.dtype.type(0.0)
        trans[b, 0] = 1.0
        for k in range(n_samples):
            a = sigma[b, k] * delta[b, k]
            weights[b, k] = np.exp(-acc) * (-np.expm1(-a))
            acc += a
            trans[b, k + 1] = np.exp(-acc)
    return weights, trans


@njit(cache=True)
def render_weights_backward(d_weights, weights, trans, delta):
    n_rays, n_samples = weights.shape
    out = np.empty_like(weights)
    for b in range(n_rays):
        suffix = weights.dtype.type(0.0)
        for k in range(n_samples - 1, -1, -1):
            out[b, k] = (d_weights[b, k] * trans[b, k + 1] - suffix) * delta[b, k]
            suffix += d_weights[b, k] * weights[b, k]
    return out


@njit(cache=True)
def sample_pdf(edges, weights, u):
    n_rays, n_bins = weights.shape
    n_fine = u.shape[1]
    out = np.empty((n_rays, n_fine), dtype=edges.dtype)
    cdf = np.empty(n_bins + 1, dtype=weights.dtype)
    for b in range(n_rays):
        cdf[0] = 0.0
        for k in range(n_bins):
            cdf[k + 1] = cdf[k] + weights[b, k]
        total = cdf[n_bins]
        for k in range(n_bins + 1):
            cdf[k] /= total
        for j in range(n_fine):
            # first k with cdf[k+1] > u
            lo, hi = 0, n_bins - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if cdf[mid + 1] > u[b, j]:
                    hi = mid
                else:
                    lo = mid + 1
            seg = cdf[lo + 1] - cdf[lo]
            frac = (u[b, j] - cdf[lo]) / seg if seg > 0 else 0.0
            out[b, j] = edges[b, lo] + frac * (edges[b, lo + 1] - edges[b, lo])
    return out


@njit(cache=True)
def binary_erode(mask, offsets):
    h, w = mask.shape
    out = np.empty_like(mask)
    for y in range(h):
        for x in range(w):
            v = mask.dtype.type(1)
            for o in range(offsets.shape[0]):
                yy = y + offsets[o, 0]
                xx = x + offsets[o, 1]
                if yy < 0 or yy >= h or xx < 0 or xx >= w or mask[yy, xx] == 0:
                    v = mask.dtype.type(0)
                    break
            out[y, x] = v
    return out


@njit(cache=True)
def binary_dilate(mask, offsets):
    h, w = mask.shape
    out = np.empty_like(mask)
    for y in range(h):
        for x in range(w):
            v = mask.dtype.type(0)
            for o in range(offsets.shape[0]):
                yy = y + offsets[o, 0]
                xx = x + offsets[o, 1]
                if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] != 0:
                    v = mask.dtype.type(1)
                    break
            out[y, x] = v
    return out


@njit(cache=True)
def raytrace(origins, dirs, kinds, params):
    n = origins.shape[0]
    best_t = np.full(n, np.inf, dtype=origins.dtype)
    best_i = np.full(n, -1, dtype=np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        for i in range(kinds.shape[0]):
            p = params[i]
            t = np.inf
            if kinds[i] == PRIM_SPHERE:
                cx, cy, cz = ox - p[0], oy - p[1], oz - p[2]
                b = cx * dx + cy * dy + cz * dz
                c0 = cx * cx + cy * cy + cz * cz - p[3] * p[3]
                disc = b * b - c0
                if disc >= 0.0:
                    sq = np.sqrt(disc)
                    t = -b - sq
                    if t <= _EPS_T:
                        t = -b + sq
                    if t <= _EPS_T:
                        t = np.inf
            elif kinds[i] == PRIM_BOX:
                t_enter = -np.inf
                t_exit = np.inf
                ok = True
                for ax in range(3):
                    o = origins[r, ax]
                    d = dirs[r, ax]
                    lo = p[ax] - p[3 + ax]
                    hi = p[ax] + p[3 + ax]
                    if np.abs(d) < 1e-12:
                        if o < lo or o > hi:
                            ok = False
                            break
                    else:
                        ta = (lo - o) / d
                        tb = (hi - o) / d
                        if ta > tb:
                            ta, tb = tb, ta
                        if ta > t_enter:
                            t_enter = ta
                        if tb < t_exit:
                            t_exit = tb
                if ok and t_enter <= t_exit and t_exit > _EPS_T:
                    t = t_enter if t_enter > _EPS_T else t_exit
            else:
                denom = dx * p[3] + dy * p[4] + dz * p[5]
                if np.abs(denom) > 1e-12:
                    tt = ((p[0] - ox) * p[3] + (p[1] - oy) * p[4] + (p[2] - oz) * p[5]) / denom
                    if tt > _EPS_T:
                        hx = ox + tt * dx - p[0]
                        hy = oy + tt * dy - p[1]
                        hz = oz + tt * dz - p[2]
                        if hx * hx + hy * hy + hz * hz <= p[6] * p[6]:
                            t = tt
            if t < best_t[r]:
                best_t[r] = t
                best_i[r] = i
    return best_t, best_i
