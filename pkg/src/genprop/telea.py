"""Fast-marching inpainting (Telea's method) on float RGB frames.

Masked pixels are filled inward from the hole boundary in order of
arrival time T of the marching front. Each pixel is a weighted average
of already-known neighbors within ``radius``, weighted by the product of
a direction term (alignment with the front normal), a geometric distance
term, and a level-set closeness term. Arrival times are also marched a
short way outward from the boundary (stored negative) so the direction
term has a meaningful gradient on both sides.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

KNOWN, BAND, INSIDE = 0, 1, 2
FAR = 1.0e6


class DegenerateInputError(ValueError):
    """The mask leaves nothing to interpolate from."""


def _solve_step(i1, j1, i2, j2, t, flags, h, w):
    """Quadratic Eikonal update from two candidate upwind neighbors."""
    if not (0 <= i1 < h and 0 <= j1 < w) or not (0 <= i2 < h and 0 <= j2 < w):
        return FAR
    f1, f2 = flags[i1, j1], flags[i2, j2]
    if f1 == KNOWN and f2 == KNOWN:
        t1, t2 = t[i1, j1], t[i2, j2]
        d = 2.0 - (t1 - t2) ** 2
        if d > 0.0:
            r = math.sqrt(d)
            s = (t1 + t2 - r) / 2.0
            if s >= t1 and s >= t2:
                return s
            s += r
            if s >= t1 and s >= t2:
                return s
        return FAR
    if f1 == KNOWN:
        return 1.0 + t[i1, j1]
    if f2 == KNOWN:
        return 1.0 + t[i2, j2]
    return FAR


def _eikonal_update(i, j, t, flags, h, w):
    return min(
        _solve_step(i - 1, j, i, j - 1, t, flags, h, w),
        _solve_step(i + 1, j, i, j - 1, t, flags, h, w),
        _solve_step(i - 1, j, i, j + 1, t, flags, h, w),
        _solve_step(i + 1, j, i, j + 1, t, flags, h, w),
    )


NEIGHBORS4 = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _march_outside(t, flags, band, radius, h, w):
    """March arrival times outward from the boundary, negating them.

    Gives known pixels near the hole a signed distance so the level-set
    weight can distinguish them; limited to ``2 * radius``.
    """
    inv_flags = flags.copy()
    inv_flags[flags == KNOWN] = INSIDE
    inv_flags[flags == INSIDE] = KNOWN
    out_t = np.full(t.shape, FAR)
    for _, i, j in band:
        out_t[i, j] = 0.0
    heap = list(band)
    heapq.heapify(heap)
    limit = 2.0 * radius
    while heap:
        cur_t, i, j = heapq.heappop(heap)
        if cur_t > limit:
            break
        inv_flags[i, j] = KNOWN
        for di, dj in NEIGHBORS4:
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and inv_flags[ni, nj] == INSIDE:
                dist = _eikonal_update(ni, nj, out_t, inv_flags, h, w)
                out_t[ni, nj] = dist
                t[ni, nj] = -dist
                inv_flags[ni, nj] = BAND
                heapq.heappush(heap, (dist, ni, nj))


def _front_gradient(i, j, t, flags, h, w):
    if 0 < i < h - 1 and flags[i - 1, j] != INSIDE and flags[i + 1, j] != INSIDE:
        gy = (t[i + 1, j] - t[i - 1, j]) / 2.0
    elif i < h - 1 and flags[i + 1, j] != INSIDE:
        gy = t[i + 1, j] - t[i, j]
    elif i > 0 and flags[i - 1, j] != INSIDE:
        gy = t[i, j] - t[i - 1, j]
    else:
        gy = 0.0
    if 0 < j < w - 1 and flags[i, j - 1] != INSIDE and flags[i, j + 1] != INSIDE:
        gx = (t[i, j + 1] - t[i, j - 1]) / 2.0
    elif j < w - 1 and flags[i, j + 1] != INSIDE:
        gx = t[i, j + 1] - t[i, j]
    elif j > 0 and flags[i, j - 1] != INSIDE:
        gx = t[i, j] - t[i, j - 1]
    else:
        gx = 0.0
    return gy, gx


def _fill_pixel(i, j, image, t, flags, radius, h, w):
    gy, gx = _front_gradient(i, j, t, flags, h, w)
    acc = np.zeros(image.shape[-1], dtype=np.float64)
    weight_sum = 0.0
    for ni in range(max(0, i - radius), min(h, i + radius + 1)):
        for nj in range(max(0, j - radius), min(w, j + radius + 1)):
            if flags[ni, nj] == INSIDE:
                continue
            ry, rx = float(i - ni), float(j - nj)
            dist_sq = ry * ry + rx * rx
            if dist_sq == 0.0 or dist_sq > radius * radius:
                continue
            dist = math.sqrt(dist_sq)
            direction = abs(ry * gy + rx * gx) / dist
            if direction == 0.0:
                direction = 1.0e-6
            geometry = 1.0 / (dist_sq * dist)
            level = 1.0 / (1.0 + abs(t[ni, nj] - t[i, j]))
            weight = direction * geometry * level
            acc += weight * image[ni, nj]
            weight_sum += weight
    image[i, j] = acc / weight_sum


def inpaint_frame(frame: np.ndarray, mask: np.ndarray, radius: int = 3) -> np.ndarray:
    """Fill masked pixels of one (H, W, C) float frame; others untouched.

    Raises :class:`DegenerateInputError` when the mask covers the whole
    frame (there is no boundary to interpolate from).
    """
    h, w = mask.shape
    inside = mask > 0.5
    if not inside.any():
        return frame.copy()
    if inside.all():
        raise DegenerateInputError("mask covers the entire frame")

    flags = np.where(inside, INSIDE, KNOWN).astype(np.int8)
    t = np.where(inside, FAR, 0.0)

    band = []
    for i in range(h):
        for j in range(w):
            if flags[i, j] != KNOWN:
                continue
            for di, dj in NEIGHBORS4:
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and flags[ni, nj] == INSIDE:
                    flags[i, j] = BAND
                    t[i, j] = 0.0
                    band.append((0.0, i, j))
                    break

    _march_outside(t, flags, band, radius, h, w)

    out = frame.astype(np.float64).copy()
    heap = list(band)
    heapq.heapify(heap)
    while heap:
        _, i, j = heapq.heappop(heap)
        flags[i, j] = KNOWN
        for di, dj in NEIGHBORS4:
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and flags[ni, nj] == INSIDE:
                t[ni, nj] = _eikonal_update(ni, nj, t, flags, h, w)
                _fill_pixel(ni, nj, out, t, flags, radius, h, w)
                flags[ni, nj] = BAND
                heapq.heappush(heap, (t[ni, nj], ni, nj))

    result = frame.copy()
    result[inside] = np.clip(out[inside], 0.0, 1.0).astype(frame.dtype)
    return result
