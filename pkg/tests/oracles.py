"""Independent reference implementations used as test oracles.

Everything here is deliberately written in a direct, loop-based style
with no code shared with the package, so agreement is evidence rather
than tautology.
"""

import math
from queue import PriorityQueue

import numpy as np


# ---------------------------------------------------------------------------
# dense Gaussian mask downsampling


def dense_gaussian_downsample(mask: np.ndarray, factor: int, latent_frames: int) -> np.ndarray:
    """Brute-force normalized Gaussian convolution + stride subsampling.

    mask: (T, H, W) binary. Mirrors the documented semantics: sigma =
    factor/2, kernel width 2*factor+1, kernel renormalized over the
    in-bounds window, samples at i*factor + (factor-1)//2, nearest-index
    temporal alignment.
    """
    t_frames, h, w = mask.shape
    sigma = factor / 2.0
    radius = factor
    k1 = np.array([math.exp(-0.5 * (d / sigma) ** 2) for d in range(-radius, radius + 1)])
    k1 = k1 / k1.sum()
    k2 = np.outer(k1, k1)

    off = (factor - 1) // 2
    out_h, out_w = h // factor, w // factor
    blurred = np.zeros((t_frames, out_h, out_w))
    for t in range(t_frames):
        for oi in range(out_h):
            for oj in range(out_w):
                ci, cj = oi * factor + off, oj * factor + off
                num = 0.0
                den = 0.0
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        y, x = ci + dy, cj + dx
                        if 0 <= y < h and 0 <= x < w:
                            weight = k2[dy + radius, dx + radius]
                            num += weight * mask[t, y, x]
                            den += weight
                blurred[t, oi, oj] = num / den

    if latent_frames == 1:
        idx = [0]
    else:
        idx = [round(j * (t_frames - 1) / (latent_frames - 1)) for j in range(latent_frames)]
    return np.clip(blurred[idx], 0.0, 1.0)


# ---------------------------------------------------------------------------
# reference fast-marching (Telea) inpainting

_KNOWN, _BAND, _INSIDE = 0, 1, 2
_BIG = 1.0e6


def reference_telea(frame: np.ndarray, mask: np.ndarray, radius: int = 3) -> np.ndarray:
    """Straightforward transcription of fast-marching inpainting."""
    h, w = mask.shape
    img = frame.astype(np.float64).copy()
    flags = np.zeros((h, w), dtype=int)
    tval = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if mask[i, j] > 0.5:
                flags[i, j] = _INSIDE
                tval[i, j] = _BIG

    if (flags == _INSIDE).all():
        raise ValueError("mask covers the entire frame")

    def solve(i1, j1, i2, j2, tt, ff):
        if not (0 <= i1 < h and 0 <= j1 < w and 0 <= i2 < h and 0 <= j2 < w):
            return _BIG
        if ff[i1, j1] == _KNOWN and ff[i2, j2] == _KNOWN:
            a, b = tt[i1, j1], tt[i2, j2]
            d = 2.0 - (a - b) ** 2
            if d > 0.0:
                r = math.sqrt(d)
                s = (a + b - r) / 2.0
                if s >= a and s >= b:
                    return s
                s += r
                if s >= a and s >= b:
                    return s
            return _BIG
        if ff[i1, j1] == _KNOWN:
            return 1.0 + tt[i1, j1]
        if ff[i2, j2] == _KNOWN:
            return 1.0 + tt[i2, j2]
        return _BIG

    def stencil(i, j, tt, ff):
        return min(
            solve(i - 1, j, i, j - 1, tt, ff),
            solve(i + 1, j, i, j - 1, tt, ff),
            solve(i - 1, j, i, j + 1, tt, ff),
            solve(i + 1, j, i, j + 1, tt, ff),
        )

    band = []
    for i in range(h):
        for j in range(w):
            if flags[i, j] == _KNOWN:
                for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ni, nj = i + di, j + dj
                    if 0 <= ni < h and 0 <= nj < w and flags[ni, nj] == _INSIDE:
                        flags[i, j] = _BAND
                        tval[i, j] = 0.0
                        band.append((i, j))
                        break

    # outward arrival times (stored negative), limited to 2 * radius
    inv = flags.copy()
    inv[flags == _KNOWN] = _INSIDE
    inv[flags == _INSIDE] = _KNOWN
    out_t = np.full((h, w), _BIG)
    queue = PriorityQueue()
    for (i, j) in band:
        out_t[i, j] = 0.0
        queue.put((0.0, i, j))
    while not queue.empty():
        cur, i, j = queue.get()
        if cur > 2.0 * radius:
            break
        inv[i, j] = _KNOWN
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and inv[ni, nj] == _INSIDE:
                dist = stencil(ni, nj, out_t, inv)
                out_t[ni, nj] = dist
                tval[ni, nj] = -dist
                inv[ni, nj] = _BAND
                queue.put((dist, ni, nj))

    def paint(i, j):
        if 0 < i < h - 1 and flags[i - 1, j] != _INSIDE and flags[i + 1, j] != _INSIDE:
            gy = (tval[i + 1, j] - tval[i - 1, j]) / 2.0
        elif i < h - 1 and flags[i + 1, j] != _INSIDE:
            gy = tval[i + 1, j] - tval[i, j]
        elif i > 0 and flags[i - 1, j] != _INSIDE:
            gy = tval[i, j] - tval[i - 1, j]
        else:
            gy = 0.0
        if 0 < j < w - 1 and flags[i, j - 1] != _INSIDE and flags[i, j + 1] != _INSIDE:
            gx = (tval[i, j + 1] - tval[i, j - 1]) / 2.0
        elif j < w - 1 and flags[i, j + 1] != _INSIDE:
            gx = tval[i, j + 1] - tval[i, j]
        elif j > 0 and flags[i, j - 1] != _INSIDE:
            gx = tval[i, j] - tval[i, j - 1]
        else:
            gx = 0.0

        total = np.zeros(img.shape[-1])
        wsum = 0.0
        for ni in range(max(0, i - radius), min(h, i + radius + 1)):
            for nj in range(max(0, j - radius), min(w, j + radius + 1)):
                if flags[ni, nj] == _INSIDE:
                    continue
                ry, rx = float(i - ni), float(j - nj)
                d2 = ry * ry + rx * rx
                if d2 == 0.0 or d2 > radius * radius:
                    continue
                dnorm = math.sqrt(d2)
                direction = abs(ry * gy + rx * gx) / dnorm
                if direction == 0.0:
                    direction = 1.0e-6
                weight = direction * (1.0 / (d2 * dnorm)) * (1.0 / (1.0 + abs(tval[ni, nj] - tval[i, j])))
                total += weight * img[ni, nj]
                wsum += weight
        img[i, j] = total / wsum

    queue = PriorityQueue()
    for (i, j) in band:
        queue.put((0.0, i, j))
    while not queue.empty():
        _, i, j = queue.get()
        flags[i, j] = _KNOWN
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and flags[ni, nj] == _INSIDE:
                tval[ni, nj] = stencil(ni, nj, tval, flags)
                paint(ni, nj)
                flags[ni, nj] = _BAND
                queue.put((tval[ni, nj], ni, nj))

    out = frame.copy()
    sel = mask > 0.5
    out[sel] = np.clip(img[sel], 0.0, 1.0).astype(frame.dtype)
    return out


# ---------------------------------------------------------------------------
# ring-mean fill oracle


def loop_mean_fill(frame: np.ndarray, mask: np.ndarray, margin: int = 5) -> np.ndarray:
    """Loop-based expanded-bounding-box mean fill for one frame."""
    h, w, _ = frame.shape
    ys = [i for i in range(h) for j in range(w) if mask[i, j] > 0.5]
    xs = [j for i in range(h) for j in range(w) if mask[i, j] > 0.5]
    if not ys:
        return frame.copy()
    y0, y1 = max(0, min(ys) - margin), min(h - 1, max(ys) + margin)
    x0, x1 = max(0, min(xs) - margin), min(w - 1, max(xs) + margin)
    acc = np.zeros(3)
    count = 0
    for i in range(y0, y1 + 1):
        for j in range(x0, x1 + 1):
            if mask[i, j] <= 0.5:
                acc += frame[i, j]
                count += 1
    if count == 0:
        for i in range(h):
            for j in range(w):
                if mask[i, j] <= 0.5:
                    acc += frame[i, j]
                    count += 1
    fill = acc / count
    out = frame.copy()
    for i in range(h):
        for j in range(w):
            if mask[i, j] > 0.5:
                out[i, j] = fill
    return out


def mask_centroid(mask_frame: np.ndarray) -> tuple[float, float]:
    """(x, y) centroid of a binary mask frame."""
    ys, xs = np.nonzero(mask_frame > 0.5)
    return float(xs.mean()), float(ys.mean())
