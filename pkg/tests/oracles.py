"""Brute-force reference implementations used only by the tests.

These are deliberately written as explicit loops, independent of the
vectorised code paths they check.
"""

import math

import numpy as np


def conv2d_naive(x, kernels, bias, stride=1, padding=(0, 0, 0, 0)):
    n, h, w, c = x.shape
    out, kh, kw, cin = kernels.shape
    top, bottom, left, right = padding
    xp = np.zeros((n, h + top + bottom, w + left + right, c))
    xp[:, top:top + h, left:left + w, :] = x
    oh = (h + top + bottom - kh) // stride + 1
    ow = (w + left + right - kw) // stride + 1
    y = np.zeros((n, oh, ow, out))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(out):
                    acc = bias[o]
                    for u in range(kh):
                        for v in range(kw):
                            for k in range(c):
                                acc += xp[b, i * stride + u, j * stride + v, k] * kernels[o, u, v, k]
                    y[b, i, j, o] = acc
    return y


def maxpool_naive(x, window=3, stride=2):
    n, h, w, c = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    y = np.empty((n, oh, ow, c))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for k in range(c):
                    best = -math.inf
                    for u in range(window):
                        for v in range(window):
                            best = max(best, x[b, i * stride + u, j * stride + v, k])
                    y[b, i, j, k] = best
    return y


def gap_naive(x):
    n, h, w, c = x.shape
    y = np.zeros((n, 1, 1, c))
    for b in range(n):
        for k in range(c):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[b, i, j, k]
            y[b, 0, 0, k] = s / (h * w)
    return y


def reflect_index(i, n):
    """Half-sample symmetric reflection: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ..."""
    period = 2 * n
    i %= period
    return i if i < n else period - 1 - i


def window_values(img, y, x, size):
    r = size // 2
    h, w = img.shape
    return [img[reflect_index(y + dy, h), reflect_index(x + dx, w)] for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def mean_filter_naive(img, size):
    h, w = img.shape
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            vals = window_values(img, y, x, size)
            out[y, x] = sum(vals) / len(vals)
    return out


def gaussian_kernel_naive(size, sigma):
    r = size // 2
    k = [[math.exp(-(u * u + v * v) / (2 * sigma * sigma)) for v in range(-r, r + 1)] for u in range(-r, r + 1)]
    total = sum(sum(row) for row in k)
    return [[val / total for val in row] for row in k]


def gaussian_filter_naive(img, size, sigma):
    h, w = img.shape
    k = gaussian_kernel_naive(size, sigma)
    r = size // 2
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    acc += k[u + r][v + r] * img[reflect_index(y + u, h), reflect_index(x + v, w)]
            out[y, x] = acc
    return out


def median_filter_naive(img, size):
    h, w = img.shape
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            vals = sorted(window_values(img, y, x, size))
            out[y, x] = vals[len(vals) // 2]
    return out


def wiener_filter_naive(img, size):
    h, w = img.shape
    means = np.empty((h, w))
    variances = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            vals = window_values(img, y, x, size)
            m = sum(vals) / len(vals)
            means[y, x] = m
            variances[y, x] = sum(v * v for v in vals) / len(vals) - m * m
    noise = sum(variances.ravel()) / (h * w)
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            v = variances[y, x]
            gain = max(v - noise, 0.0) / max(v, noise) if max(v, noise) > 0 else 0.0
            out[y, x] = means[y, x] + gain * (img[y, x] - means[y, x])
    return out


def bilinear_naive(img, out_h, out_w, scale_y, scale_x):
    """Half-pixel bilinear sampling of a 2-D array, coordinates clamped to the border."""
    h, w = img.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) / scale_y - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) / scale_x - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def dct_matrix_naive(n=8):
    m = np.empty((n, n))
    for u in range(n):
        cu = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
        for x in range(n):
            m[u, x] = cu * math.cos((2 * x + 1) * u * math.pi / (2 * n))
    return m
