"""Lossy core of baseline JPEG: 8x8 DCT, quality-scaled quantization, inverse.

Entropy coding is lossless and therefore omitted; chroma subsampling is not
modelled, every channel goes through the luminance table.
"""

import numpy as np

from .errors import ParameterError

BLOCK = 8

# ITU-T T.81 Annex K.1 luminance table
LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal type-II DCT basis, rows indexed by frequency."""
    x = np.arange(n)
    m = np.cos((2 * x[None, :] + 1) * x[:, None] * np.pi / (2 * n))
    m[0] *= np.sqrt(1.0 / n)
    m[1:] *= np.sqrt(2.0 / n)
    return m


_D = dct_matrix()


def quality_scale(q: int) -> int:
    if not 1 <= q <= 100:
        raise ParameterError(f"JPEG quality must lie in [1, 100], got {q}")
    return 5000 // q if q < 50 else 200 - 2 * q


def quant_table(q: int) -> np.ndarray:
    """Standard luminance table scaled by the IJG quality law, entries in [1, 255]."""
    t = np.floor((LUMA_TABLE * quality_scale(q) + 50) / 100)
    return np.clip(t, 1, 255)


def jpeg_core_planes(planes: np.ndarray, q: int) -> np.ndarray:
    """Round-trip 0..255-scale planes (C, H, W); returns reconstructed pixels, rounded and clamped."""
    q = int(q)
    table = quant_table(q)
    c, h, w = planes.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    x = np.pad(planes, ((0, 0), (0, ph), (0, pw)), mode="edge") - 128.0
    bh, bw = x.shape[1] // BLOCK, x.shape[2] // BLOCK
    blocks = x.reshape(c, bh, BLOCK, bw, BLOCK).transpose(0, 1, 3, 2, 4)
    coef = _D @ blocks @ _D.T
    coef = np.rint(coef / table) * table
    rec = _D.T @ coef @ _D
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, bh * BLOCK, bw * BLOCK)[:, :h, :w]
    return np.clip(np.floor(rec + 128.0 + 0.5), 0, 255)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    mse = np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(peak * peak / mse))
