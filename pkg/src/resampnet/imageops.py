"""Deterministic image kernels used to manufacture forensic datasets.

Images travel as :class:`ImageBuffer` (8-bit or unit-interval real, gray or
RGB).  Every operation is channel-separable and works internally in float64;
8-bit results are rounded half-up and clipped to [0, 255].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ChannelError, CropError, ParameterError
from .jpeg import jpeg_core_planes

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R BT.601
FILTER_WINDOWS = (3, 5, 7)
GAUSSIAN_SIGMA_RANGE = (0.8, 1.6)


@dataclass
class ImageBuffer:
    data: np.ndarray  # (H, W) or (H, W, 3); uint8 or float in [0, 1]
    color_space: str = ""

    def __post_init__(self):
        d = self.data
        if d.ndim not in (2, 3) or (d.ndim == 3 and d.shape[2] not in (1, 3)):
            raise ParameterError(f"image data must be (H, W) or (H, W, 3), got {d.shape}")
        if d.ndim == 3 and d.shape[2] == 1:
            self.data = d = d[:, :, 0]
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ParameterError(f"image must be non-empty, got {d.shape}")
        if d.dtype != np.uint8 and not np.issubdtype(d.dtype, np.floating):
            raise ParameterError(f"image dtype must be uint8 or floating, got {d.dtype}")
        if not self.color_space:
            self.color_space = "gray" if d.ndim == 2 else "rgb"
        if self.color_space not in ("gray", "rgb") or (self.color_space == "rgb") != (d.ndim == 3):
            raise ParameterError(f"color space {self.color_space!r} inconsistent with shape {d.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    @property
    def depth(self) -> str:
        return "u8" if self.data.dtype == np.uint8 else "real"

    def planes(self) -> np.ndarray:
        """Float64 array of shape (channels, H, W) on the 0..255 scale."""
        d = self.data.astype(np.float64)
        if self.depth == "real":
            d = d * 255.0
        return d[None] if d.ndim == 2 else np.moveaxis(d, 2, 0)

    def with_planes(self, planes: np.ndarray) -> "ImageBuffer":
        """New image of this image's depth/color space from 0..255-scale planes."""
        return from_planes(planes, self.depth, self.color_space)

    def __eq__(self, other):
        return (
            isinstance(other, ImageBuffer)
            and self.color_space == other.color_space
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


def quantize_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def from_planes(planes: np.ndarray, depth: str = "u8", color_space: str = "") -> ImageBuffer:
    data = quantize_u8(planes) if depth == "u8" else planes / 255.0
    data = data[0] if data.shape[0] == 1 else np.moveaxis(data, 0, 2)
    return ImageBuffer(np.ascontiguousarray(data), color_space)


# ------------------------------------------------------------------- geometry

def resized_length(n: int, factor_percent: float) -> int:
    return int(math.floor(n * factor_percent / 100.0 + 0.5))


def _bilinear_axis(n_in: int, n_out: int, factor_percent: float):
    src = (np.arange(n_out) + 0.5) * (100.0 / factor_percent) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_planes(planes: np.ndarray, factor_percent: float) -> np.ndarray:
    _, h, w = planes.shape
    oh, ow = resized_length(h, factor_percent), resized_length(w, factor_percent)
    y0, y1, fy = _bilinear_axis(h, oh, factor_percent)
    x0, x1, fx = _bilinear_axis(w, ow, factor_percent)
    fy = fy[None, :, None]
    rows = planes[:, y0, :] * (1 - fy) + planes[:, y1, :] * fy
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def resize_bilinear(img: ImageBuffer, factor_percent: float) -> ImageBuffer:
    """Scale both axes by ``factor_percent`` with half-pixel-centred bilinear sampling.

    Output length is ``round(n * factor / 100)``; source coordinates are
    ``(i + 0.5) * 100 / factor - 0.5`` clamped to the image.  No anti-alias
    prefilter is applied on downscaling.
    """
    if not 10 <= factor_percent <= 400:
        raise ParameterError(f"scale factor must lie in [10, 400] percent, got {factor_percent}")
    if resized_length(img.height, factor_percent) < 1 or resized_length(img.width, factor_percent) < 1:
        raise ParameterError(f"scale factor {factor_percent}% collapses a {img.height}x{img.width} image")
    if factor_percent == 100:
        return ImageBuffer(img.data.copy(), img.color_space)
    return img.with_planes(resize_planes(img.planes(), factor_percent))


def crop_origin(height: int, width: int, size: int):
    return (height - size) // 2, (width - size) // 2


def center_crop(img: ImageBuffer, size: int) -> ImageBuffer:
    if size < 1 or size > min(img.height, img.width):
        raise CropError(f"cannot crop {size}x{size} from a {img.height}x{img.width} image")
    top, left = crop_origin(img.height, img.width, size)
    return ImageBuffer(img.data[top:top + size, left:left + size].copy(), img.color_space)


def crop(img: ImageBuffer, top: int, left: int, height: int, width: int) -> ImageBuffer:
    if top < 0 or left < 0 or top + height > img.height or left + width > img.width or height < 1 or width < 1:
        raise CropError(f"window ({top}, {left}, {height}, {width}) outside a {img.height}x{img.width} image")
    return ImageBuffer(img.data[top:top + height, left:left + width].copy(), img.color_space)


# ----------------------------------------------------------------- point ops

def gamma_correct(img: ImageBuffer, gamma: float) -> ImageBuffer:
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    return img.with_planes(255.0 * (img.planes() / 255.0) ** gamma)


def extract_channel(img: ImageBuffer, channel: str) -> ImageBuffer:
    if channel == "green":
        if img.color_space != "rgb":
            raise ChannelError("green channel requested from a grayscale image")
        return ImageBuffer(img.data[:, :, 1].copy(), "gray")
    if channel == "gray":
        if img.color_space == "gray":
            return ImageBuffer(img.data.copy(), "gray")
        r, g, b = img.planes()
        wr, wg, wb = LUMA_WEIGHTS
        return from_planes((wr * r + wg * g + wb * b)[None], img.depth, "gray")
    raise ChannelError(f"unknown channel {channel!r}; expected 'green' or 'gray'")


# ------------------------------------------------------------------- filters

def _check_window(window: int) -> None:
    if window not in FILTER_WINDOWS:
        raise ParameterError(f"window must be one of {FILTER_WINDOWS}, got {window}")


def _windows(plane: np.ndarray, window: int) -> np.ndarray:
    r = window // 2
    # 'symmetric' = half-sample reflection: edge pixel repeated
    padded = np.pad(plane, r, mode="symmetric") if r <= min(plane.shape) else _reflect_pad(plane, r)
    return sliding_window_view(padded, (window, window))


def _reflect_pad(plane: np.ndarray, r: int) -> np.ndarray:
    h, w = plane.shape

    def idx(n):
        i = np.arange(-r, n + r) % (2 * n)
        return np.where(i < n, i, 2 * n - 1 - i)

    return plane[np.ix_(idx(h), idx(w))]


def mean_planes(planes: np.ndarray, window: int) -> np.ndarray:
    return np.stack([_windows(p, window).mean(axis=(2, 3)) for p in planes])


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = window // 2
    u = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(u[:, None] ** 2 + u[None, :] ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_planes(planes: np.ndarray, window: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel(window, sigma)
    return np.stack([np.tensordot(_windows(p, window), k, axes=([2, 3], [0, 1])) for p in planes])


def median_planes(planes: np.ndarray, window: int) -> np.ndarray:
    out = []
    for p in planes:
        w = _windows(p, window).reshape(p.shape + (-1,))
        out.append(np.partition(w, w.shape[-1] // 2, axis=-1)[..., w.shape[-1] // 2])
    return np.stack(out)


def wiener_planes(planes: np.ndarray, window: int) -> np.ndarray:
    """Adaptive local-statistics Wiener filter, noise power = mean local variance."""
    out = []
    for p in planes:
        w = _windows(p, window)
        mean = w.mean(axis=(2, 3))
        var = (w * w).mean(axis=(2, 3)) - mean * mean
        noise = var.mean()
        denom = np.maximum(var, noise)
        gain = np.divide(np.maximum(var - noise, 0.0), denom, out=np.zeros_like(var), where=denom > 0)
        out.append(mean + gain * (p - mean))
    return np.stack(out)


def filter_mean(img: ImageBuffer, window: int) -> ImageBuffer:
    _check_window(window)
    return img.with_planes(mean_planes(img.planes(), window))


def filter_gaussian(img: ImageBuffer, window: int, sigma: float) -> ImageBuffer:
    _check_window(window)
    lo, hi = GAUSSIAN_SIGMA_RANGE
    if not lo <= sigma <= hi:
        raise ParameterError(f"gaussian sigma must lie in [{lo}, {hi}], got {sigma}")
    return img.with_planes(gaussian_planes(img.planes(), window, sigma))


def filter_median(img: ImageBuffer, window: int) -> ImageBuffer:
    _check_window(window)
    return img.with_planes(median_planes(img.planes(), window))


def filter_wiener(img: ImageBuffer, window: int) -> ImageBuffer:
    _check_window(window)
    return img.with_planes(wiener_planes(img.planes(), window))


def jpeg_core_roundtrip(img: ImageBuffer, q: int) -> ImageBuffer:
    """Lossy JPEG core (DCT + quantization) applied per channel; see :mod:`resampnet.jpeg`."""
    return img.with_planes(jpeg_core_planes(img.planes(), q))


# ---------------------------------------------------------------- provenance

@dataclass
class OpRecord:
    name: str
    params: Dict[str, Any] = field(default_factory=dict)
    index: int = 0

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


OPS: Dict[str, Callable[..., ImageBuffer]] = {
    "resize": lambda img, factor: resize_bilinear(img, factor),
    "crop": lambda img, size: center_crop(img, size),
    "window": lambda img, top, left, size: crop(img, top, left, size, size),
    "jpeg": lambda img, q: jpeg_core_roundtrip(img, q),
    "gamma": lambda img, gamma: gamma_correct(img, gamma),
    "mean": lambda img, window: filter_mean(img, window),
    "gaussian": lambda img, window, sigma: filter_gaussian(img, window, sigma),
    "median": lambda img, window: filter_median(img, window),
    "wiener": lambda img, window: filter_wiener(img, window),
    "channel": lambda img, channel: extract_channel(img, channel),
}


def apply_op(img: ImageBuffer, record: OpRecord) -> ImageBuffer:
    try:
        fn = OPS[record.name]
    except KeyError:
        raise ParameterError(f"unknown operation {record.name!r}") from None
    return fn(img, **record.params)


def replay(img: ImageBuffer, records: Sequence[OpRecord]) -> ImageBuffer:
    for rec in sorted(records, key=lambda r: r.index):
        img = apply_op(img, rec)
    return img


def records_from_dicts(ops: Sequence[dict]) -> List[OpRecord]:
    return [OpRecord(o["name"], dict(o.get("params", {})), i) for i, o in enumerate(ops)]
