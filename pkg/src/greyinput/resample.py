"""Greyscale image resampling: nearest, bilinear and Hamming-windowed sinc.

Images are 2-D float64 arrays (rows x columns) with values in [0, 1].
Every resize is separable: one sparse weight matrix per axis, applied as
``Wy @ img @ Wx.T``.  All methods use the pixel-centre mapping
``src = (dst + 0.5) * scale - 0.5`` and clamp-to-edge boundary handling.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import sparse

from .errors import DimensionError, ParameterError

BILINEAR_SUBMODES = ("antialiased", "point")


class InterpMethod(str, enum.Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"
    HAMMING = "hamming"

    @property
    def letter(self) -> str:
        return self.value[0].upper()

    @classmethod
    def parse(cls, token: str) -> "InterpMethod":
        token = token.strip().lower()
        for m in cls:
            if token in (m.value, m.value[0]):
                return m
        raise ParameterError(
            f"unknown interpolation method {token!r}; expected one of "
            + ", ".join(m.value for m in cls)
        )


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"an image must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("image contains non-finite values")
    return arr


def _check_extent(out_h: int, out_w: int) -> None:
    if int(out_h) < 1 or int(out_w) < 1:
        raise ParameterError(f"output extents must be >= 1, got {out_h}x{out_w}")


# ---------------------------------------------------------------------------
# scalar building blocks


def interp_linear_1d(x1: float, y1: float, x2: float, y2: float, x: float) -> float:
    """Value at ``x`` of the straight line through (x1, y1) and (x2, y2)."""
    if x1 == x2:
        raise ParameterError(f"degenerate interval: x1 == x2 == {x1}")
    return y1 * (x2 - x) / (x2 - x1) + y2 * (x - x1) / (x2 - x1)


def interp_bilinear_point(q11, q12, q21, q22, x1, x2, y1, y2, x, y) -> float:
    """Bilinear estimate at (x, y) from the four cell corners.

    ``q11 = f(x1, y1)``, ``q12 = f(x1, y2)``, ``q21 = f(x2, y1)``,
    ``q22 = f(x2, y2)``.  Interpolates along x at y1 and y2, then along y.
    """
    if x1 == x2 or y1 == y2:
        raise ParameterError(f"degenerate cell: x1={x1}, x2={x2}, y1={y1}, y2={y2}")
    ax, bx = (x2 - x) / (x2 - x1), (x - x1) / (x2 - x1)
    ay, by = (y2 - y) / (y2 - y1), (y - y1) / (y2 - y1)
    return ay * (ax * q11 + bx * q21) + by * (ax * q12 + bx * q22)


def hamming_window(x: float, m: float) -> float:
    if m <= 0:
        raise ParameterError(f"Hamming window half-width must be positive, got {m}")
    if abs(x) > m:
        return 0.0
    return 0.54 + 0.46 * math.cos(math.pi * x / m)


def sinc(x: float) -> float:
    if x == 0:
        return 1.0
    px = math.pi * x
    return math.sin(px) / px


def hamming_kernel(x: float, support: float = 1.0) -> float:
    """Windowed sinc ``sinc(x) * W(x, support)`` on the open interval (-support, support)."""
    if abs(x) >= support:
        return 0.0
    return sinc(x) * hamming_window(x, support)


def triangle_kernel(x: float) -> float:
    return max(0.0, 1.0 - abs(x))


# ---------------------------------------------------------------------------
# per-axis weight matrices


@lru_cache(maxsize=256)
def nearest_weights(n_in: int, n_out: int) -> sparse.csr_matrix:
    # floor((i + 0.5) * n_in / n_out) in exact integer arithmetic
    idx = np.minimum(((2 * np.arange(n_out) + 1) * n_in) // (2 * n_out), n_in - 1)
    return sparse.csr_matrix((np.ones(n_out), (np.arange(n_out), idx)), shape=(n_out, n_in))


@lru_cache(maxsize=256)
def point_bilinear_weights(n_in: int, n_out: int) -> sparse.csr_matrix:
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    rows = np.repeat(np.arange(n_out), 2)
    cols = np.stack([i0, i1], axis=1).ravel()
    vals = np.stack([1.0 - t, t], axis=1).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def filter_weights(
    n_in: int, n_out: int, kernel: Callable[[float], float], support: float
) -> sparse.csr_matrix:
    """Convolution weights for a kernel scaled by the downscale factor.

    On downscale the kernel is stretched by ``n_in / n_out`` (which widens
    its support); on upscale it is used as is.  Taps outside the image are
    clamped to the edge pixel; each row is normalised to sum to one.
    """
    scale = n_in / n_out
    fs = max(scale, 1.0)
    reach = support * fs
    rows, cols, vals = [], [], []
    for i in range(n_out):
        center = (i + 0.5) * scale
        lo = math.ceil(center - 0.5 - reach)
        hi = math.floor(center - 0.5 + reach)
        taps = np.arange(lo, hi + 1)
        w = np.array([kernel((x + 0.5 - center) / fs) for x in taps])
        keep = w != 0.0
        taps, w = taps[keep], w[keep]
        w = w / w.sum()
        rows.append(np.full(len(taps), i))
        cols.append(np.clip(taps, 0, n_in - 1))
        vals.append(w)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_out, n_in)
    )


@lru_cache(maxsize=256)
def triangle_weights(n_in: int, n_out: int) -> sparse.csr_matrix:
    return filter_weights(n_in, n_out, triangle_kernel, 1.0)


@lru_cache(maxsize=256)
def hamming_weights(n_in: int, n_out: int, support: float = 1.0) -> sparse.csr_matrix:
    return filter_weights(n_in, n_out, lambda x: hamming_kernel(x, support), support)


def _separable(img: np.ndarray, wy: sparse.csr_matrix, wx: sparse.csr_matrix) -> np.ndarray:
    tmp = wy @ img
    return np.asarray((wx @ tmp.T).T)


# ---------------------------------------------------------------------------
# resizers


def resize_nearest(img, out_h: int, out_w: int) -> np.ndarray:
    img = as_image(img)
    _check_extent(out_h, out_w)
    h, w = img.shape
    rows = nearest_weights(h, out_h).indices
    cols = nearest_weights(w, out_w).indices
    return img[np.ix_(rows, cols)].copy()


def resize_bilinear(img, out_h: int, out_w: int, submode: str = "antialiased") -> np.ndarray:
    img = as_image(img)
    _check_extent(out_h, out_w)
    h, w = img.shape
    if submode == "point":
        wy, wx = point_bilinear_weights(h, out_h), point_bilinear_weights(w, out_w)
    elif submode == "antialiased":
        wy, wx = triangle_weights(h, out_h), triangle_weights(w, out_w)
    else:
        raise ParameterError(f"bilinear submode must be one of {BILINEAR_SUBMODES}, got {submode!r}")
    return np.clip(_separable(img, wy, wx), 0.0, 1.0)


def resize_hamming(
    img, out_h: int, out_w: int, support: float = 1.0, clamp: bool = True
) -> np.ndarray:
    """Windowed-sinc resize; ``clamp=False`` exposes the raw filter output."""
    img = as_image(img)
    _check_extent(out_h, out_w)
    if support <= 0:
        raise ParameterError(f"Hamming support must be positive, got {support}")
    h, w = img.shape
    out = _separable(img, hamming_weights(h, out_h, support), hamming_weights(w, out_w, support))
    return np.clip(out, 0.0, 1.0) if clamp else out


def resize(img, out_h: int, out_w: int, method, submode: str = "antialiased") -> np.ndarray:
    method = InterpMethod(method) if not isinstance(method, InterpMethod) else method
    if method is InterpMethod.NEAREST:
        return resize_nearest(img, out_h, out_w)
    if method is InterpMethod.BILINEAR:
        return resize_bilinear(img, out_h, out_w, submode)
    return resize_hamming(img, out_h, out_w)


# ---------------------------------------------------------------------------
# resize policies

RESIZE_MODES = ("squish", "aspect_pad")


@dataclass(frozen=True)
class ResizePolicy:
    target_h: int
    target_w: int
    mode: str = "aspect_pad"
    pad_value: float = 1.0

    def __post_init__(self):
        if self.target_h < 1 or self.target_w < 1:
            raise ParameterError(f"target extents must be >= 1, got {self.target_h}x{self.target_w}")
        if self.mode not in RESIZE_MODES:
            raise ParameterError(f"resize mode must be one of {RESIZE_MODES}, got {self.mode!r}")
        if not 0.0 <= self.pad_value <= 1.0:
            raise ParameterError(f"pad_value must lie in [0, 1], got {self.pad_value}")

    @property
    def label(self) -> str:
        return f"{self.target_h}x{self.target_w}"

    @property
    def pixels(self) -> int:
        return self.target_h * self.target_w


# Resolution presets used in the experiments (H x W).
PRESETS = {
    "224x224": ResizePolicy(224, 224, "squish"),
    "352x144": ResizePolicy(352, 144, "aspect_pad"),
    "464x192": ResizePolicy(464, 192, "aspect_pad"),
    "928x384": ResizePolicy(928, 384, "aspect_pad"),
}


def parse_target(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ParameterError(f"target must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise ParameterError(f"target extents must be >= 1, got {text!r}")
    return h, w


def fitted_extent(h: int, w: int, policy: ResizePolicy) -> tuple[int, int]:
    """Content size after uniform scaling into the policy's target box."""
    s = min(policy.target_h / h, policy.target_w / w)
    new_h = min(policy.target_h, max(1, int(math.floor(h * s + 0.5))))
    new_w = min(policy.target_w, max(1, int(math.floor(w * s + 0.5))))
    return new_h, new_w


def apply_policy(img, policy: ResizePolicy, method, submode: str = "antialiased") -> np.ndarray:
    """Resize to exactly ``policy.target_h x policy.target_w``.

    ``squish`` scales each axis independently; ``aspect_pad`` scales
    uniformly to fit, centres the content and fills the rest with
    ``policy.pad_value``.
    """
    img = as_image(img)
    if policy.mode == "squish":
        return resize(img, policy.target_h, policy.target_w, method, submode)
    new_h, new_w = fitted_extent(*img.shape, policy)
    content = resize(img, new_h, new_w, method, submode)
    out = np.full((policy.target_h, policy.target_w), float(policy.pad_value))
    top = (policy.target_h - new_h) // 2
    left = (policy.target_w - new_w) // 2
    out[top : top + new_h, left : left + new_w] = content
    return out
