"""Binary greyscale PGM (P5) reading and writing.

Images are float arrays in [0, 1]; they are quantised to 8 bits on write
and dequantised on read.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError, ParseError


def quantize(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"PGM images are 2-D, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("image contains non-finite values")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(img: np.ndarray) -> bytes:
    q = img if (isinstance(img, np.ndarray) and img.dtype == np.uint8) else quantize(img)
    if q.ndim != 2:
        raise DataError(f"PGM images are 2-D, got shape {q.shape}")
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_pgm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))


def _tokens(buf: bytes, start: int, count: int) -> tuple[list[tuple[int, int]], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments.

    Returns (value, offset) pairs and the offset just past the last token.
    """
    out = []
    i, n = start, len(buf)
    while len(out) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise ParseError(f"truncated PGM header at byte {i}")
        j = i
        while j < n and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
            j += 1
        tok = buf[i:j]
        if not tok.isdigit():
            raise ParseError(f"expected a decimal integer at byte {i}, found {tok[:16]!r}")
        out.append((int(tok), i))
        i = j
    return out, i


def decode_pgm_uint8(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise ParseError(f"bad magic number {buf[:2]!r} at byte 0; expected b'P5'")
    header, end = _tokens(buf, 2, 3)
    (w, w_at), (h, h_at), (maxval, m_at) = header
    if w < 1:
        raise ParseError(f"width must be >= 1 at byte {w_at}")
    if h < 1:
        raise ParseError(f"height must be >= 1 at byte {h_at}")
    if not 0 < maxval < 256:
        raise ParseError(f"only 8-bit PGM is supported; maxval {maxval} at byte {m_at}")
    if end >= len(buf) or not buf[end : end + 1].isspace():
        raise ParseError(f"missing whitespace after header at byte {end}")
    start = end + 1
    need = w * h
    if len(buf) - start < need:
        raise ParseError(f"pixel data truncated at byte {len(buf)}: need {need} bytes from byte {start}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(h, w)
    if maxval != 255:
        if data.max(initial=0) > maxval:
            bad = start + int(np.argmax(data.ravel() > maxval))
            raise ParseError(f"pixel value exceeds maxval {maxval} at byte {bad}")
        data = np.round(data.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return data.copy()


def read_pgm_uint8(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        return decode_pgm_uint8(buf)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None


def read_pgm(path) -> np.ndarray:
    return read_pgm_uint8(path) / 255.0
