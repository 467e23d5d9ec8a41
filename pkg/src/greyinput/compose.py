"""Three-channel network inputs built from one greyscale image.

Each channel is the same source image resized with a different
interpolation method, stacked in R, G, B order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError
from .resample import InterpMethod, ResizePolicy, apply_policy, as_image

# The nine channel compositions that were evaluated, in table order.
CONFIG_CODES = (
    "B-B-B",
    "B-H-N",
    "B-N-H",
    "H-B-N",
    "H-H-H",
    "H-N-B",
    "N-B-H",
    "N-H-B",
    "N-N-N",
)

_LETTERS = {"B": InterpMethod.BILINEAR, "H": InterpMethod.HAMMING, "N": InterpMethod.NEAREST}


@dataclass(frozen=True)
class ChannelConfig:
    r: InterpMethod
    g: InterpMethod
    b: InterpMethod

    @property
    def methods(self) -> tuple[InterpMethod, InterpMethod, InterpMethod]:
        return (self.r, self.g, self.b)

    @property
    def code(self) -> str:
        return "-".join(m.letter for m in self.methods)

    @property
    def homogeneous(self) -> bool:
        return self.r == self.g == self.b

    def __str__(self) -> str:
        return self.code


def parse_config(code: str) -> ChannelConfig:
    """Parse a code such as ``"B-H-N"`` (red, green, blue)."""
    tokens = code.strip().upper().split("-")
    if len(tokens) != 3:
        raise ParseError(f"channel config {code!r} must have three '-'-separated tokens")
    for tok in tokens:
        if tok not in _LETTERS:
            raise ParseError(f"channel config {code!r}: unknown token {tok!r} (expected B, H or N)")
    canonical = "-".join(tokens)
    if canonical not in CONFIG_CODES:
        raise ParseError(
            f"channel config {canonical!r} is not one of the admissible compositions: "
            + ", ".join(CONFIG_CODES)
        )
    return ChannelConfig(*(_LETTERS[t] for t in tokens))


ALL_CONFIGS = tuple(parse_config(c) for c in CONFIG_CODES)


def compose(img, cfg: ChannelConfig | str, policy: ResizePolicy) -> np.ndarray:
    """Return a 3 x target_h x target_w array, one resized copy per channel."""
    if isinstance(cfg, str):
        cfg = parse_config(cfg)
    img = as_image(img)
    cache: dict[InterpMethod, np.ndarray] = {}
    channels = []
    for method in cfg.methods:
        if method not in cache:
            cache[method] = apply_policy(img, policy, method)
        channels.append(cache[method])
    return np.stack(channels)


def compose_batch(images, cfg: ChannelConfig | str, policy: ResizePolicy) -> np.ndarray:
    """Stack ``compose`` over a sequence of images into B x 3 x H x W."""
    if isinstance(cfg, str):
        cfg = parse_config(cfg)
    return np.stack([compose(im, cfg, policy) for im in images])
