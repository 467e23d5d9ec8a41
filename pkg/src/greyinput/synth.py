"""Deterministic synthetic multi-label dataset of the 17 descriptor shapes.

Each sample is a tall light canvas with one to five dark stamps, one per
descriptor class, placed without overlapping.  Stamp classes are allotted
across the whole dataset by largest remainder, so the label frequencies
track the class mix closely instead of only in expectation.  Every sample
is then rendered from its own derived seed.
"""

from __future__ import annotations

import csv
import json
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .descriptors import CODES, INDEX, PARENT, close_labels, to_vector
from .errors import DataError, ParameterError
from .pgm import write_pgm

log = logging.getLogger(__name__)

CANVAS = (1048, 400)  # H x W
STAMP_SIZE = (90, 160)
STAMPS_PER_SAMPLE = (1, 2, 3, 4, 5)
STAMP_COUNT_PROBS = (0.02, 0.08, 0.2, 0.3, 0.4)
MANIFEST_FIELDS = ("filename", "labels", "seed")
SUPERSAMPLE = 2

# Relative label frequencies, skewed in the way real descriptor counts are.
DEFAULT_MIX = {
    "D01": 0.11, "D01-01": 0.04, "D01-02": 0.045, "D02": 0.10, "D02-01": 0.04,
    "D03": 0.055, "D04": 0.085, "D05": 0.04, "D06": 0.05, "D07": 0.08, "D08": 0.05,
    "D09": 0.055, "D10": 0.05, "D11": 0.05, "D12": 0.05, "D13": 0.05, "D14": 0.04,
}

_FAMILY = {code: PARENT.get(code, code) for code in CODES}


@dataclass(frozen=True)
class StampRecord:
    code: str
    top: int
    left: int
    size: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"code": self.code, "top": self.top, "left": self.left, "size": self.size, "params": self.params}


@dataclass
class SyntheticSample:
    pixels: np.ndarray  # uint8, H x W
    labels: tuple[str, ...]
    seed: int
    provenance: list[StampRecord]
    filename: str = ""

    @property
    def image(self) -> np.ndarray:
        return self.pixels / 255.0

    @property
    def label_vector(self) -> np.ndarray:
        return to_vector(self.labels)


@dataclass
class SyntheticDataset:
    samples: list[SyntheticSample]
    manifest: list[tuple[str, str, int]]
    regenerated: list[int]

    def label_counts(self) -> np.ndarray:
        return np.sum([s.label_vector for s in self.samples], axis=0)


# ---------------------------------------------------------------------------
# stamp renderers
#
# Each renderer draws into a supersampled greyscale PIL image (255 = paper)
# using ``ink`` for dark marks and returns a dict of parameters for the
# provenance record.


def _rotate(points, angle, centre):
    c, s = np.cos(angle), np.sin(angle)
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return [(centre + c * a - s * b, centre + s * a + c * b) for a, b in zip(x, y)]


def _ellipse_points(rx, ry, n=72):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.c_[rx * np.cos(t), ry * np.sin(t)]


def _regular_polygon(k, r, phase):
    t = phase + 2 * np.pi * np.arange(k) / k
    return np.c_[r * np.cos(t), r * np.sin(t)]


def _bar(draw, s, rng, ink, width):
    length = rng.uniform(0.75, 0.95) * s
    thick = rng.uniform(0.12, 0.22) * s
    angle = rng.uniform(0, np.pi)
    box = [(-length / 2, -thick / 2), (length / 2, -thick / 2), (length / 2, thick / 2), (-length / 2, thick / 2)]
    draw.polygon(_rotate(box, angle, s / 2), fill=ink)
    return {"length": round(length), "thickness": round(thick), "angle": round(float(angle), 4)}


def _wavy(draw, s, rng, ink, width):
    length = rng.uniform(0.8, 0.95) * s
    amp = rng.uniform(0.14, 0.2) * s
    cycles = rng.uniform(1.5, 2.5)
    angle = rng.uniform(0, np.pi)
    x = np.linspace(-length / 2, length / 2, 80)
    y = amp * np.sin(2 * np.pi * cycles * x / length + rng.uniform(0, 2 * np.pi))
    draw.line(_rotate(np.c_[x, y], angle, s / 2), fill=ink, width=width, joint="curve")
    return {"cycles": round(float(cycles), 3), "amplitude": round(amp), "angle": round(float(angle), 4)}


def _curved(draw, s, rng, ink, width):
    length = rng.uniform(0.75, 0.9) * s
    bend = rng.uniform(0.2, 0.3) * s
    angle = rng.uniform(0, 2 * np.pi)
    x = np.linspace(-length / 2, length / 2, 60)
    y = bend * (1 - (2 * x / length) ** 2) - bend / 2
    draw.line(_rotate(np.c_[x, y], angle, s / 2), fill=ink, width=width, joint="curve")
    return {"bend": round(bend), "angle": round(float(angle), 4)}


def _oval(draw, s, rng, ink, width):
    rx = rng.uniform(0.3, 0.45) * s
    ry = rx * rng.uniform(0.6, 1.0)
    angle = rng.uniform(0, np.pi)
    draw.polygon(_rotate(_ellipse_points(rx, ry), angle, s / 2), fill=ink)
    return {"rx": round(rx), "ry": round(ry), "angle": round(float(angle), 4)}


def _target(draw, s, rng, ink, width):
    rings = int(rng.integers(2, 4))
    outer = rng.uniform(0.38, 0.46) * s
    c = s / 2
    for i in range(rings):
        r = outer * (1 - i / (rings + 0.5))
        draw.ellipse([c - r, c - r, c + r, c + r], outline=ink, width=width)
    dot = outer / (rings + 1.5)
    draw.ellipse([c - dot, c - dot, c + dot, c + dot], fill=ink)
    return {"rings": rings, "outer": round(outer)}


def _polygon(k):
    def render(draw, s, rng, ink, width):
        r = rng.uniform(0.35, 0.45) * s
        pts = _regular_polygon(k, r, rng.uniform(0, 2 * np.pi))
        # jitter each vertex by up to 3% of the radius; more than that blurs
        # the corner angles that tell 4, 5 and 6 sides apart
        pts = pts + rng.uniform(-0.03, 0.03, size=pts.shape) * r
        draw.polygon([(s / 2 + a, s / 2 + b) for a, b in pts], fill=ink)
        return {"vertices": k, "radius": round(r)}

    return render


def _star(draw, s, rng, ink, width):
    points = int(rng.integers(7, 11))
    outer = rng.uniform(0.38, 0.46) * s
    inner = outer * rng.uniform(0.4, 0.6)
    t = rng.uniform(0, 2 * np.pi) + np.pi * np.arange(2 * points) / points
    r = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    draw.polygon([(s / 2 + a, s / 2 + b) for a, b in np.c_[r * np.cos(t), r * np.sin(t)]], fill=ink)
    return {"points": points}


def _zigzag(draw, s, rng, ink, width):
    turns = int(rng.integers(4, 8))
    length = rng.uniform(0.8, 0.95) * s
    amp = rng.uniform(0.12, 0.2) * s
    angle = rng.uniform(0, np.pi)
    x = np.linspace(-length / 2, length / 2, turns + 1)
    y = np.where(np.arange(turns + 1) % 2 == 0, amp, -amp) / 2
    draw.line(_rotate(np.c_[x, y], angle, s / 2), fill=ink, width=width)
    return {"turns": turns, "angle": round(float(angle), 4)}


_GLYPHS = string.ascii_uppercase + string.digits


def _font(size):
    return ImageFont.load_default(size)


def _text_image(text, font_size, ink):
    font = _font(font_size)
    x0, y0, x1, y1 = font.getbbox(text)
    stroke = max(1, font_size // 14)
    pad = 4 + stroke
    img = Image.new("L", (x1 - x0 + 2 * pad, y1 - y0 + 2 * pad), 255)
    ImageDraw.Draw(img).text((pad - x0, pad - y0), text, fill=ink, font=font, stroke_width=stroke, stroke_fill=ink)
    return img


def _text(img, draw, s, rng, ink, width):
    text = "".join(rng.choice(list(_GLYPHS), size=int(rng.integers(3, 6))))
    size = int(0.45 * s)
    while size > 8:
        label = _text_image(text, size, ink)
        if label.width <= 0.92 * s:
            break
        size -= 2
    angle = float(rng.uniform(-30, 30))
    label = label.rotate(angle, resample=Image.BILINEAR, expand=True, fillcolor=255)
    scale = min(1.0, 0.95 * s / max(label.size))
    if scale < 1.0:
        label = label.resize((max(1, int(label.width * scale)), max(1, int(label.height * scale))), Image.BILINEAR)
    img.paste(Image.fromarray(np.minimum(
        np.asarray(img.crop(_centre_box(s, label.size))), np.asarray(label))), _centre_box(s, label.size)[:2])
    return {"text": text, "font_size": size, "angle": round(angle, 2)}


def _centre_box(s, size):
    w, h = size
    left, top = (s - w) // 2, (s - h) // 2
    return (left, top, left + w, top + h)


def _emblem(img, draw, s, rng, ink, width):
    base = rng.uniform(0.3, 0.42) * s
    t = np.linspace(0, 2 * np.pi, 120, endpoint=False)
    r = np.full_like(t, base)
    # a few pronounced lobes give concave outline stretches that ovals lack
    lobes = int(rng.integers(3, 6))
    r += base * rng.uniform(0.18, 0.28) * np.cos(lobes * t + rng.uniform(0, 2 * np.pi))
    draw.polygon([(s / 2 + a, s / 2 + b) for a, b in np.c_[r * np.cos(t), r * np.sin(t)]], fill=ink)
    glyph = ""
    if rng.random() < 0.5:
        glyph = str(rng.choice(list(string.ascii_uppercase)))
        font = _font(int(base * 0.9))
        x0, y0, x1, y1 = font.getbbox(glyph)
        draw.text((s / 2 - (x0 + x1) / 2, s / 2 - (y0 + y1) / 2), glyph, fill=255, font=font)
    return {"glyph": glyph, "radius": round(base), "lobes": lobes}


def _lattice(draw, s, rng, ink, width):
    period = rng.uniform(0.12, 0.18) * s
    cell = period * rng.uniform(0.45, 0.65)
    angle = rng.uniform(0, np.pi / 2)
    half = 0.42 * s
    n = int(np.ceil(2 * half / period)) + 2
    offsets = (np.arange(n) - (n - 1) / 2) * period
    for a in offsets:
        for b in offsets:
            if abs(a) + cell / 2 > half * 1.2 or abs(b) + cell / 2 > half * 1.2:
                continue
            sq = [(a - cell / 2, b - cell / 2), (a + cell / 2, b - cell / 2),
                  (a + cell / 2, b + cell / 2), (a - cell / 2, b + cell / 2)]
            pts = _rotate(sq, angle, s / 2)
            if all(0 <= x < s and 0 <= y < s for x, y in pts):
                draw.polygon(pts, fill=ink)
    return {"period": round(period), "angle": round(float(angle), 4)}


def _noise(img, draw, s, rng, ink, width):
    grain = int(rng.integers(2, 5)) * SUPERSAMPLE
    side = int(rng.uniform(0.7, 0.9) * s) // grain * grain
    cells = rng.random((side // grain, side // grain)) < rng.uniform(0.35, 0.55)
    patch = np.where(np.kron(cells, np.ones((grain, grain), dtype=bool)), ink, 255).astype(np.uint8)
    left, top = (s - side) // 2, (s - side) // 2
    img.paste(Image.fromarray(patch), (left, top))
    return {"grain": grain // SUPERSAMPLE, "side": side // SUPERSAMPLE}


def _hollow(draw, s, rng, ink, width):
    k = int(rng.integers(4, 7))
    r = rng.uniform(0.35, 0.45) * s
    pts = _regular_polygon(k, r, rng.uniform(0, 2 * np.pi))
    pts = [(s / 2 + a, s / 2 + b) for a, b in pts]
    draw.line(pts + [pts[0], pts[1]], fill=ink, width=width, joint="curve")
    return {"sides": k}


def _plain(img, draw, s, rng, ink, width):
    # a plain contact area: one uniform grey slab, no pattern
    grey = int(rng.integers(110, 150))
    # aligned to the supersampling grid so the slab stays exactly uniform
    n = s // SUPERSAMPLE
    side = int(rng.uniform(0.7, 0.95) * n)
    left = (n - side) // 2 * SUPERSAMPLE
    draw.rectangle([left, left, left + side * SUPERSAMPLE - 1, left + side * SUPERSAMPLE - 1], fill=grey)
    return {"grey": grey, "side": side}


def _simple(fn):
    return lambda img, draw, s, rng, ink, width: fn(draw, s, rng, ink, width)


RENDERERS: dict[str, Callable] = {
    "D01": _simple(_bar),
    "D01-01": _simple(_wavy),
    "D01-02": _simple(_curved),
    "D02": _simple(_oval),
    "D02-01": _simple(_target),
    "D03": _simple(_polygon(3)),
    "D04": _simple(_polygon(4)),
    "D05": _simple(_polygon(5)),
    "D06": _simple(_polygon(6)),
    "D07": _simple(_star),
    "D08": _simple(_zigzag),
    "D09": _text,
    "D10": _emblem,
    "D11": _simple(_lattice),
    "D12": _noise,
    "D13": _simple(_hollow),
    "D14": _plain,
}


def render_shape(code: str, rng: np.random.Generator, size: int | None = None) -> tuple[np.ndarray, dict]:
    """Render one stamp of class ``code`` as a size x size uint8 patch (255 = paper)."""
    if code not in RENDERERS:
        raise ParameterError(f"unknown descriptor code {code!r}")
    if size is None:
        size = int(rng.integers(STAMP_SIZE[0], STAMP_SIZE[1] + 1))
    s = size * SUPERSAMPLE
    img = Image.new("L", (s, s), 255)
    draw = ImageDraw.Draw(img)
    ink = int(rng.integers(0, 40))
    width = int(rng.uniform(0.06, 0.1) * s)
    params = RENDERERS[code](img, draw, s, rng, ink, width)
    params["ink"] = ink
    stamp = np.asarray(img.resize((size, size), Image.BOX), dtype=np.uint8)
    return stamp, params


# ---------------------------------------------------------------------------
# dataset generation


def stamp_weights(mix: dict) -> dict:
    """Per-stamp class probabilities that give label frequencies ``mix``.

    A subcategory stamp also yields its parent label, so a parent's own
    stamp share is its label share minus its children's.
    """
    mix = _check_mix(mix)
    q = dict(mix)
    for child, parent in PARENT.items():
        q[parent] -= mix[child]
    if min(q.values()) <= 0:
        raise ParameterError("a parent class needs a larger share than its subcategories combined")
    total = sum(q.values())
    return {c: q[c] / total for c in CODES}


def _check_mix(mix) -> dict:
    if set(mix) != set(CODES):
        missing = sorted(set(CODES) - set(mix)) or sorted(set(mix) - set(CODES))
        raise ParameterError(f"class mix must cover exactly the 17 codes; mismatch at {missing}")
    vals = np.array([mix[c] for c in CODES], dtype=np.float64)
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        raise ParameterError("class mix shares must be finite and positive")
    return {c: float(v / vals.sum()) for c, v in zip(CODES, vals)}


def _largest_remainder(weights: dict, total: int) -> dict:
    raw = np.array([weights[c] for c in CODES]) * total
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return dict(zip(CODES, counts.tolist()))


def plan_dataset(n: int, seed: int, mix: dict | None = None) -> list[list[str]]:
    """Stamp classes for each of ``n`` samples.

    No sample holds two classes of the same family (a class, its parent
    or its siblings), so every stamp adds exactly one distinct label.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    slots = rng.choice(STAMPS_PER_SAMPLE, size=n, p=STAMP_COUNT_PROBS)
    counts = _largest_remainder(stamp_weights(mix or DEFAULT_MIX), int(slots.sum()))
    pool = [c for c in CODES for _ in range(counts[c])]
    pool = [pool[i] for i in rng.permutation(len(pool))]
    plan = []
    for k in slots:
        chosen: list[str] = []
        families: set[str] = set()
        for _ in range(k):
            pick = next((j for j, c in enumerate(pool) if _FAMILY[c] not in families), None)
            if pick is None:
                break
            code = pool.pop(pick)
            chosen.append(code)
            families.add(_FAMILY[code])
        plan.append(chosen)
    return plan


def _sample_seed(seed: int, index: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed), 2, index, attempt]).generate_state(1)[0])


def _overlaps(box, boxes, margin=4) -> bool:
    t, l, s = box
    return any(t < t2 + s2 + margin and t2 < t + s + margin and l < l2 + s2 + margin and l2 < l + s + margin
               for t2, l2, s2 in boxes)


def render_sample(codes, sample_seed: int, canvas=CANVAS, max_tries: int = 200):
    """Render one canvas; returns None when a stamp cannot be placed."""
    rng = np.random.default_rng(sample_seed)
    h, w = canvas
    pixels = np.full((h, w), 255, dtype=np.uint8)
    boxes, records = [], []
    for code in codes:
        stamp, params = render_shape(code, rng)
        size = stamp.shape[0]
        if size > min(h, w):
            return None
        for _ in range(max_tries):
            top, left = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
            if not _overlaps((top, left, size), boxes):
                break
        else:
            return None
        boxes.append((top, left, size))
        region = pixels[top : top + size, left : left + size]
        np.minimum(region, stamp, out=region)
        records.append(StampRecord(code, top, left, size, params))
    return pixels, records


def labels_from_provenance(records) -> tuple[str, ...]:
    return tuple(close_labels(r.code for r in records))


def generate_dataset(n: int, seed: int, class_mix: dict | None = None, out_dir=None,
                     canvas=CANVAS, max_attempts: int = 20) -> SyntheticDataset:
    """Render ``n`` samples; when ``out_dir`` is given also write PGMs,
    ``manifest.csv`` and ``provenance.jsonl`` there."""
    if canvas[0] < STAMP_SIZE[1] or canvas[1] < STAMP_SIZE[1]:
        raise ParameterError(f"canvas {canvas} is smaller than the largest stamp {STAMP_SIZE[1]}")
    plan = plan_dataset(n, seed, class_mix)
    width = max(5, len(str(n - 1)))
    samples, regenerated = [], []
    for i, codes in enumerate(plan):
        for attempt in range(max_attempts):
            sample_seed = _sample_seed(seed, i, attempt)
            result = render_sample(codes, sample_seed, canvas)
            if result is not None:
                break
            log.info("sample %d: placement failed, regenerating with a derived seed", i)
        else:
            raise DataError(f"sample {i}: could not place stamps {codes} after {max_attempts} attempts")
        if attempt:
            regenerated.append(i)
        pixels, records = result
        samples.append(SyntheticSample(pixels, labels_from_provenance(records), sample_seed, records,
                                       f"sample_{i:0{width}d}.pgm"))
    manifest = [(s.filename, ";".join(s.labels), s.seed) for s in samples]
    dataset = SyntheticDataset(samples, manifest, regenerated)
    if out_dir is not None:
        write_dataset(dataset, out_dir)
    return dataset


def write_dataset(dataset: SyntheticDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        write_pgm(out / s.filename, s.pixels)
    path = out / "manifest.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        w.writerows(dataset.manifest)
    with open(out / "provenance.jsonl", "w") as fh:
        for s in dataset.samples:
            fh.write(json.dumps({"filename": s.filename, "stamps": [r.to_dict() for r in s.provenance]},
                                sort_keys=True) + "\n")
    return path


def read_manifest(path) -> list[tuple[str, tuple[str, ...], int]]:
    """Rows of (filename, labels, seed); labels are validated and closed."""
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_FIELDS:
            raise DataError(f"{path}: expected header {','.join(MANIFEST_FIELDS)}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{path}:{line_no}: expected 3 fields, got {len(row)}")
            name, labels, seed = row
            codes = [c for c in labels.split(";") if c]
            bad = [c for c in codes if c not in INDEX]
            if bad:
                raise DataError(f"{path}:{line_no}: unknown descriptor code {bad[0]!r}")
            rows.append((name, tuple(close_labels(codes)), int(seed)))
    return rows


def label_frequencies(label_sets) -> dict:
    """Share of all label occurrences held by each class."""
    counts = np.sum([to_vector(ls) for ls in label_sets], axis=0)
    return dict(zip(CODES, (counts / counts.sum()).tolist()))
