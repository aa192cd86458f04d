"""Synthetic stand-in corpora for fully offline runs.

When the raw MNIST / EMNIST / CIFAR-10 files are absent from the cache and no
mirror is reachable, the loaders in :mod:`mechknow.data` fall back to the
generators here: font-rendered glyphs with randomized geometry stand in for
the digit and letter sets, procedural color textures stand in for CIFAR-10.
The corpora keep every experiment runnable end to end; they are stand-ins,
not the original benchmarks, and results on them are labeled as such.

All generators are deterministic given a seed.
"""

from __future__ import annotations

import glob
import math
import os

import numpy as np
from PIL import Image, ImageDraw, ImageFont

_HI = 4  # supersampling factor for glyph rendering


def _font_pool() -> list[str]:
    """Bundled TTF files that contain latin digits and letters."""
    import matplotlib

    root = os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf")
    names = sorted(glob.glob(os.path.join(root, "DejaVu*.ttf")))
    names += sorted(glob.glob(os.path.join(root, "STIXGeneral*.ttf")))
    for cm in ("cmr10.ttf", "cmb10.ttf", "cmss10.ttf", "cmtt10.ttf"):
        p = os.path.join(root, cm)
        if os.path.exists(p):
            names.append(p)
    if not names:
        raise RuntimeError("no usable fonts found under %s" % root)
    return names


_FONTS: list[str] | None = None


def _fonts() -> list[str]:
    global _FONTS
    if _FONTS is None:
        _FONTS = _font_pool()
    return _FONTS


def _sample_field(img: np.ndarray, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
    # bilinear gather with zero fill, single channel
    h, w = img.shape
    r0 = np.floor(rr).astype(np.int64)
    c0 = np.floor(cc).astype(np.int64)
    fr, fc = rr - r0, cc - c0
    out = np.zeros(rr.shape, dtype=np.float64)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ri, ci = r0 + dr, c0 + dc
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        out[ok] += wgt[ok] * img[ri[ok], ci[ok]]
    return out


def _elastic(img: np.ndarray, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Coarse-grid elastic warp. Amplitude in pixels of `img`."""
    h, w = img.shape
    grid = rng.uniform(-amplitude, amplitude, size=(2, 3, 3))
    gr = np.array(Image.fromarray(grid[0]).resize((w, h), Image.BILINEAR))
    gc = np.array(Image.fromarray(grid[1]).resize((w, h), Image.BILINEAR))
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    return _sample_field(img, rr + gr, cc + gc)


def _render_glyph(char: str, rng: np.random.Generator, size: int) -> np.ndarray:
    """One white-on-black glyph image (size, size) in [0,1] with random style."""
    hi = size * _HI
    font_path = _fonts()[rng.integers(0, len(_fonts()))]
    px = int(rng.uniform(0.55, 0.82) * hi)
    font = ImageFont.truetype(font_path, px)
    canvas = Image.new("L", (hi, hi), 0)
    draw = ImageDraw.Draw(canvas)
    # outline stroke keeps downsampled strokes 2-3 px thick, like handwriting
    sw = int(rng.integers(1, 4))
    draw.text((hi / 2, hi / 2), char, fill=255, font=font, anchor="mm",
              stroke_width=sw, stroke_fill=255)

    # small affine jitter about the center: shear, rotation, offset
    shear = rng.uniform(-0.25, 0.25)
    rot = math.radians(rng.uniform(-8.0, 8.0))
    dx, dy = rng.uniform(-1.5, 1.5, size=2) * _HI
    c = (hi - 1) / 2.0
    fwd = np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]]) @ np.array(
        [[1.0, shear], [0.0, 1.0]]
    )
    inv = np.linalg.inv(fwd)
    # PIL AFFINE maps output (x, y) to input coordinates
    a, b = inv[0]
    d, e = inv[1]
    cm = c - a * (c + dx) - b * (c + dy)
    fm = c - d * (c + dx) - e * (c + dy)
    canvas = canvas.transform((hi, hi), Image.AFFINE, (a, b, cm, d, e, fm), resample=Image.BILINEAR)

    arr = np.asarray(canvas, dtype=np.float64) / 255.0
    arr = _elastic(arr, rng, amplitude=0.09 * hi)
    out = Image.fromarray((np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)).resize(
        (size, size), Image.LANCZOS
    )
    img = np.asarray(out, dtype=np.float32) / 255.0
    img *= rng.uniform(0.85, 1.0)
    return np.clip(img, 0.0, 1.0)


def make_glyph_corpus(
    alphabet: list[str], n: int, seed: int, size: int = 28
) -> tuple[np.ndarray, np.ndarray]:
    """n glyph images drawn round-robin over `alphabet` (balanced classes)."""
    rng = np.random.default_rng(seed)
    xs = np.empty((n, size, size, 1), dtype=np.float32)
    ys = np.empty(n, dtype=np.int64)
    order = np.arange(n) % len(alphabet)
    rng.shuffle(order)
    for i, cls in enumerate(order):
        xs[i, :, :, 0] = _render_glyph(alphabet[cls], rng, size)
        ys[i] = cls
    return xs, ys


def make_digit_corpus(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    return make_glyph_corpus([str(d) for d in range(10)], n, seed, size)


def make_letter_corpus(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """26-class letter images; mixes upper and lower case within a class."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    upper = [chr(ord("A") + i) for i in range(26)]
    lower = [chr(ord("a") + i) for i in range(26)]
    xs, ys = make_glyph_corpus(upper, n, seed, size)
    # redraw roughly half in lower case for case diversity
    redraw = rng.random(n) < 0.5
    for i in np.nonzero(redraw)[0]:
        xs[i, :, :, 0] = _render_glyph(lower[ys[i]], rng, size)
    return xs, ys


def _grating(size: int, angle: float, freq: float, phase: float) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    t = cc * math.cos(angle) + rr * math.sin(angle)
    return 0.5 + 0.45 * np.sin(2 * math.pi * freq * t / size + phase)


def _texture(cls: int, rng: np.random.Generator, size: int) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    if cls == 0:
        pat = _grating(size, 0.0, rng.uniform(3, 5), rng.uniform(0, 2 * math.pi))
    elif cls == 1:
        pat = _grating(size, math.pi / 2, rng.uniform(3, 5), rng.uniform(0, 2 * math.pi))
    elif cls == 2:
        pat = _grating(size, math.pi / 4, rng.uniform(3, 5), rng.uniform(0, 2 * math.pi))
    elif cls == 3:
        cell = rng.integers(3, 7)
        off = rng.integers(0, cell, size=2)
        pat = ((((rr + off[0]) // cell) + ((cc + off[1]) // cell)) % 2).astype(np.float64)
    elif cls == 4:
        cy, cx = (size - 1) / 2 + rng.uniform(-4, 4, size=2)
        rad = np.sqrt((rr - cy) ** 2 + (cc - cx) ** 2)
        pat = 0.5 + 0.45 * np.sin(2 * math.pi * rng.uniform(3, 5) * rad / size)
    elif cls == 5:
        cy, cx = (size - 1) / 2 + rng.uniform(-3, 3, size=2)
        ang = np.arctan2(rr - cy, cc - cx)
        pat = 0.5 + 0.45 * np.sin(rng.integers(4, 9) * ang + rng.uniform(0, 2 * math.pi))
    elif cls == 6:
        pat = np.zeros((size, size))
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(6, size - 6, size=2)
            s2 = rng.uniform(3, 6) ** 2
            pat += np.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / (2 * s2))
        pat = np.clip(pat, 0, 1)
    elif cls == 7:
        pat = np.full((size, size), 0.15)
        for _ in range(rng.integers(3, 7)):
            r0, c0 = rng.integers(0, size - 6, size=2)
            h, w = rng.integers(4, 14, size=2)
            pat[r0 : r0 + h, c0 : c0 + w] = rng.uniform(0.4, 1.0)
    elif cls == 8:
        noise = rng.random((size + 4, size + 4))
        k = np.ones((5, 5)) / 25.0
        pat = np.zeros((size, size))
        for i in range(size):
            for j in range(size):
                pat[i, j] = (noise[i : i + 5, j : j + 5] * k).sum()
        pat = (pat - pat.min()) / (pat.max() - pat.min() + 1e-9)
    elif cls == 9:
        pat = _grating(size, -math.pi / 4, rng.uniform(3, 5), rng.uniform(0, 2 * math.pi))
    else:
        raise ValueError(f"texture class out of range: {cls}")
    return pat


# one base tint per class, jittered per sample so color alone is not enough
_TINTS = np.array(
    [
        [0.9, 0.3, 0.3],
        [0.3, 0.9, 0.3],
        [0.3, 0.4, 0.9],
        [0.9, 0.8, 0.3],
        [0.8, 0.3, 0.8],
        [0.3, 0.85, 0.85],
        [0.95, 0.6, 0.3],
        [0.6, 0.6, 0.9],
        [0.75, 0.75, 0.75],
        [0.5, 0.9, 0.6],
    ]
)


def make_texture_corpus(n: int, seed: int, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """10-class procedural color textures (gratings, cells, blobs, noise)."""
    rng = np.random.default_rng(seed)
    xs = np.empty((n, size, size, 3), dtype=np.float32)
    ys = np.empty(n, dtype=np.int64)
    order = np.arange(n) % 10
    rng.shuffle(order)
    for i, cls in enumerate(order):
        pat = _texture(int(cls), rng, size)
        tint = np.clip(_TINTS[cls] + rng.uniform(-0.15, 0.15, size=3), 0.1, 1.0)
        img = pat[..., None] * tint[None, None, :]
        img = img + rng.normal(0.0, 0.02, size=img.shape)
        xs[i] = np.clip(img, 0.0, 1.0).astype(np.float32)
        ys[i] = cls
    return xs, ys
