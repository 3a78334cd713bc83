"""Procedural image classification tasks for desk-scale transfer studies.

A pool of 30 glyph classes is rendered onto textured backgrounds. The
source task uses 10 of them and carries *context* cues: each source class
has a preferred background style and color family (70% reliable), so a
source model picks up both shape features and context features. The target
task uses the other 20 glyphs with fully randomized colors and backgrounds,
which makes the context features irrelevant (pure negative-transfer
material) while shape features remain the useful part.

Images are written as a plain class-directory tree, so the generated tasks
flow through the normal ingestion pipeline.
"""

from __future__ import annotations

import colorsys
import logging
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "SHAPE_NAMES",
    "SOURCE_SHAPE_IDS",
    "TARGET_SHAPE_IDS",
    "render_example",
    "write_split",
    "make_transfer_suite",
]

log = logging.getLogger(__name__)

IMAGE_SIZE = 48

SHAPE_NAMES = [
    "disk", "ring", "square", "frame", "diamond", "hollowdiamond",
    "triup", "tridown", "trileft", "triright", "plus", "saltire",
    "hbar", "vbar", "hbars2", "vbars2", "quadrants", "dots",
    "corner", "tee", "aitch", "cup", "zig", "halfdisk",
    "wedge", "crescent", "star4", "hourglass", "arrow", "stripe",
]

# every third glyph goes to the source task; the other 20 form the target pool
SOURCE_SHAPE_IDS = tuple(range(0, 30, 3))
TARGET_SHAPE_IDS = tuple(i for i in range(30) if i not in SOURCE_SHAPE_IDS)

_BG_STYLES = ("flat", "hgrad", "vgrad", "diag", "radial", "blobs")


def _shape_mask(shape_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean mask of a glyph in canonical [-1, 1]^2 coordinates."""
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    name = SHAPE_NAMES[shape_id]
    if name == "disk":
        return r < 0.8
    if name == "ring":
        return (r > 0.45) & (r < 0.8)
    if name == "square":
        return np.maximum(au, av) < 0.7
    if name == "frame":
        m = np.maximum(au, av)
        return (m > 0.42) & (m < 0.75)
    if name == "diamond":
        return au + av < 0.9
    if name == "hollowdiamond":
        return (au + av > 0.45) & (au + av < 0.9)
    if name == "triup":
        return (v > -0.8) & (v < 0.55) & (au < 0.6 * (v + 0.8))
    if name == "tridown":
        return (v < 0.8) & (v > -0.55) & (au < 0.6 * (0.8 - v))
    if name == "trileft":
        return (u > -0.8) & (u < 0.55) & (av < 0.6 * (u + 0.8))
    if name == "triright":
        return (u < 0.8) & (u > -0.55) & (av < 0.6 * (0.8 - u))
    if name == "plus":
        return ((au < 0.25) & (av < 0.8)) | ((av < 0.25) & (au < 0.8))
    if name == "saltire":
        return ((np.abs(u - v) < 0.28) | (np.abs(u + v) < 0.28)) & (np.maximum(au, av) < 0.8)
    if name == "hbar":
        return (av < 0.26) & (au < 0.85)
    if name == "vbar":
        return (au < 0.26) & (av < 0.85)
    if name == "hbars2":
        return ((np.abs(v - 0.42) < 0.17) | (np.abs(v + 0.42) < 0.17)) & (au < 0.8)
    if name == "vbars2":
        return ((np.abs(u - 0.42) < 0.17) | (np.abs(u + 0.42) < 0.17)) & (av < 0.8)
    if name == "quadrants":
        return ((u > 0) ^ (v > 0)) & (np.maximum(au, av) < 0.8)
    if name == "dots":
        m = np.zeros_like(u, dtype=bool)
        for cx in (-0.55, 0.0, 0.55):
            for cy in (-0.55, 0.0, 0.55):
                m |= (u - cx) ** 2 + (v - cy) ** 2 < 0.2**2
        return m
    if name == "corner":
        return (((u < -0.3) & (u > -0.8) & (av < 0.8))
                | ((v > 0.3) & (v < 0.8) & (au < 0.8)))
    if name == "tee":
        return (((v < -0.35) & (v > -0.8) & (au < 0.8))
                | ((au < 0.22) & (v >= -0.35) & (v < 0.8)))
    if name == "aitch":
        return (((np.abs(u - 0.5) < 0.18) | (np.abs(u + 0.5) < 0.18)) & (av < 0.8)) \
            | ((av < 0.18) & (au < 0.5))
    if name == "cup":
        return ((((np.abs(u - 0.5) < 0.18) | (np.abs(u + 0.5) < 0.18)) & (av < 0.8))
                | ((v > 0.45) & (v < 0.8) & (au < 0.6)))
    if name == "zig":
        return (((v < -0.45) & (v > -0.8) & (au < 0.8))
                | ((v > 0.45) & (v < 0.8) & (au < 0.8))
                | ((np.abs(u + 1.6 * v) < 0.3) & (au < 0.8) & (av < 0.5)))
    if name == "halfdisk":
        return (r < 0.8) & (v < 0)
    if name == "wedge":
        return (au < 0.8) & (av < 0.8) & (u + v < 0)
    if name == "crescent":
        return (r < 0.8) & ((u - 0.35) ** 2 + v**2 > 0.55**2)
    if name == "star4":
        return (au + av < 0.5) | ((au < 0.16) & (av < 0.95)) | ((av < 0.16) & (au < 0.95))
    if name == "hourglass":
        return (av < 0.75) & (au < 0.75 * av + 0.08)
    if name == "arrow":
        head = (v < -0.05) & (v > -0.85) & (au < 0.65 * (v + 0.85))
        stem = (au < 0.18) & (v >= -0.05) & (v < 0.8)
        return head | stem
    if name == "stripe":
        return np.abs(u - v) < 0.3
    raise ValueError(f"unknown shape id {shape_id}")


def _hsv(h: float, s: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, val))


def _background(style: str, hues: tuple[float, float], rng: np.random.Generator,
                size: int) -> np.ndarray:
    c0 = _hsv(hues[0], rng.uniform(0.25, 0.6), rng.uniform(0.35, 0.8))
    c1 = _hsv(hues[1], rng.uniform(0.25, 0.6), rng.uniform(0.35, 0.8))
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    if style == "flat":
        t = np.full((size, size), 0.5)
    elif style == "hgrad":
        t = xx
    elif style == "vgrad":
        t = yy
    elif style == "diag":
        t = (xx + yy) / 2
    elif style == "radial":
        t = np.hypot(xx - 0.5, yy - 0.5) * 1.6
    elif style == "blobs":
        coarse = rng.random((6, 6))
        t = np.array(Image.fromarray((coarse * 255).astype(np.uint8))
                     .resize((size, size), Image.BILINEAR)) / 255.0
    else:
        raise ValueError(f"unknown background style {style}")
    t = np.clip(t, 0, 1)[..., None]
    return c0 * (1 - t) + c1 * t


def render_example(shape_id: int, rng: np.random.Generator, *,
                   fg_hue: float | None = None, bg_style: str | None = None,
                   bg_hues: tuple[float, float] | None = None,
                   size: int = IMAGE_SIZE) -> np.ndarray:
    """One uint8 RGB image; unspecified appearance factors are drawn at random."""
    if fg_hue is None:
        fg_hue = rng.uniform(0, 1)
    if bg_style is None:
        bg_style = _BG_STYLES[rng.integers(len(_BG_STYLES))]
    if bg_hues is None:
        bg_hues = (rng.uniform(0, 1), rng.uniform(0, 1))

    img = _background(bg_style, bg_hues, rng, size)

    # jittered canonical frame: position, scale, small rotation
    cx, cy = rng.uniform(-0.12, 0.12, size=2)
    scale = rng.uniform(0.55, 0.75)
    theta = rng.uniform(-0.18, 0.18)
    yy, xx = np.mgrid[0:size, 0:size]
    u = (2 * xx / (size - 1) - 1 - cx) / scale
    v = (2 * yy / (size - 1) - 1 - cy) / scale
    ur = np.cos(theta) * u - np.sin(theta) * v
    vr = np.sin(theta) * u + np.cos(theta) * v
    mask = _shape_mask(shape_id, ur, vr)

    fg = _hsv(fg_hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0))
    shading = 0.85 + 0.3 * (vr + 1) / 2
    img = np.where(mask[..., None], fg * np.clip(shading, 0.6, 1.2)[..., None], img)
    img = img + rng.normal(0, 0.05, img.shape)
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)


def _class_hue(shape_id: int) -> float:
    return (0.13 + shape_id * 0.618034) % 1.0


def write_split(split_dir: str | Path, shape_ids, n_per_class: int, seed: int,
                context_cues: bool, split_code: int) -> Path:
    """Render one split as a class-directory tree.

    With ``context_cues`` on (source task), each class keeps a preferred
    foreground hue and a background style/color family that holds for 70%
    of its images; without (target task), every appearance factor except the
    glyph itself is random.
    """
    split_dir = Path(split_dir)
    for class_pos, sid in enumerate(sorted(shape_ids)):
        cdir = split_dir / f"c{sid:02d}_{SHAPE_NAMES[sid]}"
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, split_code, sid, i])
            kwargs = {}
            if context_cues:
                hue = _class_hue(sid)
                kwargs["fg_hue"] = hue + rng.uniform(-0.04, 0.04)
                if rng.random() < 0.7:
                    kwargs["bg_style"] = _BG_STYLES[class_pos % len(_BG_STYLES)]
                    kwargs["bg_hues"] = (hue + 0.45 + rng.uniform(-0.08, 0.08),
                                         hue + 0.55 + rng.uniform(-0.08, 0.08))
            img = render_example(sid, rng, **kwargs)
            Image.fromarray(img).save(cdir / f"{i:04d}.png")
    return split_dir


def make_transfer_suite(root: str | Path, *, n_source_train: int = 300,
                        n_source_test: int = 50, n_target_train: int = 30,
                        n_target_test: int = 20, seed: int = 0) -> dict:
    """Generate the full source/target benchmark pair under ``root``.

    Layout: ``root/{source,target}/{train,test}/<class>/<i>.png``. Splits
    use disjoint per-image seeds, so train and test never overlap.
    """
    root = Path(root)
    write_split(root / "source" / "train", SOURCE_SHAPE_IDS, n_source_train, seed,
                context_cues=True, split_code=0)
    write_split(root / "source" / "test", SOURCE_SHAPE_IDS, n_source_test, seed,
                context_cues=True, split_code=1)
    write_split(root / "target" / "train", TARGET_SHAPE_IDS, n_target_train, seed,
                context_cues=False, split_code=2)
    write_split(root / "target" / "test", TARGET_SHAPE_IDS, n_target_test, seed,
                context_cues=False, split_code=3)
    log.info("wrote transfer suite under %s", root)
    return {"source_root": str(root / "source"), "target_root": str(root / "target"),
            "n_source_classes": len(SOURCE_SHAPE_IDS),
            "n_target_classes": len(TARGET_SHAPE_IDS)}
