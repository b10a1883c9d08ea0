"""Procedural captioned corpus of coloured shapes in simple scenes.

Captions describe the scene and leave one ``{}`` slot for the subject's class
word, so the same records serve pretraining (slot filled with the class) and
personalization (slot filled with an identifier).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from aptdiff.cond import ManifestRecord, fill_template, read_manifest, write_manifest

SHAPES = ("circle", "square", "triangle", "diamond")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.65, 0.2),
    "blue": (0.15, 0.3, 0.85),
    "yellow": (0.95, 0.85, 0.2),
    "white": (0.95, 0.95, 0.95),
    "purple": (0.55, 0.2, 0.7),
}
# (sky colour, ground colour); "night" and "room" are uniform-ish
SCENES = {
    "field": ((0.45, 0.7, 0.95), (0.3, 0.6, 0.25)),
    "desert": ((0.7, 0.8, 0.95), (0.85, 0.7, 0.45)),
    "night": ((0.05, 0.05, 0.2), (0.1, 0.1, 0.25)),
    "snow": ((0.75, 0.8, 0.85), (0.95, 0.95, 0.97)),
    "sunset": ((0.95, 0.55, 0.3), (0.35, 0.2, 0.4)),
}
SIZES = ("small", "large")
FILLER = ("a", "photo", "of", "in", "the")
PERSONAL_TEMPLATES = tuple(f"a photo of {{}} in the {scene}" for scene in SCENES)


def vocabulary_words() -> list[str]:
    return list(FILLER) + list(SIZES) + list(COLORS) + list(SHAPES) + list(SCENES)


@dataclass
class Corpus:
    images: torch.Tensor  # (N, 3, S, S) in [-1, 1]
    templates: list[str]
    class_words: list[str]

    def __len__(self):
        return self.images.shape[0]

    def captions(self) -> list[str]:
        return [fill_template(t, c) for t, c in zip(self.templates, self.class_words)]


def _scene(rng: np.random.Generator, size: int, scene: str) -> np.ndarray:
    sky, ground = (np.array(c) for c in SCENES[scene])
    horizon = rng.integers(size * 3 // 8, size * 5 // 8 + 1)
    ys = np.arange(size)[:, None, None]
    img = np.where(ys < horizon, sky, ground) * np.ones((size, size, 3))
    shade = 1.0 + 0.08 * (ys / size - 0.5)
    return np.clip(img * shade, 0.0, 1.0)


def shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    raise ValueError(f"unknown shape {shape!r}")


def render(rng: np.random.Generator, size: int, shape: str, color: str, scene: str, big: bool) -> np.ndarray:
    img = _scene(rng, size, scene)
    r = size * (rng.uniform(0.22, 0.3) if big else rng.uniform(0.12, 0.18))
    cx, cy = rng.uniform(r, size - r, size=2)
    img[shape_mask(shape, size, cx, cy, r)] = COLORS[color]
    return img


def make_corpus(n: int, size: int = 32, seed: int = 0) -> Corpus:
    """Images plus background-heavy caption templates; colour/size words appear in some captions."""
    rng = np.random.default_rng(seed)
    images, templates, classes = [], [], []
    for _ in range(n):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = list(COLORS)[rng.integers(len(COLORS))]
        scene = list(SCENES)[rng.integers(len(SCENES))]
        big = bool(rng.integers(2))
        images.append(render(rng, size, shape, color, scene, big))
        style = rng.integers(4)
        size_word = SIZES[int(big)]
        if style == 0:
            t = f"a photo of {{}} in the {scene}"
        elif style == 1:
            t = f"a {color} {{}} in the {scene}"
        elif style == 2:
            t = f"a {size_word} {{}} in the {scene}"
        else:
            t = f"a {size_word} {color} {{}} in the {scene}"
        templates.append(t)
        classes.append(shape)
    arr = np.stack(images).astype(np.float32).transpose(0, 3, 1, 2) * 2.0 - 1.0
    return Corpus(torch.from_numpy(arr), templates, classes)


def render_subject(size: int, scene: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """The concept to personalize: a large square, magenta with a yellow cross-stripe, placed off-centre.

    No corpus colour matches it, so the prior cannot produce it from words alone.
    """
    rng = rng or np.random.default_rng(0)
    img = _scene(rng, size, scene)
    r = size * 0.26
    cx, cy = size * 0.38, size * 0.58
    body = shape_mask("square", size, cx, cy, r)
    img[body] = (0.9, 0.2, 0.75)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    stripe = body & ((np.abs(yy - cy) <= r * 0.18) | (np.abs(xx - cx) <= r * 0.18))
    img[stripe] = (0.98, 0.9, 0.1)
    return img


def reference_set(n: int = 1, size: int = 32, class_word: str = "square") -> tuple[torch.Tensor, list[str]]:
    """``n`` (1-5) views of the subject, each in a different scene, with matching caption templates."""
    scenes = list(SCENES)
    if not 1 <= n <= len(scenes):
        raise ValueError(f"between 1 and {len(scenes)} references supported")
    imgs = [render_subject(size, scenes[i], np.random.default_rng(i)) for i in range(n)]
    arr = np.stack(imgs).astype(np.float32).transpose(0, 3, 1, 2) * 2.0 - 1.0
    return torch.from_numpy(arr), [PERSONAL_TEMPLATES[i] for i in range(n)]


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, C) uint8."""
    a = ((img.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return a.permute(1, 2, 0).numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def save_png(img: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path) -> torch.Tensor:
    return from_uint8(np.asarray(Image.open(path).convert("RGB")))


def write_reference_set(out_dir, n: int = 1, size: int = 32, class_word: str = "square") -> Path:
    """Write reference PNGs plus a caption manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imgs, templates = reference_set(n, size, class_word)
    records = []
    for i, (img, t) in enumerate(zip(imgs, templates)):
        p = out_dir / f"ref_{i:02d}.png"
        save_png(img, p)
        records.append(ManifestRecord(p, class_word, t))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, records)
    return manifest


def load_reference_set(manifest) -> tuple[torch.Tensor, list[ManifestRecord]]:
    records = read_manifest(manifest)
    images = torch.stack([load_png(r.image_path) for r in records])
    return images, records
