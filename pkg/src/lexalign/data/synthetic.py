"""Deterministic shape-world corpus.

Each image holds a few non-overlapping coloured shapes on a black background.
The caption names them left to right, e.g. ``"a photo of a red circle and a
blue square"``; every object yields one sample grounded on its shape word, with
``"<colour> <shape>"`` as its class label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lexalign.data.corpus import CorpusManifest, GroundedSample
from lexalign.data.tokenizer import Vocab, tokenize
from lexalign.errors import ConfigError
from lexalign.regions import Bbox

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (40, 80, 230),
    "yellow": (230, 210, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 200, 210),
    "orange": (240, 140, 30),
    "white": (235, 235, 235),
}
SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "bar", "frame")
PREFIX = "a photo of"


@dataclass
class SynthConfig:
    image_size: int = 32
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "cross")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 10
    max_size: int = 14
    unique_captions: bool = True
    max_tries: int = 200
    # explicit (color, shape) classes; None means every color x shape pair
    classes: tuple[tuple[str, str], ...] | None = None
    # optional (small, large) adjectives; sizes are then drawn from the lower
    # or upper part of [min_size, max_size] so the word is visually grounded
    size_words: tuple[str, str] | None = None
    # sides below the split read as small, above it as large; None: midpoint
    size_split: int | None = None
    # chance that an object's caption phrase carries its size word
    size_word_prob: float = 1.0

    def __post_init__(self):
        if self.classes is not None:
            self.classes = tuple((str(c), str(s)) for c, s in self.classes)
            self.colors = tuple(dict.fromkeys(c for c, _ in self.classes))
            self.shapes = tuple(dict.fromkeys(s for _, s in self.classes))
        self.shapes = tuple(self.shapes)
        self.colors = tuple(self.colors)
        if not set(self.shapes) <= set(SHAPES):
            raise ConfigError(f"unknown shapes {sorted(set(self.shapes) - set(SHAPES))}")
        if not set(self.colors) <= set(PALETTE):
            raise ConfigError(f"unknown colors {sorted(set(self.colors) - set(PALETTE))}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.max_objects > len(self.class_names):
            raise ConfigError("more objects per image than distinct classes")
        if not 2 <= self.min_size <= self.max_size <= self.image_size:
            raise ConfigError("need 2 <= min_size <= max_size <= image_size")
        if self.size_words is not None:
            self.size_words = tuple(str(w) for w in self.size_words)
            if len(self.size_words) != 2:
                raise ConfigError("size_words needs exactly two words")
            lo, hi = self.size_range(0), self.size_range(1)
            if lo[0] > lo[1] or hi[0] > hi[1]:
                raise ConfigError("size_split leaves no room for one of the size words")
        if not 0.0 <= self.size_word_prob <= 1.0:
            raise ConfigError("size_word_prob must be in [0, 1]")

    def size_range(self, word_index: int) -> tuple[int, int]:
        """Inclusive side range for the small (0) or large (1) adjective."""
        split = self.size_split if self.size_split is not None else (self.min_size + self.max_size) / 2
        if word_index == 0:
            return self.min_size, int(math.ceil(split)) - 1
        return int(math.floor(split)) + 1, self.max_size

    @property
    def class_pairs(self) -> list[tuple[str, str]]:
        if self.classes is not None:
            return list(self.classes)
        return [(c, s) for c in self.colors for s in self.shapes]

    @property
    def class_names(self) -> list[str]:
        return [f"{c} {s}" for c, s in self.class_pairs]


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean (size, size) mask sampled at pixel centres."""
    c = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(c, c)
    du, dv = u - 0.5, v - 0.5
    if shape == "square":
        return np.ones((size, size), bool)
    if shape == "circle":
        return du**2 + dv**2 <= 0.25
    if shape == "triangle":
        return np.abs(du) <= v / 2
    if shape == "cross":
        return (np.abs(du) <= 1 / 6) | (np.abs(dv) <= 1 / 6)
    if shape == "diamond":
        return np.abs(du) + np.abs(dv) <= 0.5
    if shape == "ring":
        r2 = du**2 + dv**2
        return (r2 <= 0.25) & (r2 >= 0.09)
    if shape == "bar":
        return np.abs(dv) <= 0.2
    if shape == "frame":
        return np.maximum(np.abs(du), np.abs(dv)) >= 0.3
    raise ConfigError(f"unknown shape {shape!r}")


def caption_for(objects, cfg: SynthConfig | None = None) -> tuple[str, list[int]]:
    """Caption text and the token position of each object's shape word.

    Objects are ``(color, shape, box)`` or ``(color, shape, box, sized)``; a
    false ``sized`` drops that object's size word.
    """
    parts = []
    for color, shape, box, *rest in objects:
        words = ["a", color, shape]
        if cfg is not None and cfg.size_words is not None and (not rest or rest[0]):
            words.insert(1, cfg.size_words[int(box.width > cfg.size_range(0)[1])])
        parts.append(" ".join(words))
    caption = f"{PREFIX} " + " and ".join(parts)
    positions, pos = [], len(tokenize(PREFIX))
    for part in parts:
        n = len(part.split())
        positions.append(pos + n - 1)
        pos += n + 1
    return caption, positions


def _disjoint(box: Bbox, others: list[Bbox], gap: int = 1) -> bool:
    return all(
        box.x_max + gap <= o.x_min or o.x_max + gap <= box.x_min
        or box.y_max + gap <= o.y_min or o.y_max + gap <= box.y_min
        for o in others
    )


def _draw_layout(rng: np.random.Generator, cfg: SynthConfig):
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    pairs = cfg.class_pairs
    classes = rng.choice(len(pairs), size=n, replace=False)
    objects = []
    S = cfg.image_size
    for k in classes:
        color, shape = pairs[k]
        lo, hi = cfg.min_size, cfg.max_size
        sized = cfg.size_words is not None
        if sized:
            lo, hi = cfg.size_range(int(rng.integers(0, 2)))
            if cfg.size_word_prob < 1.0:
                sized = bool(rng.random() < cfg.size_word_prob)
        for _ in range(cfg.max_tries):
            size = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, S - size + 1))
            y0 = int(rng.integers(0, S - size + 1))
            box = Bbox(x0, y0, x0 + size, y0 + size)
            if _disjoint(box, [o[2] for o in objects]):
                objects.append((color, shape, box, sized))
                break
        else:
            return None
    objects.sort(key=lambda o: (o[2].x_min, o[2].y_min))
    return objects


def render(objects, image_size: int) -> np.ndarray:
    img = np.zeros((image_size, image_size, 3), np.uint8)
    for color, shape, box, *_ in objects:
        x0, y0, size = int(box.x_min), int(box.y_min), int(box.width)
        mask = shape_mask(shape, size)
        img[y0 : y0 + size, x0 : x0 + size][mask] = PALETTE[color]
    return img


def synthetic_vocab(cfg: SynthConfig) -> Vocab:
    words = set(tokenize(PREFIX)) | {"a", "and"} | set(cfg.colors) | set(cfg.shapes)
    words |= set(cfg.size_words or ())
    return Vocab(sorted(words))


def generate_synthetic_corpus(seed: int, n_images: int, cfg: SynthConfig | None = None) -> CorpusManifest:
    """Render ``n_images`` images and their grounded samples, deterministic in ``seed``.

    Layouts whose caption already occurred are redrawn (up to ``max_tries``)
    when ``unique_captions`` is set, so retrieval ground truth stays unambiguous.
    """
    cfg = cfg or SynthConfig()
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    rng = np.random.default_rng(seed)
    samples, images, seen = [], {}, set()
    duplicates = 0
    for i in range(n_images):
        layout = None
        for _ in range(cfg.max_tries):
            drawn = _draw_layout(rng, cfg)
            if drawn is None:
                continue
            layout = drawn
            if not cfg.unique_captions or caption_for(drawn, cfg)[0] not in seen:
                break
        else:
            if layout is None:
                raise ConfigError("could not place shapes; lower max_objects or max_size")
            duplicates += 1
        objects = layout
        caption, positions = caption_for(objects, cfg)
        seen.add(caption)
        ref = f"images/{i:05d}.png"
        images[ref] = render(objects, cfg.image_size)
        for (color, shape, box, *_), pos in zip(objects, positions):
            samples.append(
                GroundedSample(
                    image_ref=ref,
                    caption=caption,
                    box=box,
                    word=shape,
                    token_idx=pos,
                    label=f"{color} {shape}",
                    image_size=(cfg.image_size, cfg.image_size),
                )
            )
    stats = {
        "images": n_images,
        "captions": n_images,
        "samples": len(samples),
        "discarded": 0,
        "duplicate_captions": duplicates,
        "seed": seed,
        "class_names": cfg.class_names,
    }
    return CorpusManifest(samples, synthetic_vocab(cfg), stats, images=images)
