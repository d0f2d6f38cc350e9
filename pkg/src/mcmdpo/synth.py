"""Deterministic shape-grid micro-world for end-to-end experiments.

Each scene places one to three coloured shapes on a G x G grid. The gold
alt-text names every object once in raster order; the context is a templated
post that mentions exactly one attribute of one object.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .text import Vocab, tokenize

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
_ROWS = {1: ("center",), 2: ("top", "bottom"), 3: ("top", "middle", "bottom")}
_COLS = {1: ("",), 2: ("left", "right"), 3: ("left", "center", "right")}

PROMPT = "write the alt text"

CONTEXT_TEMPLATES = {
    "color": (
        "my favorite color is {color}",
        "so much {color} in this one !",
        "trying out some {color} paint today",
    ),
    "shape": (
        "just finished drawing this {shape}",
        "everyone keeps asking about the {shape}",
        "who else loves a good {shape} ?",
    ),
    "position": (
        "look closely at the {position}",
        "something is hiding in the {position}",
    ),
}


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    grid: int = 2
    cell_pixels: int = 8
    max_objects: int = 3

    def __post_init__(self) -> None:
        if self.grid not in _ROWS:
            raise SynthError(f"grid must be 1, 2 or 3, got {self.grid}")
        if self.cell_pixels < 4:
            raise SynthError("cell_pixels must be >= 4")
        if not 1 <= self.max_objects <= min(3, self.grid * self.grid):
            raise SynthError("max_objects must be in [1, min(3, grid^2)]")

    @property
    def image_size(self) -> int:
        return self.grid * self.cell_pixels

    def scene_space(self) -> int:
        cells = self.grid * self.grid
        per = len(SHAPES) * len(COLORS)
        return sum(math.comb(cells, k) * per ** k for k in range(1, self.max_objects + 1))


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class SceneSpec:
    grid: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self) -> None:
        if len(self.objects) > 3:
            raise SynthError("at most 3 objects per scene")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise SynthError("objects must occupy distinct cells")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS:
                raise SynthError(f"unknown object {o}")
            if not all(0 <= v < self.grid for v in o.cell):
                raise SynthError(f"cell {o.cell} outside {self.grid}x{self.grid} grid")

    def raster(self) -> tuple[SceneObject, ...]:
        return tuple(sorted(self.objects, key=lambda o: o.cell))


@dataclass(frozen=True)
class SynthSample:
    id: str
    scene: SceneSpec
    image: np.ndarray
    context: str
    alt_text: str

    def to_record(self) -> dict:
        h, w, c = self.image.shape
        return {
            "id": self.id,
            "image": {"h": h, "w": w, "c": c, "data": self.image.reshape(-1).tolist()},
            "post_text": self.context,
            "alt_text": self.alt_text,
            "media_kind": "static",
        }


@dataclass
class SynthDataset:
    train: list[SynthSample]
    pref: list[SynthSample]
    test: list[SynthSample]
    vocab: Vocab
    config: SceneConfig


def _shape_mask(shape: str, s: int) -> np.ndarray:
    # shapes differ in per-quadrant coverage so they stay visible after patch pooling
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2.0
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (0.35 * s) ** 2
    # apex at the top centre, base along the bottom edge
    frac = yy / max(s - 1, 1)
    return np.abs(xx - c) <= frac * (s / 2.0)


def render(scene: SceneSpec, cell_pixels: int = 8) -> np.ndarray:
    """White canvas with each object filled in its own cell, values in [0, 1]."""
    size = scene.grid * cell_pixels
    image = np.ones((size, size, 3))
    for obj in scene.objects:
        r, c = obj.cell
        block = image[r * cell_pixels:(r + 1) * cell_pixels, c * cell_pixels:(c + 1) * cell_pixels]
        block[_shape_mask(obj.shape, cell_pixels)] = RGB[obj.color]
    return image


def position_name(cell: tuple[int, int], grid: int) -> str:
    r, c = cell
    return " ".join(w for w in (_ROWS[grid][r], _COLS[grid][c]) if w)


def describe(scene: SceneSpec) -> str:
    parts = [f"a {o.color} {o.shape} at the {position_name(o.cell, scene.grid)}" for o in scene.raster()]
    return " and ".join(parts)


def vocabulary_words(grid: int) -> set[str]:
    words = set(SHAPES) | set(COLORS) | {"a", "at", "the", "and"}
    words |= set(tokenize(PROMPT))
    words |= {w for names in (_ROWS[grid], _COLS[grid]) for n in names for w in tokenize(n)}
    for templates in CONTEXT_TEMPLATES.values():
        for t in templates:
            words |= set(tokenize(t.format(color="", shape="", position="")))
    return words


def synth_vocab(config: SceneConfig, size: int = 64) -> Vocab:
    return Vocab.build(vocabulary_words(config.grid), size=size)


def _draw_scene(rng: np.random.Generator, cfg: SceneConfig) -> SceneSpec:
    k = int(rng.integers(1, cfg.max_objects + 1))
    cells = sorted(int(i) for i in rng.choice(cfg.grid * cfg.grid, size=k, replace=False))
    objs = tuple(
        SceneObject(SHAPES[int(rng.integers(len(SHAPES)))], COLORS[int(rng.integers(len(COLORS)))],
                    divmod(cell, cfg.grid))
        for cell in cells
    )
    return SceneSpec(cfg.grid, objs)


def _context(scene: SceneSpec, rng: np.random.Generator) -> str:
    obj = scene.raster()[int(rng.integers(len(scene.objects)))]
    kinds = sorted(CONTEXT_TEMPLATES)
    kind = kinds[int(rng.integers(len(kinds)))]
    templates = CONTEXT_TEMPLATES[kind]
    template = templates[int(rng.integers(len(templates)))]
    return template.format(color=obj.color, shape=obj.shape, position=position_name(obj.cell, scene.grid))


def make_sample(sample_id: str, scene: SceneSpec, rng: np.random.Generator, cfg: SceneConfig) -> SynthSample:
    return SynthSample(sample_id, scene, render(scene, cfg.cell_pixels), _context(scene, rng), describe(scene))


def gen_dataset(seed: int, n_train: int = 512, n_pref: int = 128, n_test: int = 128,
                config: SceneConfig | None = None, vocab_size: int = 64) -> SynthDataset:
    """Three disjoint splits of distinct scenes, deterministic in ``seed``."""
    cfg = config or SceneConfig()
    sizes = {"train": n_train, "pref": n_pref, "test": n_test}
    if any(n < 1 for n in sizes.values()):
        raise SynthError("split sizes must be >= 1")
    total = sum(sizes.values())
    if total > cfg.scene_space():
        raise SynthError(f"requested {total} scenes but only {cfg.scene_space()} exist")
    rng = np.random.default_rng(seed)
    seen: set[tuple] = set()
    splits: dict[str, list[SynthSample]] = {}
    for split, n in sizes.items():
        samples = []
        while len(samples) < n:
            scene = _draw_scene(rng, cfg)
            key = scene.raster()
            if key in seen:
                continue
            seen.add(key)
            samples.append(make_sample(f"{split}-{len(samples):05d}", scene, rng, cfg))
        splits[split] = samples
    return SynthDataset(splits["train"], splits["pref"], splits["test"], synth_vocab(cfg, vocab_size), cfg)


def corrupt_alt_text(sample: SynthSample, rng: np.random.Generator) -> str:
    """Flip one colour or shape word so the text contradicts the image."""
    objs = list(sample.scene.raster())
    i = int(rng.integers(len(objs)))
    obj = objs[i]
    if rng.integers(2) == 0:
        options = [c for c in COLORS if c != obj.color]
        objs[i] = SceneObject(obj.shape, options[int(rng.integers(len(options)))], obj.cell)
    else:
        options = [s for s in SHAPES if s != obj.shape]
        objs[i] = SceneObject(options[int(rng.integers(len(options)))], obj.color, obj.cell)
    return describe(SceneSpec(sample.scene.grid, tuple(objs)))


def write_dataset_file(path, samples: Sequence[SynthSample]) -> None:
    from .io_utils import atomic_write_text

    atomic_write_text(path, "".join(json.dumps(s.to_record(), sort_keys=True) + "\n" for s in samples))
