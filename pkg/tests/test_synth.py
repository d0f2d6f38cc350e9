from __future__ import annotations

import json
import math
from collections import Counter

import numpy as np
import pytest

from mcmdpo.synth import (
    COLORS,
    RGB,
    SHAPES,
    SceneConfig,
    SceneObject,
    SceneSpec,
    SynthError,
    _draw_scene,
    corrupt_alt_text,
    describe,
    gen_dataset,
    render,
    write_dataset_file,
)
from mcmdpo.text import tokenize


@pytest.fixture(scope="module")
def data():
    return gen_dataset(0, 64, 16, 16)


def _fingerprint(ds):
    return [(s.id, s.image.tobytes(), s.context, s.alt_text) for s in ds.train + ds.pref + ds.test]


def test_same_seed_is_byte_identical(data, tmp_path):
    again = gen_dataset(0, 64, 16, 16)
    assert _fingerprint(data) == _fingerprint(again)
    write_dataset_file(tmp_path / "a.jsonl", data.train)
    write_dataset_file(tmp_path / "b.jsonl", again.train)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert _fingerprint(gen_dataset(1, 64, 16, 16)) != _fingerprint(data)


def test_splits_are_disjoint_scenes(data):
    keys = [s.scene.raster() for s in data.train + data.pref + data.test]
    assert len(set(keys)) == len(keys)


def test_alt_texts_have_at_least_five_words(data):
    for s in data.train + data.pref + data.test:
        assert len(s.alt_text.split()) >= 5


def test_vocabulary_closure(data):
    for s in data.train + data.pref + data.test:
        for text in (s.alt_text, s.context):
            assert all(t in data.vocab for t in tokenize(text))
        assert all(t in data.vocab for t in tokenize(corrupt_alt_text(s, np.random.default_rng(0))))


def test_alt_text_names_every_object_once_in_raster_order(data):
    for s in data.train:
        objs = s.scene.raster()
        parts = s.alt_text.split(" and ")
        assert len(parts) == len(objs)
        for part, o in zip(parts, objs):
            assert part.startswith(f"a {o.color} {o.shape} at the ")


def test_context_never_equals_alt_text(data):
    assert all(s.context != s.alt_text for s in data.train + data.pref + data.test)


def test_attribute_distribution_uniform_within_3_sigma():
    rng = np.random.default_rng(123)
    cfg = SceneConfig()
    objs = [o for _ in range(1000) for o in _draw_scene(rng, cfg).objects]
    n = len(objs)
    for attr, values in (("shape", SHAPES), ("color", COLORS)):
        counts = Counter(getattr(o, attr) for o in objs)
        p = 1 / len(values)
        sigma = math.sqrt(n * p * (1 - p))
        for v in values:
            assert abs(counts[v] - n * p) <= 3 * sigma, (attr, v, counts)


def test_empty_scene_is_white():
    img = render(SceneSpec(2, ()))
    assert img.shape == (16, 16, 3) and np.all(img == 1.0)


@pytest.mark.parametrize("shape", SHAPES)
def test_render_locality(shape):
    img = render(SceneSpec(2, (SceneObject(shape, "red", (0, 0)),)), cell_pixels=8)
    red = np.all(img == RGB["red"], axis=-1)
    assert red[:8, :8].any()
    assert not red[8:, :].any() and not red[:, 8:].any()
    assert np.all(img[8:, :] == 1.0) and np.all(img[:, 8:] == 1.0)
    assert img.min() >= 0 and img.max() <= 1


def test_shapes_differ_after_patch_pooling():
    pooled = {}
    for shape in SHAPES:
        img = render(SceneSpec(1, (SceneObject(shape, "blue", (0, 0)),)), cell_pixels=8)
        pooled[shape] = img.reshape(2, 4, 2, 4, 3).mean(axis=(1, 3)).tobytes()
    assert len(set(pooled.values())) == 3


def test_render_is_deterministic():
    scene = SceneSpec(2, (SceneObject("circle", "green", (1, 0)), SceneObject("triangle", "yellow", (0, 1))))
    assert render(scene).tobytes() == render(scene).tobytes()


def test_corruption_flips_exactly_one_attribute(data):
    for i, s in enumerate(data.train):
        bad = corrupt_alt_text(s, np.random.default_rng(i))
        a, b = s.alt_text.split(), bad.split()
        assert len(a) == len(b)
        diff = [(x, y) for x, y in zip(a, b) if x != y]
        assert len(diff) == 1
        x, y = diff[0]
        assert (x in COLORS and y in COLORS) or (x in SHAPES and y in SHAPES)
        assert corrupt_alt_text(s, np.random.default_rng(i)) == bad


def test_describe_uses_position_names():
    scene = SceneSpec(2, (SceneObject("square", "red", (1, 1)),))
    assert describe(scene) == "a red square at the bottom right"


def test_scene_validation():
    with pytest.raises(SynthError):
        SceneSpec(2, (SceneObject("square", "red", (0, 0)), SceneObject("circle", "red", (0, 0))))
    with pytest.raises(SynthError):
        SceneSpec(2, (SceneObject("hexagon", "red", (0, 0)),))
    with pytest.raises(SynthError):
        SceneConfig(grid=4)
    with pytest.raises(SynthError):
        gen_dataset(0, 10_000, 1, 1)


def test_record_format(data):
    rec = data.train[0].to_record()
    assert set(rec) == {"id", "image", "post_text", "alt_text", "media_kind"}
    json.dumps(rec)
    assert len(rec["image"]["data"]) == rec["image"]["h"] * rec["image"]["w"] * rec["image"]["c"]
