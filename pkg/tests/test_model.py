from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, tiny_params
from oracles import numpy_forward, numpy_logprob
from mcmdpo.model import (
    EOS_ID,
    GROUPS,
    ModelConfig,
    ModelError,
    ModelParams,
    final_hidden,
    generate,
    param_shapes,
    pool_patches,
    sequence_logprob,
    step_logprobs,
    trainable_groups,
)


IMG = np.random.default_rng(1).uniform(0, 1, size=(8, 8, 3))


def test_param_shapes_cover_every_group():
    groups = {n.split(".")[0] for n in param_shapes(TINY)}
    assert groups == set(GROUPS)


def test_init_is_seeded_uniform():
    a, b = ModelParams.init(TINY), ModelParams.init(TINY)
    for name in a.arrays:
        assert a[name].tobytes() == b[name].tobytes()
        assert np.all(np.abs(a[name]) <= TINY.init_scale)
    other = ModelParams.init(ModelConfig(**{**TINY.to_dict(), "seed": 1}))
    assert other["lm_head.weight"].tobytes() != a["lm_head.weight"].tobytes()


def test_pool_patches_channel_means():
    img = np.zeros((8, 4, 3))
    img[:4, :, 0] = 1.0
    img[4:, :2, 2] = 0.5
    pooled = pool_patches(img, 4)
    np.testing.assert_allclose(pooled, [[1.0, 0.0, 0.0], [0.0, 0.0, 0.25]])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_logprob_matches_numpy_oracle(seed):
    p = tiny_params(seed)
    x, c, y = (3, 4), (5, 6, 7), (8, 9, EOS_ID)
    assert sequence_logprob(p, x, IMG, c, y) == pytest.approx(numpy_logprob(p, x, IMG, c, y), abs=1e-12)
    np.testing.assert_allclose(final_hidden(p, x, IMG, c, y), numpy_forward(p, x, IMG, c, y)[-1], atol=1e-12)


def test_uniform_head_gives_minus_len_log_v():
    p = tiny_params(0)
    zeroed = p.with_arrays({"lm_head.weight": np.zeros_like(p["lm_head.weight"]),
                            "lm_head.bias": np.zeros_like(p["lm_head.bias"])})
    y = (5, 6, 7, EOS_ID)
    assert sequence_logprob(zeroed, (3,), IMG, (4,), y) == pytest.approx(-4 * math.log(TINY.vocab_size), abs=1e-12)


def test_step_logprobs_are_normalised_and_sum_to_sequence_logprob():
    p = tiny_params(0)
    y = (5, 6, 7, EOS_ID)
    steps = step_logprobs(p, (3,), IMG, (4,), y)
    assert steps.shape == (4, TINY.vocab_size)
    np.testing.assert_allclose(np.exp(steps).sum(axis=1), 1.0, atol=1e-12)
    picked = steps[np.arange(4), list(y)].sum()
    assert picked == pytest.approx(sequence_logprob(p, (3,), IMG, (4,), y), abs=1e-12)


def test_padding_is_invisible():
    p = tiny_params(0)
    y = (5, 6, EOS_ID)
    base = sequence_logprob(p, (3, 4), IMG, (5,), y)
    assert sequence_logprob(p, (3, 4, 0, 0), IMG, (5, 0), y) == base


def test_causality_prefix_scores_ignore_later_tokens():
    p = tiny_params(0)
    a = step_logprobs(p, (3,), IMG, (4,), (5, 6, 7))
    b = step_logprobs(p, (3,), IMG, (4,), (5, 6, 9))
    np.testing.assert_array_equal(a, b)  # the last token is never an input
    c = step_logprobs(p, (3,), IMG, (4,), (5, 8, 7))
    np.testing.assert_array_equal(a[:2], c[:2])
    assert not np.array_equal(a[2], c[2])


def test_image_changes_scores():
    p = tiny_params(0)
    other = np.clip(IMG[::-1], 0, 1)
    assert sequence_logprob(p, (3,), IMG, (4,), (5, 2)) != sequence_logprob(p, (3,), other, (4,), (5, 2))


def test_generate_is_greedy_argmax():
    p = tiny_params(3, scale=1.0)
    out = generate(p, (3,), IMG, (4,), max_len=6)
    assert 1 <= len(out) <= 6
    steps = step_logprobs(p, (3,), IMG, (4,), out + (0,)) if out[-1] != EOS_ID else \
        step_logprobs(p, (3,), IMG, (4,), out)
    for i, tok in enumerate(out):
        assert tok == int(np.argmax(steps[i]))
    if len(out) < 6:
        assert out[-1] == EOS_ID


def test_generate_stops_at_eos():
    p = tiny_params(0)
    bias = np.full(TINY.vocab_size, -5.0)
    bias[EOS_ID] = 5.0
    forced = p.with_arrays({"lm_head.bias": bias})
    assert generate(forced, (3,), IMG, (4,), max_len=5) == (EOS_ID,)


def test_generate_deterministic():
    p = tiny_params(3, scale=1.0)
    assert generate(p, (3,), IMG, (4,), 6) == generate(p, (3,), IMG, (4,), 6)


@pytest.mark.parametrize("paradigm,s1,s2", [("P1", False, False), ("P2", False, True),
                                            ("P3", True, False), ("P4", True, True)])
def test_trainable_groups_table(paradigm, s1, s2):
    others = set(GROUPS) - {"vision_encoder"}
    for stage, trained in (("S1", s1), ("S2", s2)):
        groups = trainable_groups(paradigm, stage)
        assert others <= groups
        assert ("vision_encoder" in groups) == trained


def test_bad_inputs():
    p = tiny_params(0)
    with pytest.raises(ModelError):
        sequence_logprob(p, (3,), IMG, (4,), (TINY.vocab_size,))
    with pytest.raises(ModelError):
        sequence_logprob(p, (3,), IMG, (4,), ())
    with pytest.raises(ModelError):
        sequence_logprob(p, (3,), IMG, (4,), tuple([5] * TINY.max_seq_len))
    with pytest.raises(ModelError):
        sequence_logprob(p, (3,), np.ones((6, 8, 3)), (4,), (5,))
    with pytest.raises(ModelError):
        sequence_logprob(p, (3,), IMG * 2.0, (4,), (5,))
    with pytest.raises(ModelError):
        trainable_groups("P5", "S1")
    with pytest.raises(ModelError):
        ModelParams(TINY, {})


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(3, TINY.vocab_size - 1), min_size=1, max_size=6),
       st.lists(st.integers(3, TINY.vocab_size - 1), min_size=0, max_size=4))
def test_logprob_oracle_on_random_sequences(y, c):
    p = tiny_params(5)
    assert sequence_logprob(p, (3,), IMG, c, y) == pytest.approx(numpy_logprob(p, (3,), IMG, c, y), abs=1e-11)
    assert sequence_logprob(p, (3,), IMG, c, y) < 0
