"""Rejected images, contexts and responses for preference pairs."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .text import tokenize

COLOR_WORDS = ("red", "green", "blue", "yellow", "black", "white", "orange", "purple", "pink", "brown", "gray")
SHAPE_WORDS = ("circle", "square", "triangle", "rectangle", "star", "oval", "heart")
STOPWORDS = frozenset(
    "a an the and or of in on at to for with by from is are was were be this that it its as".split()
)


class RejectionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear per-step variances and their cumulative signal fraction."""

    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @cached_property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.steps, dtype=np.float64)

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[t]`` for t = 0..steps; ``alpha_bar[0] == 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def coefficients(self, t: int) -> tuple[float, float]:
        if not 0 <= t <= self.steps:
            raise RejectionError(f"noise step {t} outside [0, {self.steps}]")
        ab = self.alpha_bar[t]
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))


DEFAULT_SCHEDULE = NoiseSchedule()


@dataclass(frozen=True)
class Diffusion:
    T: int = 700
    schedule: NoiseSchedule = DEFAULT_SCHEDULE

    def __post_init__(self) -> None:
        if not 0 <= self.T <= self.schedule.steps:
            raise RejectionError(f"T={self.T} outside [0, {self.schedule.steps}]")


@dataclass(frozen=True)
class Blackness:
    pass


@dataclass(frozen=True)
class Crop:
    min_ratio: float = 0.5
    max_ratio: float = 0.9

    def __post_init__(self) -> None:
        if not 0 < self.min_ratio <= self.max_ratio <= 1:
            raise RejectionError("need 0 < min_ratio <= max_ratio <= 1")


@dataclass(frozen=True)
class Rotation:
    min_deg: float = 10.0
    max_deg: float = 80.0

    def __post_init__(self) -> None:
        if not 0 <= self.min_deg <= self.max_deg < 360:
            raise RejectionError("need 0 <= min_deg <= max_deg < 360")


@dataclass(frozen=True)
class Randomness:
    pass


RejectImageStrategy = Union[Diffusion, Blackness, Crop, Rotation, Randomness]

STRATEGY_NAMES = {"diffusion": Diffusion, "blackness": Blackness, "crop": Crop,
                  "rotation": Rotation, "randomness": Randomness}


def strategy_from_name(name: str, noise_T: int = 700) -> RejectImageStrategy:
    key = name.strip().lower()
    if key not in STRATEGY_NAMES:
        raise RejectionError(f"unknown rejected-image strategy {name!r}")
    return Diffusion(noise_T) if key == "diffusion" else STRATEGY_NAMES[key]()


def strategy_name(strategy: RejectImageStrategy) -> str:
    return type(strategy).__name__.lower()


def item_rng(seed: int, item_id: int) -> np.random.Generator:
    """Per-item generator derived as ``seed XOR item_id``."""
    return np.random.default_rng(int(seed) ^ int(item_id))


def facet_rngs(seed: int, item_id: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (response, context, image) streams split from :func:`item_rng`.

    Separate streams keep an item's rejected response and context fixed
    whichever image strategy is in use.
    """
    resp, ctx, img = item_rng(seed, item_id).spawn(3)
    return resp, ctx, img


def pick_other_index(n: int, index: int, rng: np.random.Generator) -> int:
    """Uniform index in ``range(n)`` excluding ``index``."""
    if n < 2:
        raise RejectionError("need at least two samples to pick a different one")
    j = int(rng.integers(n - 1))
    return j + 1 if j >= index else j


def _nearest_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = (np.arange(h) * img.shape[0] // h).clip(0, img.shape[0] - 1)
    cols = (np.arange(w) * img.shape[1] // w).clip(0, img.shape[1] - 1)
    return img[rows][:, cols]


def make_rejected_image(image: np.ndarray, strategy: RejectImageStrategy, rng: np.random.Generator,
                        pool: Sequence[np.ndarray] | None = None, index: int | None = None) -> np.ndarray:
    """Derive a dispreferred image from ``image``.

    ``pool`` and ``index`` are only read by :class:`Randomness`, which returns
    a different pool entry.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise RejectionError(f"image must be HxWxC, got {image.shape}")
    h, w, _ = image.shape
    if isinstance(strategy, Diffusion):
        if strategy.T == 0:
            return image.copy()
        signal, noise = strategy.schedule.coefficients(strategy.T)
        eps = rng.standard_normal(image.shape)
        return np.clip(signal * image + noise * eps, 0.0, 1.0)
    if isinstance(strategy, Blackness):
        return np.zeros_like(image)
    if isinstance(strategy, Crop):
        ratio = rng.uniform(strategy.min_ratio, strategy.max_ratio)
        side = np.sqrt(ratio)
        ch, cw = max(1, int(round(h * side))), max(1, int(round(w * side)))
        top = int(rng.integers(h - ch + 1))
        left = int(rng.integers(w - cw + 1))
        return _nearest_resize(image[top:top + ch, left:left + cw], h, w)
    if isinstance(strategy, Rotation):
        angle = rng.uniform(strategy.min_deg, strategy.max_deg)
        out = ndimage.rotate(image, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
        return np.clip(out, 0.0, 1.0)
    if isinstance(strategy, Randomness):
        if pool is None or index is None:
            raise RejectionError("Randomness needs a sample pool and the item index")
        return np.array(pool[pick_other_index(len(pool), index, rng)], dtype=np.float64)
    raise RejectionError(f"unknown strategy {strategy!r}")


def make_rejected_context(contexts: Sequence, item_index: int, rng: np.random.Generator,
                          require_different: bool = False, max_tries: int = 100):
    """Context of a uniformly chosen other sample.

    With ``require_different`` the draw is repeated until the picked context
    differs in content from the item's own (templated corpora repeat posts).
    """
    return contexts[pick_context_index(contexts, item_index, rng, require_different, max_tries)]


def pick_context_index(contexts: Sequence, item_index: int, rng: np.random.Generator,
                       require_different: bool = False, max_tries: int = 100) -> int:
    for _ in range(max_tries):
        j = pick_other_index(len(contexts), item_index, rng)
        if not require_different or contexts[j] != contexts[item_index]:
            return j
    raise RejectionError(f"no context different from item {item_index} after {max_tries} draws")


# -- responses -------------------------------------------------------------------


def _drop_content_word(tokens, rng):
    if len(tokens) < 2:
        return None
    spots = [i for i, t in enumerate(tokens) if t.isalnum() and t not in STOPWORDS]
    if not spots:
        return None
    i = spots[int(rng.integers(len(spots)))]
    return tokens[:i] + tokens[i + 1:]


def _swap_adjacent(tokens, rng):
    spots = [i for i in range(len(tokens) - 1) if tokens[i] != tokens[i + 1]]
    if not spots:
        return None
    i = spots[int(rng.integers(len(spots)))]
    out = list(tokens)
    out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _replace_attribute(tokens, rng, vocabulary):
    spots = []
    for i, t in enumerate(tokens):
        for family in (COLOR_WORDS, SHAPE_WORDS):
            if t in family:
                options = [w for w in family if w != t and (vocabulary is None or w in vocabulary)]
                if options:
                    spots.append((i, options))
    if not spots:
        return None
    i, options = spots[int(rng.integers(len(spots)))]
    out = list(tokens)
    out[i] = options[int(rng.integers(len(options)))]
    return out


def synthetic_corruption(alt_text: str, rng: np.random.Generator, vocabulary=None) -> list[str]:
    """Drop a content word, swap two adjacent words, or replace a colour/shape word.

    The operation is drawn uniformly among those that can change the text.
    """
    tokens = tokenize(alt_text)
    if len(tokens) < 2:
        raise RejectionError(f"cannot corrupt a response of {len(tokens)} token(s)")
    ops = [_drop_content_word, _swap_adjacent, lambda t, r: _replace_attribute(t, r, vocabulary)]
    order = [int(i) for i in rng.permutation(len(ops))]
    for k in order:
        out = ops[k](tokens, rng)
        if out is not None and out != tokens:
            return list(out)
    raise RejectionError("no corruption changes this response")


def make_rejected_response(context: str, alt_text: str, mode: str = "synthetic_corruption", client=None,
                           rng: np.random.Generator | None = None, vocabulary=None) -> list[str]:
    """Tokens of a suboptimal alt-text.

    ``external_client`` fills the suboptimal alt-text prompt and tokenizes the
    reply; ``synthetic_corruption`` perturbs the chosen text locally.
    """
    if mode == "external_client":
        if client is None:
            raise RejectionError("external_client mode needs a configured client")
        from .clients import REJECT_TEMPLATE

        prompt = client.templates.get("reject_gen", REJECT_TEMPLATE).format(context=context, alt_text=alt_text)
        return tokenize(client.ask(prompt).strip())
    if mode == "synthetic_corruption":
        return synthetic_corruption(alt_text, rng if rng is not None else np.random.default_rng(0), vocabulary)
    raise RejectionError(f"unknown response rejection mode {mode!r}")
