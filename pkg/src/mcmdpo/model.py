"""A tiny multimodal causal language model built on :mod:`mcmdpo.autodiff`.

The model reads ``[visual patches; prompt; context; response]`` and scores the
response tokens by teacher forcing. One single-head attention block with a
residual connection is followed by a residual tanh MLP and the output head.

Parameters live in five named groups so that training paradigms can freeze
the vision encoder per stage.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Graph

GROUPS = ("vision_encoder", "projector", "text_embed", "lm_core", "lm_head")
SEGMENTS = {"visual": 0, "prompt": 1, "context": 2, "response": 3}
PARADIGMS = ("P1", "P2", "P3", "P4")
STAGES = ("S1", "S2")

# paradigm -> (vision encoder trained in S1, trained in S2)
_VISION_TRAINED = {
    "P1": (False, False),
    "P2": (False, True),
    "P3": (True, False),
    "P4": (True, True),
}

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    max_seq_len: int = 96
    patch_size: int = 4
    embed_dim: int = 16
    hidden_dim: int = 32
    channels: int = 3
    init_scale: float = 0.08
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 8:
            raise ModelError(f"vocab_size must be >= 8, got {self.vocab_size}")
        for name in ("max_seq_len", "patch_size", "embed_dim", "hidden_dim", "channels"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, H, V, C = cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size, cfg.channels
    return {
        "vision_encoder.weight": (C, D),
        "vision_encoder.bias": (D,),
        "projector.weight": (D, D),
        "projector.bias": (D,),
        "text_embed.tokens": (V, D),
        "text_embed.positions": (cfg.max_seq_len, D),
        "text_embed.segments": (len(SEGMENTS), D),
        "lm_core.query": (D, D),
        "lm_core.key": (D, D),
        "lm_core.value": (D, D),
        "lm_core.output": (D, D),
        "lm_core.mlp_in": (D, H),
        "lm_core.mlp_in_bias": (H,),
        "lm_core.mlp_out": (H, D),
        "lm_core.mlp_out_bias": (D,),
        "lm_head.weight": (D, V),
        "lm_head.bias": (V,),
    }


def group_of(name: str) -> str:
    group = name.split(".", 1)[0]
    if group not in GROUPS:
        raise ModelError(f"parameter {name!r} belongs to no known group")
    return group


class ModelParams:
    """Named float64 arrays plus the config that fixes their shapes."""

    def __init__(self, config: ModelConfig, arrays: Mapping[str, np.ndarray]):
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ModelError(f"parameter set mismatch: missing={missing} extra={extra}")
        self.config = config
        self.arrays: dict[str, np.ndarray] = {}
        for name in expected:
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != expected[name]:
                raise ModelError(f"{name}: shape {arr.shape} != {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name}: non-finite values")
            self.arrays[name] = arr

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        s = config.init_scale
        return cls(config, {n: rng.uniform(-s, s, size=shape) for n, shape in param_shapes(config).items()})

    @property
    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        out: dict[str, dict[str, np.ndarray]] = {g: {} for g in GROUPS}
        for name, arr in self.arrays.items():
            out[group_of(name)][name] = arr
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.arrays)

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        merged = dict(self.arrays)
        merged.update(arrays)
        return ModelParams(self.config, merged)

    def group_bytes(self, group: str) -> bytes:
        return b"".join(self.arrays[n].astype("<f8").tobytes() for n in sorted(self.groups[group]))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


def trainable_groups(paradigm: str, stage: str) -> frozenset[str]:
    """Groups updated by gradient steps for ``paradigm`` during ``stage``.

    Only the vision encoder is ever frozen; everything else always trains.
    """
    if paradigm not in _VISION_TRAINED:
        raise ModelError(f"unknown paradigm {paradigm!r}")
    if stage not in STAGES:
        raise ModelError(f"unknown stage {stage!r}")
    groups = set(GROUPS) - {"vision_encoder"}
    if _VISION_TRAINED[paradigm][STAGES.index(stage)]:
        groups.add("vision_encoder")
    return frozenset(groups)


def check_image(image: np.ndarray, patch_size: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ModelError(f"image must be HxWxC, got shape {image.shape}")
    h, w, _ = image.shape
    if h % patch_size or w % patch_size:
        raise ModelError(f"image {h}x{w} not divisible by patch size; dims must be multiples of {patch_size}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ModelError("image values must lie in [0, 1]")
    return image


def pool_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-channel mean of each PxP patch in raster order -> (n_patches, C)."""
    image = check_image(image, patch_size)
    h, w, c = image.shape
    p = patch_size
    blocks = image.reshape(h // p, p, w // p, p, c).mean(axis=(1, 3))
    return blocks.reshape(-1, c)


def _strip_pad(ids: Iterable[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in ids if int(i) != PAD_ID)


class ModelGraph:
    """Registers one set of parameters on a graph and builds forward passes.

    Several sequences can be scored on the same graph; they share parameter
    nodes, and repeated images are encoded once.
    """

    def __init__(self, params: ModelParams, trainable: Iterable[str] | None = None,
                 graph: Graph | None = None):
        self.params = params
        self.cfg = params.config
        self.graph = graph if graph is not None else Graph()
        groups = set(GROUPS if trainable is None else trainable)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ModelError(f"unknown groups {sorted(unknown)}")
        self.node = {
            name: self.graph.param(name, arr, trainable=group_of(name) in groups)
            for name, arr in params.arrays.items()
        }
        self._image_cache: dict[int, tuple[np.ndarray, int]] = {}
        D = self.cfg.embed_dim
        self._inv_sqrt_d = 1.0 / math.sqrt(D)

    # -- pieces ------------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> int:
        """(n_patches, D) node of projected visual embeddings."""
        key = id(image)
        hit = self._image_cache.get(key)
        if hit is not None and hit[0] is image:
            return hit[1]
        g, n = self.graph, self.node
        pooled = g.const(pool_patches(image, self.cfg.patch_size))
        vis = g.tanh(g.add(g.matmul(pooled, n["vision_encoder.weight"]), n["vision_encoder.bias"]))
        emb = g.add(g.matmul(vis, n["projector.weight"]), n["projector.bias"])
        self._image_cache[key] = (image, emb)
        return emb

    def _check_ids(self, ids: Sequence[int], what: str) -> None:
        V = self.cfg.vocab_size
        for i in ids:
            if not 0 <= i < V:
                raise ModelError(f"{what}: token id {i} outside vocabulary of size {V}")

    def hidden_states(self, x, image, c, y_in) -> tuple[int, int]:
        """Final hidden states for the full input; returns (node, n_prefix).

        ``n_prefix`` is the number of positions before the first response
        input position.
        """
        g, n = self.graph, self.node
        x, c, y_in = _strip_pad(x), _strip_pad(c), tuple(int(i) for i in y_in)
        self._check_ids(x, "prompt")
        self._check_ids(c, "context")
        self._check_ids(y_in, "response")
        vis = self.encode_image(image)
        n_vis = g.value(vis).shape[0]
        text = x + c + y_in
        T = n_vis + len(text)
        if T > self.cfg.max_seq_len:
            raise ModelError(f"sequence length {T} exceeds max_seq_len={self.cfg.max_seq_len}")
        segs = ([SEGMENTS["visual"]] * n_vis + [SEGMENTS["prompt"]] * len(x)
                + [SEGMENTS["context"]] * len(c) + [SEGMENTS["response"]] * len(y_in))
        if text:
            seq = g.concat(vis, g.gather_rows(n["text_embed.tokens"], text))
        else:
            seq = vis
        seq = g.add(seq, g.gather_rows(n["text_embed.positions"], range(T)))
        seq = g.add(seq, g.gather_rows(n["text_embed.segments"], segs))

        q = g.matmul(seq, n["lm_core.query"])
        k = g.matmul(seq, n["lm_core.key"])
        v = g.matmul(seq, n["lm_core.value"])
        scores = g.scale(g.matmul(q, g.transpose(k)), self._inv_sqrt_d)
        scores = g.add(scores, g.const(_causal_mask(T)))
        attn = g.exp(g.log_softmax(scores))
        h1 = g.add(seq, g.matmul(g.matmul(attn, v), n["lm_core.output"]))
        mlp = g.tanh(g.add(g.matmul(h1, n["lm_core.mlp_in"]), n["lm_core.mlp_in_bias"]))
        h2 = g.add(h1, g.add(g.matmul(mlp, n["lm_core.mlp_out"]), n["lm_core.mlp_out_bias"]))
        return h2, n_vis + len(x) + len(c)

    def next_token_logprobs(self, hidden: int, rows: Sequence[int]) -> int:
        g, n = self.graph, self.node
        picked = g.gather_rows(hidden, rows)
        logits = g.add(g.matmul(picked, n["lm_head.weight"]), n["lm_head.bias"])
        return g.log_softmax(logits)

    def sequence_logprob(self, x, image, c, y) -> int:
        """Scalar node holding log pi(y | x, image, c) under teacher forcing."""
        y = tuple(int(i) for i in y)
        if not y:
            raise ModelError("empty response")
        self._check_ids(y, "response")
        x_s, c_s = _strip_pad(x), _strip_pad(c)
        n_vis = _n_patches(image, self.cfg.patch_size)
        total = n_vis + len(x_s) + len(c_s) + len(y)
        if total > self.cfg.max_seq_len:
            raise ModelError(f"conditioned length {total} exceeds max_seq_len={self.cfg.max_seq_len}")
        hidden, n_prefix = self.hidden_states(x_s, image, c_s, y[:-1])
        rows = range(n_prefix - 1, n_prefix - 1 + len(y))
        logp = self.next_token_logprobs(hidden, rows)
        onehot = np.zeros((len(y), self.cfg.vocab_size))
        onehot[np.arange(len(y)), y] = 1.0
        g = self.graph
        return g.sum(g.mul(logp, g.const(onehot)))


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.full((T, T), -1e9), k=1)


def _n_patches(image: np.ndarray, p: int) -> int:
    h, w = np.shape(image)[:2]
    return (h // p) * (w // p)


def encode_image(params: ModelParams, image: np.ndarray) -> np.ndarray:
    mg = ModelGraph(params, trainable=())
    return mg.graph.value(mg.encode_image(image)).copy()


def sequence_logprob(params: ModelParams, x, image, c, y) -> float:
    mg = ModelGraph(params, trainable=())
    return mg.graph.scalar(mg.sequence_logprob(x, image, c, y))


def step_logprobs(params: ModelParams, x, image, c, y) -> np.ndarray:
    """Full next-token log-distributions at every response position, (|y|, V)."""
    mg = ModelGraph(params, trainable=())
    y = tuple(int(i) for i in y)
    hidden, n_prefix = mg.hidden_states(x, image, c, y[:-1])
    node = mg.next_token_logprobs(hidden, range(n_prefix - 1, n_prefix - 1 + len(y)))
    return mg.graph.value(node).copy()


def final_hidden(params: ModelParams, x, image, c, y) -> np.ndarray:
    """Pre-head hidden vector at the last position of ``[image; x; c; y]``."""
    mg = ModelGraph(params, trainable=())
    hidden, _ = mg.hidden_states(x, image, c, y)
    return mg.graph.value(hidden)[-1].copy()


def generate(params: ModelParams, x, image, c, max_len: int) -> tuple[int, ...]:
    """Greedy decoding; ties go to the lowest token id. Stops at EOS or max_len."""
    cfg = params.config
    cond = _n_patches(image, cfg.patch_size) + len(_strip_pad(x)) + len(_strip_pad(c))
    if max_len < 1 or max_len > cfg.max_seq_len - cond:
        raise ModelError(f"max_len={max_len} must be in [1, {cfg.max_seq_len - cond}]")
    out: list[int] = []
    while len(out) < max_len:
        mg = ModelGraph(params, trainable=())
        hidden, _ = mg.hidden_states(x, image, c, out)
        T = mg.graph.value(hidden).shape[0]
        logp = mg.graph.value(mg.next_token_logprobs(hidden, [T - 1]))[0]
        tok = int(np.argmax(logp))  # argmax returns the first maximum
        out.append(tok)
        if tok == EOS_ID:
            break
    return tuple(out)
