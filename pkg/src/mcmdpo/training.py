"""Two-stage training (SFT, then DPO or MCM-DPO), evaluation, sweeps and PCA export."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import NonFiniteError
from .io_utils import atomic_write_text
from .losses import TERMS, LossWeights, PreferenceItem, ReferenceCache, batch_loss, parse_ablation
from .metrics import MetricReport, evaluate_texts, preference_accuracy
from .model import ModelConfig, ModelGraph, ModelParams, final_hidden, generate, trainable_groups
from .rejection import (
    RejectImageStrategy,
    facet_rngs,
    make_rejected_image,
    pick_context_index,
    strategy_from_name,
)
from .text import Vocab

log = logging.getLogger(__name__)

METHODS = ("dpo", "mcm_dpo")
OPTIMIZERS = ("sgd", "adam")
STAGE_DEFAULT_LR = {"sft": 1e-2, "pref": 1e-3}

# documented schedules; "desk" is the default
PRESETS = {
    "desk": {"sft": {"lr": 1e-2, "epochs": 5}, "pref": {"lr": 1e-3, "epochs": 5}},
    # one SFT epoch against three preference epochs, with the full-scale learning rates
    "paper-schedule": {"sft": {"lr": 2e-5, "epochs": 1, "batch_size": 128},
                       "pref": {"lr": 5e-7, "epochs": 3, "batch_size": 64}},
}


class TrainingError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "sft"
    method: str = "mcm_dpo"
    paradigm: str = "P4"
    lam: float = 1.0
    alpha: float = 0.5
    gamma: float = 0.2
    beta: float = 0.1
    ablation: str = ""
    lr: float | None = None
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "sgd"
    clip_norm: float | None = None
    strategy: str = "diffusion"
    noise_T: int = 700
    max_gen_len: int = 24
    model: dict = field(default_factory=dict)
    train_path: str | None = None
    pref_path: str | None = None
    test_path: str | None = None
    test_pref_path: str | None = None
    init_checkpoint: str | None = None
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGE_DEFAULT_LR:
            raise TrainingError(f"stage must be sft or pref, got {self.stage!r}")
        if self.method not in METHODS:
            raise TrainingError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr is not None and not self.lr > 0:
            raise TrainingError("lr must be > 0")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise TrainingError("clip_norm must be > 0")
        trainable_groups(self.paradigm, "S1")
        self.weights()
        self.model_config()

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else STAGE_DEFAULT_LR[self.stage]

    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.alpha, self.gamma, self.beta, parse_ablation(self.ablation))

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{"seed": self.seed, **self.model})

    def reject_strategy(self) -> RejectImageStrategy:
        return strategy_from_name(self.strategy, self.noise_T)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known - {"preset"})
        if unknown:
            raise TrainingError(f"unknown config keys {unknown}")
        data = dict(data)
        preset = data.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise TrainingError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
            stage = data.get("stage", "sft")
            data = {**PRESETS[preset][stage], **data}
        return cls(**data)

    def with_overrides(self, **changes) -> "TrainConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def code_hash() -> str:
    """Digest of the package sources, so reports record which code produced them."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


# -- optimizer -------------------------------------------------------------------


class Optimizer:
    """Plain gradient descent or Adam, with optional global-norm clipping.

    Only parameters present in the gradient dict are touched, so frozen
    groups keep their exact bytes.
    """

    def __init__(self, kind: str = "sgd", lr: float = 1e-2, clip_norm: float | None = None,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in OPTIMIZERS:
            raise TrainingError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.clip_norm, self.betas, self.eps = kind, lr, clip_norm, betas, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Update ``arrays`` in place; returns the pre-clip global gradient norm."""
        names = sorted(grads)
        norm = math.sqrt(sum(float(np.sum(grads[n] * grads[n])) for n in names))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.betas
        for n in names:
            g = grads[n] * scale
            if self.kind == "sgd":
                arrays[n] = arrays[n] - self.lr * g
                continue
            m = b1 * self._m.get(n, 0.0) + (1 - b1) * g
            v = b2 * self._v.get(n, 0.0) + (1 - b2) * g * g
            self._m[n], self._v[n] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            arrays[n] = arrays[n] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        for n in names:
            if not np.all(np.isfinite(arrays[n])):
                raise NonFiniteError(f"parameter {n} became non-finite at step {self.t}; lower the lr")
        return norm


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    return Optimizer(cfg.optimizer, cfg.learning_rate, cfg.clip_norm)


# -- data ------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    """One (image, context, alt-text) triple in text form."""

    id: str
    image: np.ndarray
    context: str
    alt_text: str


@dataclass(frozen=True)
class SftExample:
    x: tuple[int, ...]
    image: np.ndarray
    c: tuple[int, ...]
    y: tuple[int, ...]


def prompt_ids(vocab: Vocab, prompt: str) -> tuple[int, ...]:
    return (vocab.bos_id,) + vocab.encode(prompt, strict=True)


def sft_examples(samples: Sequence[Sample], vocab: Vocab, prompt: str) -> list[SftExample]:
    missing = vocab.missing([prompt] + [s.context for s in samples] + [s.alt_text for s in samples])
    if missing:
        raise TrainingError(f"dataset/vocab mismatch: {len(missing)} tokens missing, e.g. {sorted(missing)[:5]}")
    x = prompt_ids(vocab, prompt)
    return [SftExample(x, s.image, vocab.encode(s.context), vocab.encode_response(s.alt_text)) for s in samples]


def build_items(samples: Sequence[Sample], rejected_texts: Sequence[str], vocab: Vocab, prompt: str, seed: int,
                strategy: RejectImageStrategy) -> list[PreferenceItem]:
    """Preference items with rejected images and contexts drawn per item."""
    if len(samples) != len(rejected_texts):
        raise TrainingError("one rejected alt-text per sample is required")
    x = prompt_ids(vocab, prompt)
    contexts = [vocab.encode(s.context) for s in samples]
    images = [s.image for s in samples]
    items = []
    for i, (s, bad) in enumerate(zip(samples, rejected_texts)):
        _, ctx_rng, img_rng = facet_rngs(seed, i)
        j = pick_context_index(contexts, i, ctx_rng, require_different=True)
        m_l = make_rejected_image(s.image, strategy, img_rng, pool=images, index=i)
        items.append(PreferenceItem(x, s.image, m_l, contexts[i], contexts[j],
                                    vocab.encode_response(s.alt_text), vocab.encode_response(bad), s.id))
    return items


def samples_from_posts(posts, base: Path | None = None) -> list[Sample]:
    out = []
    for p in posts:
        image = p.load_image(base)
        if image is None:
            raise TrainingError(f"sample {p.id!r} has no image")
        out.append(Sample(p.id, image, p.post_text, p.alt_text))
    return out


def items_from_manifest(records: Sequence[dict], vocab: Vocab) -> list[PreferenceItem]:
    """Token-level preference items from manifest lines; a missing field is fatal."""
    from .pipeline import ITEM_FIELDS, decode_image

    items = []
    for rec in records:
        missing = [k for k in ITEM_FIELDS if rec.get(k) is None and k != "noise_T"]
        if missing:
            raise TrainingError(f"manifest item {rec.get('id', '?')!r} lacks {missing}")
        items.append(PreferenceItem(
            prompt_ids(vocab, rec["prompt"]),
            decode_image(rec["image"]),
            decode_image(rec["image_rejected"]),
            vocab.encode(rec["context"]),
            vocab.encode(rec["context_rejected"]),
            vocab.encode_response(rec["alt_text"]),
            vocab.encode_response(rec["alt_text_rejected"]),
            rec["id"],
        ))
    return items


def restrategize(items: Sequence[PreferenceItem], seed: int, strategy: RejectImageStrategy) -> list[PreferenceItem]:
    """Same items with rejected images redrawn under another strategy."""
    pool = [it.m_w for it in items]
    out = []
    for i, it in enumerate(items):
        _, _, img_rng = facet_rngs(seed, i)
        m_l = make_rejected_image(it.m_w, strategy, img_rng, pool=pool, index=i)
        out.append(replace(it, m_l=m_l))
    return out


# -- stages ----------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    terms: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "terms": dict(sorted(self.terms.items()))}


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def sft_loss(params: ModelParams, batch: Sequence[SftExample], trainable: Iterable[str] | None = None):
    """Mean negative log-likelihood of the gold responses, its node and graph."""
    mg = ModelGraph(params, trainable)
    g = mg.graph
    total = None
    for ex in batch:
        node = mg.sequence_logprob(ex.x, ex.image, ex.c, ex.y)
        total = node if total is None else g.add(total, node)
    root = g.scale(total, -1.0 / len(batch))
    return g, root


def train_sft(params: ModelParams, examples: Sequence[SftExample], cfg: TrainConfig) -> tuple[ModelParams, list[EpochLog]]:
    if not examples:
        raise TrainingError("no SFT examples")
    trainable = trainable_groups(cfg.paradigm, "S1")
    arrays = dict(params.arrays)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    logs = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(examples), cfg.batch_size, rng):
            g, root = sft_loss(ModelParams(params.config, arrays), [examples[i] for i in idx], trainable)
            total += g.scalar(root) * len(idx)
            opt.step(arrays, g.backward(root))
        logs.append(EpochLog(epoch, total / len(examples)))
        log.info("sft epoch %d: nll %.6f", epoch, logs[-1].loss)
    return ModelParams(params.config, arrays), logs


@dataclass
class PrefResult:
    params: ModelParams
    epochs: list[EpochLog]
    initial_loss: float


def train_pref(sft_params: ModelParams, items: Sequence[PreferenceItem], cfg: TrainConfig) -> PrefResult:
    """Preference optimisation from the SFT weights, which also serve as the frozen reference."""
    if not items:
        raise TrainingError("no preference items")
    trainable = trainable_groups(cfg.paradigm, "S2")
    weights = cfg.weights()
    reference = ReferenceCache(sft_params.copy())
    arrays = dict(sft_params.arrays)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    logs, initial = [], None
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, term_sums = 0.0, {}
        for idx in _batches(len(items), cfg.batch_size, rng):
            batch = [items[i] for i in idx]
            bl = batch_loss(ModelParams(sft_params.config, arrays), reference, batch, weights, trainable, cfg.method)
            if initial is None:
                initial = bl.loss
            loss_sum += bl.loss * len(idx)
            for k, v in bl.terms.items():
                if k != "combined":
                    term_sums[k] = term_sums.get(k, 0.0) + v * len(idx)
            opt.step(arrays, bl.grads)
        terms = {k: v / len(items) for k, v in term_sums.items()}
        logs.append(EpochLog(epoch, loss_sum / len(items), terms))
        log.info("pref epoch %d: loss %.6f %s", epoch, logs[-1].loss,
                 " ".join(f"{k}={terms[k]:.4f}" for k in TERMS if k in terms))
    return PrefResult(ModelParams(sft_params.config, arrays), logs, float(initial))


# -- evaluation ------------------------------------------------------------------


def generate_texts(params: ModelParams, samples: Sequence[Sample], vocab: Vocab, prompt: str,
                   max_len: int = 24) -> list[str]:
    x = prompt_ids(vocab, prompt)
    out = []
    for s in samples:
        c = vocab.encode(s.context)
        n_patches = (s.image.shape[0] // params.config.patch_size) * (s.image.shape[1] // params.config.patch_size)
        room = params.config.max_seq_len - n_patches - len(x) - len(c)
        out.append(vocab.decode_text(generate(params, x, s.image, c, max(1, min(max_len, room)))))
    return out


def evaluate(params: ModelParams, samples: Sequence[Sample], vocab: Vocab, prompt: str,
             items: Sequence[PreferenceItem] | None = None, max_len: int = 24) -> MetricReport:
    generated = generate_texts(params, samples, vocab, prompt, max_len)
    pref = preference_accuracy(params, items) if items else None
    return evaluate_texts(generated, [s.alt_text for s in samples], pref)


# -- reports ---------------------------------------------------------------------


@dataclass
class RunReport:
    stage: str
    config: dict
    epochs: list[EpochLog]
    initial_loss: float | None = None
    metrics: dict | None = None
    pref_acc_before: float | None = None
    pref_acc_after: float | None = None
    wall_time_s: float = 0.0

    def __post_init__(self) -> None:
        if len(self.epochs) != self.config.get("epochs"):
            raise TrainingError(f"report has {len(self.epochs)} epochs, config says {self.config.get('epochs')}")
        for e in self.epochs:
            if not math.isfinite(e.loss) or not all(math.isfinite(v) for v in e.terms.values()):
                raise TrainingError(f"non-finite loss in epoch {e.epoch}")

    def as_dict(self) -> dict:
        """Everything except wall time, which lives in a sidecar file."""
        return {
            "stage": self.stage,
            "config": self.config,
            "config_hash": hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()[:16],
            "code_hash": code_hash(),
            "epochs": [e.as_dict() for e in self.epochs],
            "initial_loss": self.initial_loss,
            "metrics": self.metrics,
            "pref_acc_before": self.pref_acc_before,
            "pref_acc_after": self.pref_acc_after,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=1, sort_keys=True) + "\n"

    def epoch_csv(self) -> str:
        cols = ["epoch", "loss"] + [t for t in TERMS if any(t in e.terms for e in self.epochs)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.loss)] + [repr(e.terms[t]) if t in e.terms else "" for t in cols[2:]])
        return buf.getvalue()

    def write(self, path) -> None:
        path = Path(path)
        atomic_write_text(path, self.to_json())
        atomic_write_text(path.with_suffix(".epochs.csv"), self.epoch_csv())
        atomic_write_text(path.with_suffix(".time.json"), json.dumps({"wall_time_s": self.wall_time_s}) + "\n")


class Stopwatch:
    def __enter__(self) -> "Stopwatch":
        self.start = time.perf_counter()
        self.elapsed = 0.0
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed = time.perf_counter() - self.start


# -- PCA export ------------------------------------------------------------------


def pca_2d(points: np.ndarray, iters: int = 100, tol: float = 1e-9,
           seed: int = 0) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Project mean-centred rows onto the top two principal axes found by power iteration.

    Returns (projected points, components, warnings). A missing axis (rank
    below two) is returned as zeros with a warning.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise TrainingError("PCA needs at least 3 points")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    rng = np.random.default_rng(seed)
    comps, warnings = [], []
    scale = max(float(np.trace(cov)), 1e-300)
    for k in range(2):
        if comps:
            v_prev = comps[-1]
            cov = cov - float(v_prev @ cov @ v_prev) * np.outer(v_prev, v_prev)
        v = rng.standard_normal(cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = cov @ v
            nw = np.linalg.norm(w)
            if nw <= 1e-12 * scale:
                v = None
                break
            w /= nw
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        if v is None:
            warnings.append(f"covariance has rank < {k + 1}; component {k + 1} set to zero")
            comps.append(np.zeros(cov.shape[0]))
        else:
            comps.append(v)
    C = np.stack(comps)
    proj = Xc @ C.T
    return proj, C, warnings


def embedding_rows(params: ModelParams, samples: Sequence[Sample], generated: Sequence[str], vocab: Vocab,
                   prompt: str) -> tuple[list[tuple[str, str]], np.ndarray]:
    """Final-position hidden state for each generated and each gold alt-text."""
    x = prompt_ids(vocab, prompt)
    keys, vecs = [], []
    for s, gen in zip(samples, generated):
        c = vocab.encode(s.context)
        for kind, text in (("generated", gen), ("gold", s.alt_text)):
            keys.append((s.id, kind))
            vecs.append(final_hidden(params, x, s.image, c, vocab.encode_response(text)))
    return keys, np.stack(vecs)


def embeddings_csv(keys: Sequence[tuple[str, str]], proj: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "kind", "pc1", "pc2"])
    for (sid, kind), (a, b) in zip(keys, proj):
        w.writerow([sid, kind, repr(float(a)), repr(float(b))])
    return buf.getvalue()
