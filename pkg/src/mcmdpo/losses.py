"""DPO and the seven multifaceted preference losses.

Every term has the same shape, ``-log sigmoid(r(chosen) - r(rejected))``, where
``r = beta * (log pi_policy - log pi_reference)``. The chosen conditioning is
always ``(m_w, c_w, y_w)``; the terms differ only in which of image, context
and response are swapped for their rejected versions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Graph
from .model import ModelGraph, ModelParams, _strip_pad

TERMS = ("rpo", "vpo", "cpo", "vrpo", "crpo", "vcpo", "mtpo")

# which of (image, context, response) is rejected in each term
REJECTED = {
    "rpo": ("w", "w", "l"),
    "vpo": ("l", "w", "w"),
    "cpo": ("w", "l", "w"),
    "vrpo": ("l", "w", "l"),
    "crpo": ("w", "l", "l"),
    "vcpo": ("l", "l", "w"),
    "mtpo": ("l", "l", "l"),
}
CHOSEN = ("w", "w", "w")

# coefficient name for each term in the weighted sum
TERM_WEIGHT = {"rpo": "lam", "vpo": "alpha", "cpo": "alpha",
               "vrpo": "gamma", "crpo": "gamma", "vcpo": "gamma", "mtpo": "gamma"}

LOSS_GROUPS = {
    "Single": ("rpo", "vpo", "cpo"),
    "Pair": ("vrpo", "crpo", "vcpo"),
    "Multi": ("mtpo",),
    "RPO": ("rpo",), "VPO": ("vpo",), "CPO": ("cpo",), "VRPO": ("vrpo",),
    "CRPO": ("crpo",), "VCPO": ("vcpo",), "MTPO": ("mtpo",),
}


class LossError(ValueError):
    pass


class DegeneratePairError(LossError):
    pass


def parse_ablation(spec: str) -> frozenset[str]:
    """Terms removed by an ablation such as ``-Multi``, ``-Single+Pair`` or ``-Pair-CPO``."""
    spec = spec.strip()
    if spec in ("", "full", "none"):
        return frozenset()
    if not spec.startswith("-"):
        raise LossError(f"ablation {spec!r} must start with '-'")
    removed: set[str] = set()
    for chunk in spec[1:].split("-"):
        for name in chunk.split("+"):
            if name not in LOSS_GROUPS:
                raise LossError(f"unknown loss group {name!r} in ablation {spec!r}")
            removed.update(LOSS_GROUPS[name])
    return frozenset(removed)


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    alpha: float = 0.5
    gamma: float = 0.2
    beta: float = 0.1
    disabled: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if min(self.lam, self.alpha, self.gamma) < 0:
            raise LossError("lambda, alpha and gamma must be nonnegative")
        if max(self.lam, self.alpha, self.gamma) <= 0:
            raise LossError("at least one of lambda, alpha, gamma must be positive")
        if self.beta <= 0:
            raise LossError("beta must be positive")
        unknown = set(self.disabled) - set(TERMS)
        if unknown:
            raise LossError(f"unknown terms {sorted(unknown)}")
        object.__setattr__(self, "disabled", frozenset(self.disabled))

    def coefficient(self, term: str) -> float:
        if term in self.disabled:
            return 0.0
        return float(getattr(self, TERM_WEIGHT[term]))


@dataclass(frozen=True)
class Conditioning:
    m: np.ndarray
    c: tuple[int, ...]
    y: tuple[int, ...]


@dataclass(frozen=True)
class PreferenceItem:
    x: tuple[int, ...]
    m_w: np.ndarray
    m_l: np.ndarray
    c_w: tuple[int, ...]
    c_l: tuple[int, ...]
    y_w: tuple[int, ...]
    y_l: tuple[int, ...]
    id: str = ""

    def __post_init__(self) -> None:
        if tuple(self.y_w) == tuple(self.y_l):
            raise LossError(f"item {self.id!r}: chosen and rejected responses are identical")

    def conditioning(self, key: tuple[str, str, str]) -> Conditioning:
        m = self.m_w if key[0] == "w" else self.m_l
        c = self.c_w if key[1] == "w" else self.c_l
        y = self.y_w if key[2] == "w" else self.y_l
        return Conditioning(m, tuple(c), tuple(y))


@dataclass
class LossBreakdown:
    rpo: float
    vpo: float
    cpo: float
    vrpo: float
    crpo: float
    vcpo: float
    mtpo: float
    combined: float

    def as_dict(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TERMS + ("combined",)}


def _same_conditioning(a: Conditioning, b: Conditioning) -> bool:
    return (np.shape(a.m) == np.shape(b.m) and np.array_equal(a.m, b.m)
            and _strip_pad(a.c) == _strip_pad(b.c) and tuple(a.y) == tuple(b.y))


def neg_log_sigmoid(graph: Graph, margin: int) -> int:
    """``-log sigmoid(margin)`` as ``-log_softmax([0, margin])[1]``."""
    pair = graph.mul(graph.const(np.array([0.0, 1.0])), margin)
    lsm = graph.log_softmax(pair)
    picked = graph.sum(graph.mul(lsm, graph.const(np.array([0.0, 1.0]))))
    return graph.scale(picked, -1.0)


def pref_loss_from_margin(margin: float) -> float:
    g = Graph()
    return g.scalar(neg_log_sigmoid(g, g.const(margin)))


class ReferenceCache:
    """Memoised reference log-probabilities; the reference never changes."""

    def __init__(self, reference: ModelParams):
        self.reference = reference
        self._memo: dict[tuple, tuple[np.ndarray, float]] = {}

    def logprob(self, x, cond: Conditioning) -> float:
        key = (id(cond.m), tuple(x), _strip_pad(cond.c), tuple(cond.y))
        hit = self._memo.get(key)
        if hit is not None and hit[0] is cond.m:
            return hit[1]
        mg = ModelGraph(self.reference, trainable=())
        value = mg.graph.scalar(mg.sequence_logprob(x, cond.m, cond.c, cond.y))
        self._memo[key] = (cond.m, value)
        return value


class PreferenceGraph:
    """Builds reward and loss nodes for one policy on one graph."""

    def __init__(self, policy: ModelParams, reference: ModelParams | ReferenceCache, beta: float,
                 trainable: Iterable[str] | None = None, graph: Graph | None = None):
        self.mg = ModelGraph(policy, trainable, graph)
        self.graph = self.mg.graph
        self.ref = reference if isinstance(reference, ReferenceCache) else ReferenceCache(reference)
        self.beta = beta
        self._rewards: dict[tuple, tuple[Conditioning, int]] = {}

    def reward(self, x, cond: Conditioning) -> int:
        key = (id(cond.m), tuple(x), _strip_pad(cond.c), tuple(cond.y))
        hit = self._rewards.get(key)
        if hit is not None and hit[0].m is cond.m:
            return hit[1]
        g = self.graph
        policy_lp = self.mg.sequence_logprob(x, cond.m, cond.c, cond.y)
        ref_lp = g.const(self.ref.logprob(x, cond))
        node = g.scale(g.sub(policy_lp, ref_lp), self.beta)
        self._rewards[key] = (cond, node)
        return node

    def pref_term(self, x, chosen: Conditioning, rejected: Conditioning) -> int:
        if _same_conditioning(chosen, rejected):
            raise DegeneratePairError("chosen and rejected conditionings are identical")
        g = self.graph
        return neg_log_sigmoid(g, g.sub(self.reward(x, chosen), self.reward(x, rejected)))

    def mdpo(self, x, m_w, y_w, y_l, c=()) -> int:
        c = tuple(c)
        return self.pref_term(x, Conditioning(m_w, c, tuple(y_w)), Conditioning(m_w, c, tuple(y_l)))

    def mcm_terms(self, item: PreferenceItem, weights: LossWeights) -> dict[str, int]:
        """Node per term plus ``"combined"`` (the weighted sum)."""
        g = self.graph
        chosen = item.conditioning(CHOSEN)
        nodes = {t: self.pref_term(item.x, chosen, item.conditioning(REJECTED[t])) for t in TERMS}
        # grouped as lam*(rpo) + alpha*(vpo + cpo) + gamma*(vrpo + crpo + vcpo + mtpo)
        combined = None
        for coef_name in ("lam", "alpha", "gamma"):
            members = [t for t in TERMS if TERM_WEIGHT[t] == coef_name and t not in weights.disabled]
            coef = float(getattr(weights, coef_name))
            if not members or coef == 0.0:
                continue
            group = nodes[members[0]]
            for t in members[1:]:
                group = g.add(group, nodes[t])
            part = g.scale(group, coef)
            combined = part if combined is None else g.add(combined, part)
        nodes["combined"] = combined if combined is not None else g.scale(nodes["rpo"], 0.0)
        return nodes


def reward(policy: ModelParams, reference: ModelParams, beta: float, x, cond: Conditioning) -> float:
    pg = PreferenceGraph(policy, reference, beta)
    return pg.graph.scalar(pg.reward(x, cond))


def pref_term(policy: ModelParams, reference: ModelParams, beta: float, x,
              chosen: Conditioning, rejected: Conditioning) -> float:
    pg = PreferenceGraph(policy, reference, beta)
    return pg.graph.scalar(pg.pref_term(x, chosen, rejected))


def mdpo_baseline_loss(policy: ModelParams, reference: ModelParams, beta: float, x, m_w, y_w, y_l,
                       c: Sequence[int] = ()) -> float:
    """Response-only DPO. ``c`` defaults to the empty context."""
    pg = PreferenceGraph(policy, reference, beta)
    return pg.graph.scalar(pg.mdpo(x, m_w, y_w, y_l, c))


def mcm_dpo_loss(policy: ModelParams, reference: ModelParams | ReferenceCache,
                 item: PreferenceItem, weights: LossWeights) -> LossBreakdown:
    pg = PreferenceGraph(policy, reference, weights.beta)
    nodes = pg.mcm_terms(item, weights)
    return LossBreakdown(**{k: pg.graph.scalar(v) for k, v in nodes.items()})


@dataclass
class BatchLoss:
    loss: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray]
    graph: Graph
    root: int


def build_batch_graph(policy: ModelParams, reference: ModelParams | ReferenceCache,
                      items: Sequence[PreferenceItem], weights: LossWeights,
                      trainable: Iterable[str] | None = None,
                      method: str = "mcm_dpo") -> tuple[PreferenceGraph, int, dict[str, list[int]]]:
    """One graph for the whole batch; returns (builder, mean-loss node, per-term nodes)."""
    if not items:
        raise LossError("empty batch")
    pg = PreferenceGraph(policy, reference, weights.beta, trainable)
    g = pg.graph
    per_term: dict[str, list[int]] = {}
    total = None
    for item in items:
        if method == "mcm_dpo":
            nodes = pg.mcm_terms(item, weights)
        elif method == "dpo":
            rpo = pg.mdpo(item.x, item.m_w, item.y_w, item.y_l, item.c_w)
            nodes = {"rpo": rpo, "combined": g.scale(rpo, weights.lam)}
        else:
            raise LossError(f"unknown method {method!r}")
        for k, v in nodes.items():
            per_term.setdefault(k, []).append(v)
        total = nodes["combined"] if total is None else g.add(total, nodes["combined"])
    root = g.scale(total, 1.0 / len(items))
    return pg, root, per_term


def batch_loss(policy: ModelParams, reference: ModelParams | ReferenceCache,
               items: Sequence[PreferenceItem], weights: LossWeights,
               trainable: Iterable[str] | None = None, method: str = "mcm_dpo") -> BatchLoss:
    """Mean combined loss over ``items`` with gradients and per-term means."""
    pg, root, per_term = build_batch_graph(policy, reference, items, weights, trainable, method)
    g = pg.graph
    terms = {k: float(np.mean([g.scalar(n) for n in v])) for k, v in per_term.items()}
    return BatchLoss(g.scalar(root), terms, g.backward(root), g, root)
