"""Dataset construction: ingestion, filtering, dedup, name redaction, grammar
correction, rejected-sample generation and swap-verified preference pairs.
"""
from __future__ import annotations

import json
import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import numpy as np

from .clients import ClientError, LlmClient
from .io_utils import atomic_write_text
from .rejection import (
    Diffusion,
    RejectImageStrategy,
    facet_rngs,
    make_rejected_image,
    make_rejected_response,
    pick_context_index,
    strategy_name,
)
from .text import detokenize, tokenize

log = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.10
MAX_ATTEMPTS = 3
PERSON = "[person]"
REQUIRED_FIELDS = ("id", "post_text", "alt_text")


class PipelineError(ValueError):
    pass


# -- ingestion -------------------------------------------------------------------


@dataclass(frozen=True)
class RawPost:
    id: str
    post_text: str
    alt_text: str
    media_kind: str = "static"
    image: np.ndarray | None = None
    image_path: str | None = None
    language: str | None = None

    def load_image(self, base: Path | None = None) -> np.ndarray | None:
        if self.image is not None:
            return self.image
        if self.image_path is None:
            return None
        p = Path(self.image_path)
        if base is not None and not p.is_absolute():
            p = base / p
        return np.asarray(np.load(p), dtype=np.float64)

    def to_record(self) -> dict:
        rec = {"id": self.id, "post_text": self.post_text, "alt_text": self.alt_text, "media_kind": self.media_kind}
        if self.image is not None:
            h, w, c = self.image.shape
            rec["image"] = {"h": h, "w": w, "c": c, "data": self.image.reshape(-1).tolist()}
        if self.image_path is not None:
            rec["image_path"] = self.image_path
        if self.language is not None:
            rec["language"] = self.language
        return rec

    def replace(self, **changes) -> "RawPost":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return RawPost(**fields)


def decode_image(spec) -> np.ndarray:
    try:
        h, w, c = int(spec["h"]), int(spec["w"]), int(spec["c"])
        data = np.asarray(spec["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise PipelineError(f"bad inline image: {exc}") from exc
    if data.size != h * w * c:
        raise PipelineError(f"inline image has {data.size} values, expected {h}*{w}*{c}")
    return data.reshape(h, w, c)


def parse_record(rec) -> RawPost:
    if not isinstance(rec, dict):
        raise PipelineError("record is not an object")
    for key in REQUIRED_FIELDS:
        if not isinstance(rec.get(key), str):
            raise PipelineError(f"missing or non-string field {key!r}")
    if not rec["id"]:
        raise PipelineError("empty id")
    media = rec.get("media_kind", "static")
    if media not in ("static", "animated"):
        raise PipelineError(f"media_kind {media!r} not in static/animated")
    image = decode_image(rec["image"]) if "image" in rec else None
    path = rec.get("image_path")
    if image is None and path is None:
        raise PipelineError("record has neither image nor image_path")
    return RawPost(rec["id"], rec["post_text"], rec["alt_text"], media, image, path, rec.get("language"))


@dataclass
class IngestResult:
    posts: list[RawPost]
    malformed: list[tuple[int, str]]

    def __iter__(self) -> Iterator[RawPost]:
        return iter(self.posts)

    def __len__(self) -> int:
        return len(self.posts)


def ingest(path) -> IngestResult:
    """Read one JSON record per line; malformed lines are logged and skipped."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise PipelineError(f"cannot read {path}: {exc}") from exc
    posts, bad, seen = [], [], set()
    n = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        n += 1
        try:
            post = parse_record(json.loads(line))
            if post.id in seen:
                raise PipelineError(f"duplicate id {post.id!r}")
        except (json.JSONDecodeError, PipelineError) as exc:
            log.warning("%s:%d: skipped malformed record: %s", path, lineno, exc)
            bad.append((lineno, str(exc)))
            continue
        seen.add(post.id)
        posts.append(post)
    if n and len(bad) / n > MAX_MALFORMED_FRACTION:
        raise PipelineError(f"{path}: {len(bad)} of {n} lines malformed (first at line {bad[0][0]}: {bad[0][1]})")
    return IngestResult(posts, bad)


def write_posts(path, posts: Iterable[RawPost]) -> None:
    atomic_write_text(path, "".join(json.dumps(p.to_record(), sort_keys=True) + "\n" for p in posts))


# -- filtering -------------------------------------------------------------------

ENGLISH_STOPWORDS = frozenset(
    "a an the and or but of in on at to for with by from is are was were be been this that these those "
    "it its my your our their his her i you we they he she me us them so just very not no all some".split()
)


@dataclass(frozen=True)
class FilterRules:
    min_alt_words: int = 5
    reject_animated: bool = True
    reject_hashtags: bool = True
    english_only: bool = True

    def __post_init__(self) -> None:
        if self.min_alt_words < 1:
            raise PipelineError("min_alt_words must be >= 1")


@dataclass(frozen=True)
class Keep:
    kept: bool = True


@dataclass(frozen=True)
class Drop:
    reason: str
    kept: bool = False


_HASHTAG = re.compile(r"(?<!\w)#\w+")


def looks_english(text: str) -> bool:
    """At least 90% ASCII characters and one common English function word."""
    if not text:
        return False
    ascii_share = sum(ch.isascii() for ch in text) / len(text)
    words = set(re.findall(r"[a-z]+", text.lower()))
    return ascii_share >= 0.9 and bool(words & ENGLISH_STOPWORDS)


def filter_sample(raw: RawPost, rules: FilterRules = FilterRules()) -> Keep | Drop:
    if rules.reject_animated and raw.media_kind == "animated":
        return Drop("animated")
    if rules.english_only and not looks_english(f"{raw.post_text} {raw.alt_text}".strip()):
        return Drop("non_english")
    if rules.reject_hashtags and (_HASHTAG.search(raw.post_text) or _HASHTAG.search(raw.alt_text)):
        return Drop("hashtag")
    if len(raw.alt_text.split()) < rules.min_alt_words:
        return Drop("min_words")
    return Keep()


# -- deduplication ---------------------------------------------------------------


class Embedder(Protocol):
    def embed(self, post: RawPost) -> tuple[np.ndarray | None, np.ndarray | None]: ...


@dataclass(frozen=True)
class ToyEmbedder:
    """Hashed bag-of-words for text; per-region intensity histograms for images."""

    text_dim: int = 256
    regions: int = 4
    bins: int = 8

    def text_vector(self, text: str) -> np.ndarray:
        v = np.zeros(self.text_dim)
        for tok in tokenize(text):
            v[zlib.crc32(tok.encode("utf-8")) % self.text_dim] += 1.0
        return v

    def image_vector(self, image: np.ndarray) -> np.ndarray:
        gray = np.asarray(image, dtype=np.float64).mean(axis=2)
        h, w = gray.shape
        rows = np.array_split(np.arange(h), self.regions)
        cols = np.array_split(np.arange(w), self.regions)
        hists = []
        for r in rows:
            for c in cols:
                block = gray[np.ix_(r, c)]
                hist, _ = np.histogram(block, bins=self.bins, range=(0.0, 1.0))
                hists.append(hist)
        return np.concatenate(hists).astype(np.float64)

    def embed(self, post: RawPost) -> tuple[np.ndarray | None, np.ndarray | None]:
        image = post.image
        return self.text_vector(f"{post.post_text} {post.alt_text}"), None if image is None else self.image_vector(image)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0 or a.shape != b.shape:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def dedup(samples: Sequence[RawPost], embedder: Embedder | None = None,
          threshold: float = 0.95) -> tuple[list[RawPost], list[str]]:
    """Greedy first-wins scan: drop a sample whose text or image embedding is
    within ``threshold`` cosine of any already-kept sample."""
    if not 0.0 < threshold <= 1.0:
        raise PipelineError(f"threshold must be in (0, 1], got {threshold}")
    embedder = embedder or ToyEmbedder()
    kept, kept_vecs, dropped = [], [], []
    for s in samples:
        tv, iv = embedder.embed(s)
        dup = False
        for ktv, kiv in kept_vecs:
            # tolerance absorbs rounding when identical vectors give cosine 1 - 1ulp
            if (tv is not None and ktv is not None and cosine(tv, ktv) >= threshold - 1e-12) or \
               (iv is not None and kiv is not None and cosine(iv, kiv) >= threshold - 1e-12):
                dup = True
                break
        if dup:
            dropped.append(s.id)
        else:
            kept.append(s)
            kept_vecs.append((tv, iv))
    return kept, dropped


# -- person names ----------------------------------------------------------------

FIRST_NAMES = frozenset("""
aaron adam alex alice amanda amy andrew anna anthony ben benjamin beth bob brian carlos carol
charles charlie chris christina daniel david diana emily emma eric ethan frank george grace hannah
harry helen henry isabella jack jacob james jane jason jennifer jessica john jose joseph julia kate
kevin laura linda lisa lucas lucy maria mark mary matthew megan michael mike mia noah olivia paul
peter rachel richard robert ryan sam sarah sophia steven susan thomas tom william zoe
""".split())

_CAP_WORD = re.compile(r"\b[A-Z][a-z]+\b")


def lexicon_recognizer(text: str, lexicon: frozenset[str] = FIRST_NAMES) -> list[tuple[int, int]]:
    """Spans of a known capitalised first name plus an immediately following capitalised word."""
    spans = []
    words = list(_CAP_WORD.finditer(text))
    i = 0
    while i < len(words):
        m = words[i]
        if m.group().lower() in lexicon:
            end = m.end()
            if i + 1 < len(words) and text[m.end():words[i + 1].start()] == " ":
                end = words[i + 1].end()
                i += 1
            spans.append((m.start(), end))
        i += 1
    return spans


def replace_person_names(text: str, recognizer: Callable[[str], list[tuple[int, int]]] | None = None) -> str:
    recognizer = recognizer or lexicon_recognizer
    out, last = [], 0
    for start, end in sorted(recognizer(text)):
        if start < last:
            continue
        out.append(text[last:start])
        out.append(PERSON)
        last = end
    out.append(text[last:])
    return "".join(out)


# -- grammar correction ----------------------------------------------------------


@dataclass(frozen=True)
class GrammarResult:
    changed: bool
    text: str
    flagged: bool = False


_MARKER = re.compile(r"corrected text\s*:\s*", re.IGNORECASE)


def parse_grammar_reply(reply: str) -> tuple[bool, str | None] | None:
    """``(changed, corrected)`` or None when the reply breaks the format."""
    lines = [ln.strip() for ln in reply.strip().splitlines() if ln.strip()]
    if not lines:
        return None
    verdict = lines[0].strip("'\"`()1. ").lower()
    if verdict.startswith("false"):
        return False, None
    if not verdict.startswith("true"):
        return None
    m = _MARKER.search(reply)
    if m is None:
        return None
    corrected = reply[m.end():].strip().strip("\"'").strip()
    return (True, corrected) if corrected else None


def grammar_correct(text: str, client: LlmClient, attempts: int = MAX_ATTEMPTS) -> GrammarResult:
    prompt = client.render("grammar", alt_text=text)
    for _ in range(attempts):
        try:
            parsed = parse_grammar_reply(client.ask(prompt))
        except ClientError as exc:
            log.warning("grammar correction transport failure: %s", exc)
            break
        if parsed is None:
            continue
        changed, corrected = parsed
        return GrammarResult(True, corrected) if changed else GrammarResult(False, text)
    log.warning("grammar reply unusable; keeping original text")
    return GrammarResult(False, text, flagged=True)


# -- preference verification -----------------------------------------------------


@dataclass
class PreferencePair:
    sample_id: str
    chosen: str
    rejected: str
    status: str = "unverified"
    regenerations: int = 0
    history: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.chosen == self.rejected:
            raise PipelineError(f"{self.sample_id}: chosen and rejected alt-text are identical")

    @property
    def verified(self) -> bool:
        return self.status == "verified" or self.status.startswith("regenerated(")


_ANSWER = re.compile(r"\b([AB])\b")


def parse_judge_reply(reply: str) -> str | None:
    m = _ANSWER.search(reply.strip())
    return m.group(1) if m else None


def judge_prefers_chosen(judge: LlmClient, context: str, chosen: str, rejected: str) -> bool:
    """Swap protocol: the chosen text must win in both presentation orders."""
    first = parse_judge_reply(judge.ask(judge.render("judge", context=context, option_a=chosen, option_b=rejected)))
    if first != "A":
        return False
    second = parse_judge_reply(judge.ask(judge.render("judge", context=context, option_a=rejected, option_b=chosen)))
    return second == "B"


def verify_preference(pair: PreferencePair, judge: LlmClient, context: str = "",
                      regenerate: Callable[[int], str] | None = None,
                      max_attempts: int = MAX_ATTEMPTS) -> PreferencePair:
    """Judge the pair in both orders, regenerating the rejected text on failure.

    ``max_attempts`` bounds the total number of verification rounds. A round
    lost to a transport error is retried with the same rejected text.
    """
    if not 1 <= max_attempts <= MAX_ATTEMPTS:
        raise PipelineError(f"max_attempts must be in [1, {MAX_ATTEMPTS}]")
    transport_failed = False
    for attempt in range(1, max_attempts + 1):
        try:
            ok = judge_prefers_chosen(judge, context, pair.chosen, pair.rejected)
            transport_failed = False
        except ClientError as exc:
            log.warning("%s: judge transport failure on attempt %d: %s", pair.sample_id, attempt, exc)
            pair.history.append("transport_error")
            transport_failed = True
            continue
        if ok:
            pair.status = "verified" if pair.regenerations == 0 else f"regenerated({pair.regenerations})"
            pair.history.append("verified")
            return pair
        if attempt == max_attempts or regenerate is None:
            break
        new = regenerate(attempt)
        if new == pair.chosen:
            log.warning("%s: regenerated rejected text equals the chosen text", pair.sample_id)
            break
        pair.rejected = new
        pair.regenerations += 1
        pair.history.append(f"regenerated({pair.regenerations})")
    pair.status = "dropped(transport)" if transport_failed else "dropped"
    pair.history.append(pair.status)
    return pair


# -- preference manifest ---------------------------------------------------------

MANIFEST_KIND = "mcmdpo-preference-manifest"
ITEM_FIELDS = ("id", "prompt", "image", "image_rejected", "context", "context_rejected", "alt_text",
               "alt_text_rejected", "image_strategy", "noise_T", "context_source_id", "reject_mode",
               "verify_status")


@dataclass
class Manifest:
    items: list[dict]
    splits: dict[str, int] = field(default_factory=dict)
    seed: int | None = None

    def header(self) -> dict:
        return {"kind": MANIFEST_KIND, "n_items": len(self.items), "splits": dict(self.splits), "seed": self.seed}


def _image_record(image: np.ndarray) -> dict:
    h, w, c = image.shape
    return {"h": h, "w": w, "c": c, "data": np.asarray(image, dtype=np.float64).reshape(-1).tolist()}


def write_manifest(path, manifest: Manifest) -> None:
    lines = [json.dumps(manifest.header(), sort_keys=True)]
    lines += [json.dumps(item, sort_keys=True) for item in manifest.items]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise PipelineError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("kind") != MANIFEST_KIND:
        raise PipelineError(f"{path}: not a preference manifest")
    items = [json.loads(ln) for ln in lines[1:]]
    if header.get("n_items") != len(items):
        raise PipelineError(f"{path}: header says {header.get('n_items')} items, found {len(items)}")
    for item in items:
        missing = [k for k in ITEM_FIELDS if k not in item]
        if missing:
            raise PipelineError(f"manifest item {item.get('id', '?')!r} lacks {missing}")
    return Manifest(items, dict(header.get("splits", {})), header.get("seed"))


def preference_record(item_id: str, prompt: str, image: np.ndarray, image_rejected: np.ndarray, context: str,
                      context_rejected: str, context_source_id: str, alt_text: str, alt_text_rejected: str,
                      strategy: RejectImageStrategy, reject_mode: str, verify_status: str) -> dict:
    """One manifest line, including the provenance of every rejected facet."""
    return {
        "id": item_id,
        "prompt": prompt,
        "image": _image_record(image),
        "image_rejected": _image_record(image_rejected),
        "context": context,
        "context_rejected": context_rejected,
        "alt_text": alt_text,
        "alt_text_rejected": alt_text_rejected,
        "image_strategy": strategy_name(strategy),
        "noise_T": strategy.T if isinstance(strategy, Diffusion) else None,
        "context_source_id": context_source_id,
        "reject_mode": reject_mode,
        "verify_status": verify_status,
    }


def build_preference_manifest(samples: Sequence[RawPost], strategy: RejectImageStrategy, seed: int,
                              judge: LlmClient | None = None, reject_client: LlmClient | None = None,
                              prompt: str = "write the alt text", vocabulary=None,
                              splits: dict[str, int] | None = None, base: Path | None = None) -> Manifest:
    """One preference item per sample; samples whose pair fails verification are skipped.

    Rejected responses come from ``reject_client`` when given, otherwise from
    local synthetic corruption. Without a judge every pair is kept as
    ``unverified``.
    """
    if len(samples) < 2:
        raise PipelineError("need at least two samples to draw rejected contexts")
    mode = "external_client" if reject_client is not None else "synthetic_corruption"
    images = [s.load_image(base) for s in samples]
    contexts = [s.post_text for s in samples]
    items = []
    for i, s in enumerate(samples):
        resp_rng, ctx_rng, img_rng = facet_rngs(seed, i)
        try:

            def regen(_attempt: int, s=s, rng=resp_rng) -> str:
                return detokenize(make_rejected_response(s.post_text, s.alt_text, mode, reject_client, rng, vocabulary))

            pair = PreferencePair(s.id, s.alt_text, regen(0))
            if judge is not None:
                pair = verify_preference(pair, judge, s.post_text, regen)
                if not pair.verified:
                    log.info("%s: preference pair %s", s.id, pair.status)
                    continue
            j = pick_context_index(contexts, i, ctx_rng, require_different=True)
            m_l = make_rejected_image(images[i], strategy, img_rng, pool=images, index=i)
        except (PipelineError, ValueError, ClientError) as exc:
            log.warning("%s: skipped: %s", s.id, exc)
            continue
        items.append(preference_record(s.id, prompt, images[i], m_l, s.post_text, contexts[j], samples[j].id,
                                       pair.chosen, pair.rejected, strategy, mode, pair.status))
    return Manifest(items, dict(splits or {}), seed)


# -- whole pipeline --------------------------------------------------------------


@dataclass
class CleanResult:
    posts: list[RawPost]
    dropped: dict[str, str]
    flagged: list[str]


def clean_posts(posts: Sequence[RawPost], rules: FilterRules = FilterRules(), threshold: float = 0.95,
                embedder: Embedder | None = None, grammar: LlmClient | None = None) -> CleanResult:
    """Filter, dedup, redact names and (optionally) grammar-correct, keeping input order."""
    dropped: dict[str, str] = {}
    flagged: list[str] = []
    survivors = []
    for p in posts:
        verdict = filter_sample(p, rules)
        if verdict.kept:
            survivors.append(p)
        else:
            dropped[p.id] = verdict.reason
    survivors, dup_ids = dedup(survivors, embedder, threshold)
    dropped.update({i: "duplicate" for i in dup_ids})
    out = []
    for p in survivors:
        p = p.replace(post_text=replace_person_names(p.post_text), alt_text=replace_person_names(p.alt_text))
        if grammar is not None:
            fixed = []
            for text in (p.post_text, p.alt_text):
                res = grammar_correct(text, grammar)
                if res.flagged:
                    flagged.append(p.id)
                fixed.append(res.text)
            p = p.replace(post_text=fixed[0], alt_text=fixed[1])
        out.append(p)
    return CleanResult(out, dropped, sorted(set(flagged)))
