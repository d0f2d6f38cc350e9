"""Captioning metrics and pairwise preference accuracy.

All text metrics take either raw strings or pre-tokenized lists; strings are
tokenized with :func:`mcmdpo.text.tokenize`. Scores are on the unit scale
except CIDEr-D, which carries the conventional factor of 10.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from nltk.stem.porter import PorterStemmer

from .io_utils import atomic_write_text
from .text import tokenize

log = logging.getLogger(__name__)

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4
METEOR_ALIGN_BUDGET = 20000

_stemmer = PorterStemmer()


class MetricError(ValueError):
    pass


def _tokens(text) -> list[str]:
    if isinstance(text, str):
        return tokenize(text)
    return [str(t) for t in text]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- ROUGE-L ---------------------------------------------------------------------


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand:
        log.warning("rouge_l: empty candidate scores 0")
        return 0.0
    if not ref:
        raise MetricError("rouge_l: empty reference")
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


# -- BLEU-4 ----------------------------------------------------------------------


def bleu4(candidates: Sequence, references: Sequence) -> float:
    """Corpus BLEU-4; orders 2..4 with no clipped match get add-one smoothing.

    Unigram precision is never smoothed, so a corpus with no word overlap
    scores exactly 0.
    """
    if len(candidates) != len(references):
        raise MetricError(f"bleu4: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise MetricError("bleu4: empty corpus")
    matches, totals = [0] * 4, [0] * 4
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct, rt = _tokens(cand), _tokens(ref)
        c_len += len(ct)
        r_len += len(rt)
        for n in range(1, 5):
            cg, rg = ngrams(ct, n), ngrams(rt, n)
            matches[n - 1] += sum(min(k, rg[g]) for g, k in cg.items())
            totals[n - 1] += sum(cg.values())
    if c_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = (m + 1) / (t + 1) if m == 0 else m / t
        log_p += math.log(p) / 4
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


# -- CIDEr-D ---------------------------------------------------------------------


def _tfidf(counts: Counter, df: Counter, log_n: float) -> dict:
    return {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in counts.items()}


def cider_d(candidates: Sequence, references: Sequence, sigma: float = CIDER_SIGMA) -> float:
    """Corpus-mean CIDEr-D with one reference per candidate (scale 0..10)."""
    if len(candidates) != len(references):
        raise MetricError(f"cider_d: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise MetricError("cider_d: empty corpus")
    cands = [_tokens(c) for c in candidates]
    refs = [_tokens(r) for r in references]
    log_n = math.log(len(refs))
    dfs = []
    for n in range(1, CIDER_MAX_N + 1):
        df: Counter = Counter()
        for r in refs:
            df.update(set(ngrams(r, n)))
        dfs.append(df)
    scores, degenerate = [], True
    for ct, rt in zip(cands, refs):
        delta = len(ct) - len(rt)
        penalty = math.exp(-(delta ** 2) / (2 * sigma ** 2))
        total = 0.0
        for n in range(1, CIDER_MAX_N + 1):
            vc = _tfidf(ngrams(ct, n), dfs[n - 1], log_n)
            vr = _tfidf(ngrams(rt, n), dfs[n - 1], log_n)
            nc = math.sqrt(sum(v * v for v in vc.values()))
            nr = math.sqrt(sum(v * v for v in vr.values()))
            if nc == 0 or nr == 0:
                continue
            degenerate = False
            dot = sum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
            total += dot / (nc * nr) * penalty
        scores.append(total / CIDER_MAX_N * 10.0)
    if degenerate:
        log.warning("cider_d: every tf-idf vector is zero (degenerate idf); scoring 0")
        return 0.0
    return sum(scores) / len(scores)


# -- simplified METEOR -----------------------------------------------------------


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Runs of matches adjacent and in the same order on both sides."""
    ordered = sorted(pairs)
    if not ordered:
        return 0
    chunks = 1
    for (c0, r0), (c1, r1) in zip(ordered, ordered[1:]):
        if not (c1 == c0 + 1 and r1 == r0 + 1):
            chunks += 1
    return chunks


def _stage_options(cand_idx, ref_idx, key_c, key_r):
    """Per key, every way to pair min(a, b) candidate positions with reference positions."""
    groups = {}
    for i in cand_idx:
        groups.setdefault(key_c[i], ([], []))[0].append(i)
    for j in ref_idx:
        if key_r[j] in groups:
            groups[key_r[j]][1].append(j)
    options = []
    for key in sorted(groups):
        cs, rs = groups[key]
        k = min(len(cs), len(rs))
        if k == 0:
            continue
        opts = []
        for csub in itertools.combinations(cs, k):
            for rperm in itertools.permutations(rs, k):
                opts.append(tuple(zip(csub, rperm)))
        options.append(opts)
    return options


def _n_options(options) -> int:
    return math.prod(len(o) for o in options) if options else 1


def _greedy_stage(cand_idx, ref_idx, key_c, key_r):
    free = list(ref_idx)
    pairs = []
    for i in cand_idx:
        for j in free:
            if key_c[i] == key_r[j]:
                pairs.append((i, j))
                free.remove(j)
                break
    return pairs


def meteor_alignment(cand: Sequence[str], ref: Sequence[str],
                     budget: int = METEOR_ALIGN_BUDGET) -> list[tuple[int, int]]:
    """Exact matches, then Porter-stem matches among the rest; fewest chunks wins.

    The number of matches is fixed by the two stages. Among all alignments
    with that count the one with the fewest chunks is chosen by enumeration;
    past ``budget`` candidates a left-to-right greedy alignment is used.
    """
    stem_c = [_stemmer.stem(t) for t in cand]
    stem_r = [_stemmer.stem(t) for t in ref]
    exact = _stage_options(range(len(cand)), range(len(ref)), cand, ref)
    best, best_chunks, seen = None, None, 0
    if _n_options(exact) <= budget:
        for combo in itertools.product(*exact):
            first = [p for grp in combo for p in grp]
            used_c = {i for i, _ in first}
            used_r = {j for _, j in first}
            rest_c = [i for i in range(len(cand)) if i not in used_c]
            rest_r = [j for j in range(len(ref)) if j not in used_r]
            stem = _stage_options(rest_c, rest_r, stem_c, stem_r)
            seen += _n_options(stem)
            if seen > budget:
                best = None
                break
            for combo2 in itertools.product(*stem):
                pairs = first + [p for grp in combo2 for p in grp]
                ch = count_chunks(pairs)
                if best_chunks is None or ch < best_chunks:
                    best, best_chunks = pairs, ch
    if best is None:
        log.debug("meteor: alignment budget exceeded, using greedy alignment")
        first = _greedy_stage(range(len(cand)), range(len(ref)), cand, ref)
        used_c = {i for i, _ in first}
        used_r = {j for _, j in first}
        second = _greedy_stage([i for i in range(len(cand)) if i not in used_c],
                               [j for j in range(len(ref)) if j not in used_r], stem_c, stem_r)
        best = first + second
    return sorted(best)


def meteor_simplified(candidate, reference) -> float:
    """METEOR without synonym matching."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    pairs = meteor_alignment(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f_mean = p * r / (0.9 * p + 0.1 * r)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return f_mean * (1 - penalty)


# -- preference accuracy ---------------------------------------------------------


def preference_accuracy(policy, items: Sequence) -> float:
    """Share of items whose chosen response outscores the rejected one; ties count half."""
    from .model import sequence_logprob

    if not items:
        raise MetricError("preference_accuracy: no items")
    score = 0.0
    for it in items:
        lw = sequence_logprob(policy, it.x, it.m_w, it.c_w, it.y_w)
        ll = sequence_logprob(policy, it.x, it.m_w, it.c_w, it.y_l)
        score += 1.0 if lw > ll else 0.5 if lw == ll else 0.0
    return score / len(items)


# -- reports ---------------------------------------------------------------------

REPORT_FIELDS = ("rouge_l", "bleu4", "meteor", "cider", "pref_acc", "n")


@dataclass
class MetricReport:
    """Text scores scaled by 100; ``pref_acc`` stays a fraction.

    ``meteor`` is the simplified variant (no synonym stage) and is not
    comparable with toolkit METEOR numbers.
    """

    rouge_l: float
    bleu4: float
    meteor: float
    cider: float
    pref_acc: float | None = None
    n: int = 0

    def __post_init__(self) -> None:
        for name in ("rouge_l", "bleu4", "meteor", "cider"):
            if not math.isfinite(getattr(self, name)):
                raise MetricError(f"{name} is not finite")
        if self.pref_acc is not None and not 0.0 <= self.pref_acc <= 1.0:
            raise MetricError(f"pref_acc={self.pref_acc} outside [0, 1]")
        for name in ("rouge_l", "bleu4", "meteor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0 + 1e-9:
                raise MetricError(f"{name}={v} outside [0, 100]")
        if self.cider < 0:
            raise MetricError(f"cider={self.cider} is negative")

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def csv_header(self) -> str:
        return ",".join(REPORT_FIELDS)

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(
            ["" if getattr(self, f) is None else repr(getattr(self, f)) for f in REPORT_FIELDS])
        return buf.getvalue()

    def write(self, json_path=None, csv_path=None) -> None:
        if json_path is not None:
            atomic_write_text(json_path, self.to_json() + "\n")
        if csv_path is not None:
            atomic_write_text(csv_path, self.csv_header() + "\n" + self.csv_row() + "\n")


def evaluate_texts(candidates: Sequence, references: Sequence, pref_acc: float | None = None) -> MetricReport:
    """Sentence-mean ROUGE-L and METEOR plus corpus BLEU-4 and CIDEr-D, scaled by 100."""
    if len(candidates) != len(references):
        raise MetricError("candidates and references differ in length")
    if not candidates:
        raise MetricError("nothing to evaluate")
    n = len(candidates)
    rl = sum(rouge_l(c, r) for c, r in zip(candidates, references)) / n
    mt = sum(meteor_simplified(c, r) for c, r in zip(candidates, references)) / n
    return MetricReport(
        rouge_l=100 * rl,
        bleu4=100 * bleu4(candidates, references),
        meteor=100 * mt,
        cider=100 * cider_d(candidates, references),
        pref_acc=pref_acc,
        n=n,
    )
