"""Corpus BLEU and RIBES over tokenized sentences.

Both metrics consume token lists and assume the caller tokenized
hypothesis and reference identically (this toolkit normalizes with
lowercasing and punctuation splitting everywhere, which makes absolute
BLEU values tokenization-dependent; they are comparable within the
toolkit, not certified against any external scorer).

BLEU is the standard corpus formulation: clipped 1..4-gram matches
summed over the corpus, geometric mean, brevity penalty
min(1, exp(1 - ref_len/hyp_len)), reported on the 0..100 scale and
unsmoothed, so any zero n-gram bucket zeroes the score.  A smoothed
variant exists for sentence-level diagnostics only.

RIBES aligns each hypothesis word to a reference position, using unique
unigrams first and then growing left/right context n-grams that occur
exactly once in both sentences.  The score is the fraction of ascending
aligned-position pairs (a normalized Kendall's tau) damped by unigram
precision to the 0.25 and brevity penalty to the 0.10.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

Tokens = Sequence[str]

MAX_ORDER = 4
RIBES_ALPHA = 0.25
RIBES_BETA = 0.10


@dataclass
class BleuReport:
    bleu: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


@dataclass
class RibesReport:
    ribes: float
    sentence_scores: list[float]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> BleuReport:
    """Clipped 4-gram corpus BLEU, single reference, unsmoothed."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            hc = _ngrams(hyp, n)
            if not hc:
                continue
            rc = _ngrams(ref, n)
            matches[n - 1] += sum(min(count, rc[g]) for g, count in hc.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if all(p > 0.0 for p in precisions):
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    else:
        bleu = 0.0
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len)


def sentence_bleu(hyp: Tokens, ref: Tokens, smooth: bool = True) -> float:
    """Diagnostic single-sentence BLEU; add-one smoothing above unigrams."""
    precisions = []
    for n in range(1, MAX_ORDER + 1):
        hc = _ngrams(hyp, n)
        rc = _ngrams(ref, n)
        m = sum(min(count, rc[g]) for g, count in hc.items())
        t = max(len(hyp) - n + 1, 0)
        if smooth and n > 1:
            precisions.append((m + 1.0) / (t + 1.0))
        else:
            precisions.append(m / t if t else 0.0)
    if not all(p > 0.0 for p in precisions):
        return 0.0
    if len(hyp) == 0:
        return 0.0
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    return 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)


def _count_runs(seq: Sequence, sub: Sequence) -> int:
    n = len(sub)
    return sum(1 for i in range(len(seq) - n + 1) if tuple(seq[i : i + n]) == tuple(sub))


def _find_run(seq: Sequence, sub: Sequence) -> int:
    n = len(sub)
    for i in range(len(seq) - n + 1):
        if tuple(seq[i : i + n]) == tuple(sub):
            return i
    raise ValueError("sub-sequence not found")


def _align_positions(hyp: Tokens, ref: Tokens) -> list[int]:
    """Reference position for each alignable hypothesis word, in hyp order.

    A word aligns directly when it occurs exactly once in both
    sentences.  Otherwise context windows grow outward: the left n-gram
    hyp[i-w .. i] maps to the reference occurrence's last position, the
    right n-gram hyp[i .. i+w] to its first, whichever first occurs
    exactly once in both sentences.  Unresolvable words are skipped.
    """
    positions = []
    for i, word in enumerate(hyp):
        if word not in ref:
            continue
        if ref.count(word) == 1 and hyp.count(word) == 1:
            positions.append(ref.index(word))
            continue
        for window in range(1, max(i, len(hyp) - i)):
            if window <= i:
                ngram = hyp[i - window : i + 1]
                if _count_runs(ref, ngram) == 1 and _count_runs(hyp, ngram) == 1:
                    positions.append(_find_run(ref, ngram) + len(ngram) - 1)
                    break
            if i + window < len(hyp):
                ngram = hyp[i : i + window + 1]
                if _count_runs(ref, ngram) == 1 and _count_runs(hyp, ngram) == 1:
                    positions.append(_find_run(ref, ngram))
                    break
    return positions


def ribes(hyp: Tokens, ref: Tokens, alpha: float = RIBES_ALPHA,
          beta: float = RIBES_BETA) -> float:
    """Sentence score in [0, 1]; 0 when fewer than two words align."""
    hyp = list(hyp)
    ref = list(ref)
    if not ref:
        raise ValueError("reference has no words")
    if not hyp:
        return 0.0
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    positions = _align_positions(hyp, ref)
    n = len(positions)
    if n == 1 and len(ref) == 1:
        nkt, precision = 1.0, 1.0 / len(hyp)
    elif n < 2:
        return 0.0
    else:
        ascending = sum(1 for i in range(n - 1) for j in range(i + 1, n)
                        if positions[i] < positions[j])
        nkt = ascending / (n * (n - 1) / 2)
        precision = n / len(hyp)
    return nkt * precision ** alpha * bp ** beta


def corpus_ribes(hyps: Sequence[Tokens], refs: Sequence[Tokens],
                 alpha: float = RIBES_ALPHA, beta: float = RIBES_BETA) -> RibesReport:
    """Mean of sentence scores over the corpus."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    scores = [ribes(h, r, alpha, beta) for h, r in zip(hyps, refs)]
    return RibesReport(sum(scores) / len(scores), scores)


def format_bleu(report: BleuReport) -> str:
    p = "/".join(f"{x:.4f}" for x in report.precisions)
    ratio = report.hyp_len / report.ref_len if report.ref_len else 0.0
    return (f"BLEU = {report.bleu:.2f} (p1/p2/p3/p4 = {p}, "
            f"BP = {report.brevity_penalty:.4f}, ratio = {ratio:.4f})")


def bleu_kv(report: BleuReport) -> list[str]:
    lines = [f"bleu={report.bleu:.6f}"]
    lines += [f"p{i + 1}={p:.6f}" for i, p in enumerate(report.precisions)]
    lines += [f"bp={report.brevity_penalty:.6f}",
              f"hyp_len={report.hyp_len}", f"ref_len={report.ref_len}"]
    return lines


def format_ribes(report: RibesReport) -> str:
    return f"RIBES = {report.ribes:.6f} over {len(report.sentence_scores)} sentences"
