"""Corpus BLEU and rating-weighted delta-BLEU over multi-reference sets."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

CLAMP_EPS = 1e-9

Tokens = Sequence[str]


@dataclass
class CorpusScore:
    precisions: list[float]
    brevity_penalty: float
    hyp_length: int
    ref_length: int
    score: float
    numerators: list[float] = field(default_factory=list)
    denominators: list[float] = field(default_factory=list)
    clamped: list[bool] = field(default_factory=list)
    all_negative_eta_count: int = 0


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


def brevity_penalty(rho: float, eta: float) -> float:
    if rho > eta:
        return 1.0
    return math.exp(1.0 - eta / rho)


def closest_ref_length(hyp_len: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - hyp_len), r))


def _combine(nums, dens, rho, eta, max_n, clamp: bool) -> CorpusScore:
    precisions, clamped = [], []
    zero = False
    for num, den in zip(nums, dens):
        if den <= 0 or num <= 0:
            zero = True
        if clamp:
            c = num < CLAMP_EPS
            clamped.append(c)
            num_c = max(num, CLAMP_EPS)
            precisions.append(num_c / den if den > 0 else CLAMP_EPS)
        else:
            clamped.append(False)
            precisions.append(num / den if den > 0 else 0.0)
    bp = brevity_penalty(rho, eta) if rho > 0 else 0.0
    if zero or rho == 0:
        score = 0.0
    else:
        score = bp * math.exp(math.fsum(math.log(p) for p in precisions) / max_n)
    return CorpusScore(precisions, bp, rho, eta, score, list(nums), list(dens), clamped)


def bleu_corpus(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4) -> CorpusScore:
    """Corpus BLEU with clipped counts and closest-reference brevity penalty."""
    if not hypotheses:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and reference sets differ in length")
    nums = [0.0] * max_n
    dens = [0.0] * max_n
    rho = eta = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        rho += len(hyp)
        eta += closest_ref_length(len(hyp), [len(r) for r in refs])
        for n in range(1, max_n + 1):
            h = ngrams(hyp, n)
            if not h:
                continue
            ref_counts = [ngrams(r, n) for r in refs]
            for g, c in h.items():
                nums[n - 1] += min(c, max(rc[g] for rc in ref_counts))
                dens[n - 1] += c
    return _combine(nums, dens, rho, eta, max_n, clamp=False)


def delta_bleu_corpus(hypotheses: Sequence[Tokens], rated: Sequence[Sequence[tuple[Tokens, float]]],
                      max_n: int = 4) -> CorpusScore:
    """Rating-weighted corpus BLEU.

    For every distinct n-gram g of hypothesis h_i the numerator takes the
    best w_ij * min(#g(h_i), #g(r_ij)) over references containing g, the
    denominator the best w_ij * #g(h_i) over all references. A corpus
    numerator at or below zero is clamped to 1e-9 in the reported precision
    and, as with an unmatched order in plain BLEU, zeroes the score.
    The effective reference length only uses positively rated references.
    """
    if not hypotheses:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(rated):
        raise ValueError("hypotheses and reference sets differ in length")
    nums = [0.0] * max_n
    dens = [0.0] * max_n
    rho = eta = 0
    all_neg = 0
    for hyp, refs in zip(hypotheses, rated):
        if not refs:
            raise ValueError("every hypothesis needs a non-empty rated reference set")
        rho += len(hyp)
        pos_lens = [len(r) for r, w in refs if w > 0]
        if not pos_lens:
            all_neg += 1
            pos_lens = [len(r) for r, _ in refs]
        eta += closest_ref_length(len(hyp), pos_lens)
        weights = [w for _, w in refs]
        for n in range(1, max_n + 1):
            h = ngrams(hyp, n)
            if not h:
                continue
            ref_counts = [ngrams(r, n) for r, _ in refs]
            num = 0.0
            den = 0.0
            for g, c in h.items():
                matched = [w * min(c, rc[g]) for w, rc in zip(weights, ref_counts) if rc[g] > 0]
                num += max(matched) if matched else 0.0
                den += max(w * c for w in weights)
            nums[n - 1] += num
            dens[n - 1] += den
    out = _combine(nums, dens, rho, eta, max_n, clamp=True)
    out.all_negative_eta_count = all_neg
    return out


def sentence_bleu(hyp: Tokens, refs: Sequence[Tokens], max_n: int = 4, smooth: bool = True) -> float:
    """Sentence BLEU; add-one smoothing on every n-gram order when ``smooth``."""
    if not hyp:
        return 0.0
    logs = 0.0
    ref_counts = [[ngrams(r, n) for r in refs] for n in range(1, max_n + 1)]
    for n in range(1, max_n + 1):
        h = ngrams(hyp, n)
        match = sum(min(c, max((rc[g] for rc in ref_counts[n - 1]), default=0)) for g, c in h.items())
        total = sum(h.values())
        if smooth:
            match, total = match + 1, total + 1
        if match == 0:
            return 0.0
        logs += math.log(match / total)
    bp = brevity_penalty(len(hyp), closest_ref_length(len(hyp), [len(r) for r in refs]))
    return bp * math.exp(logs / max_n)
