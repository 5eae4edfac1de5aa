"""Discriminative attribute-pair scoring and top-k ranking.

    score(i, j) = vA_i (1 - vB_i) vB_j (1 - vA_j) * exp(alpha q_sim(i, j)) * exp(-beta v_sim(i, j))

Scores are accumulated in log space and exponentiated last. The pruned
ranking mode only examines the strongest attributes on each side and widens
its search until an upper bound proves nothing outside can enter the top-k,
so it always returns the exact-mode list.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class SelectorConfig:
    alpha: float = 1.0
    beta: float = 1.0
    top_k: int = 5
    mode: str = "exact"

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.mode not in ("exact", "pruned"):
            raise ValueError(f"unknown ranking mode {self.mode!r}")


@dataclass
class PairScore:
    i: int
    j: int
    contrast: float
    q_sim: float
    v_sim: float
    score: float


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _side_contrast(vA, vB):
    a = vA * (1.0 - vB)
    b = vB * (1.0 - vA)
    return a, b


def score_pair(vA, vB, i: int, j: int, q_sim, v_sim, config: SelectorConfig) -> PairScore:
    vA = np.asarray(vA, dtype=np.float64)
    vB = np.asarray(vB, dtype=np.float64)
    K = len(vA)
    for k in (i, j):
        if not 0 <= k < K:
            raise IndexError(f"attribute index {k} out of range for K={K}")
    a, b = _side_contrast(vA, vB)
    q = float(q_sim[i, j])
    v = float(v_sim[i, j])
    log_score = _log(a[i]) + _log(b[j]) + config.alpha * q - config.beta * v
    return PairScore(int(i), int(j), float(a[i] * b[j]), q, v, float(np.exp(log_score)))


def _log_score_block(la, lb, q_sim, v_sim, rows, cols, config):
    return (la[rows][:, None] + lb[cols][None, :]
            + config.alpha * q_sim[np.ix_(rows, cols)] - config.beta * v_sim[np.ix_(rows, cols)])


def _top_entries(S, rows, cols, k):
    """Top-k cells of S by (score desc, i asc, j asc)."""
    flat = S.ravel()
    k = min(k, flat.size)
    if k < flat.size:
        cut = np.partition(flat, flat.size - k)[flat.size - k]
        keep = np.nonzero(flat >= cut)[0]
    else:
        keep = np.arange(flat.size)
    r, c = np.unravel_index(keep, S.shape)
    gi, gj = rows[r], cols[c]
    order = np.lexsort((gj, gi, -flat[keep]))[:k]
    return gi[order], gj[order], flat[keep][order]


def rank_pairs_topk(vA, vB, q_sim, v_sim, config: SelectorConfig) -> list[PairScore]:
    vA = np.asarray(vA, dtype=np.float64)
    vB = np.asarray(vB, dtype=np.float64)
    q_sim = np.asarray(q_sim, dtype=np.float64)
    v_sim = np.asarray(v_sim, dtype=np.float64)
    K = len(vA)
    top_k = config.top_k
    if top_k > K * K:
        log.warning("top_k=%d exceeds the %d available pairs; clamping", top_k, K * K)
        top_k = K * K
    a, b = _side_contrast(vA, vB)
    la, lb = _log(a), _log(b)
    if config.mode == "exact":
        idx = np.arange(K)
        S = _log_score_block(la, lb, q_sim, v_sim, idx, idx, config)
        gi, gj, _ = _top_entries(S, idx, idx, top_k)
    else:
        gi, gj = _pruned(la, lb, q_sim, v_sim, config, top_k)
    return [score_pair(vA, vB, int(i), int(j), q_sim, v_sim, config) for i, j in zip(gi, gj)]


def _pruned(la, lb, q_sim, v_sim, config, top_k):
    K = len(la)
    # admissible bound on the similarity factors over every pair
    log_c = config.alpha * float(np.max(np.abs(q_sim))) - config.beta * float(np.min(v_sim))
    order_a = np.argsort(-la, kind="stable")
    order_b = np.argsort(-lb, kind="stable")
    M = max(int(np.ceil(np.sqrt(top_k))) + 1, 8)
    while True:
        Ma = min(M, K)
        Mb = min(M, K)
        rows = np.sort(order_a[:Ma])
        cols = np.sort(order_b[:Mb])
        S = _log_score_block(la, lb, q_sim, v_sim, rows, cols, config)
        gi, gj, best = _top_entries(S, rows, cols, top_k)
        if Ma == K and Mb == K:
            return gi, gj
        if len(best) == top_k and np.isfinite(best[-1]):
            kth = best[-1]
            bound_rows = la[order_a[Ma]] + lb[order_b[0]] + log_c if Ma < K else -np.inf
            bound_cols = la[order_a[0]] + lb[order_b[Mb]] + log_c if Mb < K else -np.inf
            margin = 1e-9 * max(1.0, abs(kth))
            if bound_rows < kth - margin and bound_cols < kth - margin:
                return gi, gj
        M *= 2
