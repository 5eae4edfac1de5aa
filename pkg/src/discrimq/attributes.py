"""Attribute vocabulary, region labelling and the multi-label attribute model."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .corpus import MORE_THAN_ONE, RegionRecord, tokenize

log = logging.getLogger(__name__)

DEFAULT_POS_RULES: tuple[tuple[str, ...], ...] = (
    ("NN",), ("JJ",), ("VB",), ("CD",),
    ("JJ", "NN"), ("VB", "NN"), ("IN", "NN"), ("NN", "NN"),
    ("VB", "NN", "NN"), ("IN", "NN", "NN"),
)

# ---------------------------------------------------------------------------
# part-of-speech tagging

_IN = {
    "on", "in", "at", "of", "near", "under", "over", "above", "below", "behind",
    "beside", "by", "with", "inside", "outside", "on_top", "from", "into", "onto",
    "across", "along", "around", "against", "between", "through", "toward",
    "towards", "underneath", "beneath", "next", "for", "to", "up", "down",
}
_CD = {
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "many", "several", MORE_THAN_ONE,
}
_OTHER = {
    "a", "an", "the", "this", "that", "these", "those", "there", "here", "it",
    "its", "he", "she", "they", "his", "her", "their", "him", "them", "is",
    "are", "was", "were", "be", "been", "being", "am", "do", "does", "did",
    "can", "could", "will", "would", "should", "may", "might", "and", "or",
    "but", "not", "no", "what", "which", "who", "whom", "whose", "where",
    "when", "why", "how", "very", "so", "too", "has", "have", "had", "i",
    "you", "we", "my", "your", "our", "me", "us", "if", "than", "then", "as",
}
_JJ = {
    "white", "black", "blue", "brown", "green", "red", "yellow", "orange",
    "pink", "purple", "gray", "grey", "silver", "gold", "dark", "light",
    "bright", "big", "large", "small", "little", "tall", "short", "long",
    "young", "old", "new", "wooden", "metal", "plastic", "open", "closed",
    "empty", "full", "clear", "cloudy", "sunny", "wet", "dry", "striped",
    "round", "square", "teddy", "tiny", "huge", "high", "low", "clean",
    "dirty", "hot", "cold", "front", "back", "left", "right", "top", "bottom",
}
_VB = {
    "wear", "stand", "hold", "sit", "look", "play", "hit", "eat", "run",
    "jump", "walk", "ride", "fly", "swim", "throw", "catch", "carry", "drive",
    "lie", "lay", "sleep", "watch", "talk", "drink", "read", "push", "pull",
    "hang", "park", "cross", "cut", "grow", "kick", "skate", "ski", "surf",
    "graze", "smile", "wait", "stare", "laugh", "lean", "climb", "dance",
}
# words kept as nouns despite matching an adjective/verb suffix rule
_NN = {"thing", "ring", "building", "ceiling", "painting", "clothing", "railing", "awning"}


def pos_tag_lite(tokens: Sequence[str]) -> list[str]:
    """Tag tokens with NN, JJ, VB, CD, IN or OTHER from a lexicon and suffix rules."""
    tags = []
    for tok in tokens:
        if tok in _NN:
            tags.append("NN")
        elif tok in _OTHER:
            tags.append("OTHER")
        elif tok in _IN:
            tags.append("IN")
        elif tok in _CD or tok.isdigit():
            tags.append("CD")
        elif tok in _JJ:
            tags.append("JJ")
        elif tok in _VB:
            tags.append("VB")
        elif tok.endswith(("ing", "ed")) and len(tok) > 4:
            tags.append("VB")
        elif tok.endswith("ly") and len(tok) > 4:
            tags.append("OTHER")
        elif tok.endswith(("ous", "ful", "ive", "able", "ible", "al", "ish", "less", "ic")) and len(tok) > 4:
            tags.append("JJ")
        else:
            tags.append("NN")
    return tags


# ---------------------------------------------------------------------------
# attribute vocabulary


@dataclass
class AttributeVocab:
    entries: list[tuple[str, tuple[str, ...]]]
    shortfall: int = 0

    def __post_init__(self):
        self.expressions = [e for e, _ in self.entries]
        self._index = {e: k for k, e in enumerate(self.expressions)}
        self.token_tuples = [tuple(tokenize(e)) for e in self.expressions]
        self._by_tokens = {t: k for k, t in enumerate(self.token_tuples)}
        if len(self._index) != len(self.entries):
            raise ValueError("attribute expressions must be unique")

    @property
    def K(self) -> int:
        return len(self.entries)

    def index(self, expression: str) -> int:
        return self._index[expression]

    def match_answer(self, answer: str) -> int | None:
        """Attribute whose tokens equal the answer's tokens exactly, if any."""
        return self._by_tokens.get(tuple(tokenize(answer)))

    def to_json(self) -> list[dict]:
        return [{"expression": e, "pos_pattern": list(p)} for e, p in self.entries]

    @classmethod
    def from_json(cls, data: list[dict]) -> "AttributeVocab":
        return cls([(d["expression"], tuple(d["pos_pattern"])) for d in data])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "AttributeVocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def count_ngram_candidates(descriptions: Iterable[Sequence[str]], pos_rules=DEFAULT_POS_RULES,
                           max_n: int = 3) -> tuple[Counter, dict]:
    rules = {tuple(r) for r in pos_rules}
    counts: Counter = Counter()
    patterns: dict[tuple[str, ...], tuple[str, ...]] = {}
    for toks in descriptions:
        tags = pos_tag_lite(toks)
        for n in range(1, max_n + 1):
            for s in range(len(toks) - n + 1):
                pat = tuple(tags[s:s + n])
                if pat in rules:
                    gram = tuple(toks[s:s + n])
                    counts[gram] += 1
                    patterns.setdefault(gram, pat)
    return counts, patterns


def top_answers(answers: Iterable[Sequence[str]], top_n: int) -> list[tuple[str, ...]]:
    counts = Counter(tuple(a) for a in answers if a)
    return [a for a, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]]


def extract_attribute_vocab(
    descriptions: Iterable[Sequence[str]],
    answers: Iterable[Sequence[str]],
    pos_rules=DEFAULT_POS_RULES,
    K: int = 612,
    answer_top_n: int = 1000,
) -> AttributeVocab:
    """Most frequent POS-constrained n-grams (n <= 3) sharing a token with a top answer."""
    counts, patterns = count_ngram_candidates(descriptions, pos_rules)
    answer_tokens = {t for a in top_answers(answers, answer_top_n) for t in a}
    candidates = [g for g in counts if set(g) & answer_tokens]
    candidates.sort(key=lambda g: (-counts[g], " ".join(g)))
    chosen = candidates[:K]
    shortfall = max(0, K - len(chosen))
    if shortfall:
        log.warning("only %d attribute candidates for K=%d", len(chosen), K)
    return AttributeVocab([(" ".join(g), patterns[g]) for g in chosen], shortfall=shortfall)


def _contains(seq: Sequence[str], sub: Sequence[str]) -> bool:
    n = len(sub)
    return any(tuple(seq[s:s + n]) == tuple(sub) for s in range(len(seq) - n + 1))


def region_texts(region: RegionRecord) -> list[list[str]]:
    return [tokenize(d) for d in region.descriptions] + [q.answer_tokens for q in region.questions]


def label_regions(region: RegionRecord, vocab: AttributeVocab) -> np.ndarray:
    """Multi-hot vector: attribute k is on iff it occurs in a description or answer."""
    texts = region_texts(region)
    out = np.zeros(vocab.K)
    for k, sub in enumerate(vocab.token_tuples):
        if any(_contains(t, sub) for t in texts):
            out[k] = 1.0
    return out


# ---------------------------------------------------------------------------
# recognition model

ATTR_LAYERS = (("attr.hidden", "tanh"), ("attr.out", "sigmoid"))


@dataclass
class AttrHyper:
    hidden: int = 64
    epochs: int = 50
    batch_size: int = 50
    lr: float = 1e-3
    seed: int = 0


@dataclass
class AttrModel:
    store: nn.ParamStore
    vocab: AttributeVocab
    input_dim: int
    hidden: int

    @property
    def W_f(self) -> np.ndarray:
        return self.store["attr.out.W"]

    def meta(self) -> dict:
        return {"kind": "attr", "input_dim": self.input_dim, "hidden": self.hidden,
                "attributes": self.vocab.to_json()}

    @classmethod
    def from_checkpoint(cls, path) -> "AttrModel":
        store, meta = nn.load_checkpoint(path)
        return cls(store, AttributeVocab.from_json(meta["attributes"]), meta["input_dim"], meta["hidden"])

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.store, self.meta())


def init_attr_model(vocab: AttributeVocab, input_dim: int, hidden: int, seed: int = 0,
                    dtype=np.float32) -> AttrModel:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore(dtype)
    nn.init_linear(store, "attr.hidden", input_dim, hidden, rng)
    nn.init_linear(store, "attr.out", hidden, vocab.K, rng)
    return AttrModel(store, vocab, input_dim, hidden)


def attr_loss_and_grad(store: nn.ParamStore, X: np.ndarray, Y: np.ndarray) -> float:
    """Mean binary cross-entropy; leaves gradients in ``store.grads``."""
    store.zero_grad()
    cache: list = []
    scores = nn.mlp_forward(X.astype(store.dtype, copy=False), store, ATTR_LAYERS, cache)
    loss = nn.loss_multilabel(scores, Y)
    dz = (scores - Y.astype(store.dtype, copy=False)) / Y.size
    nn.mlp_backward(store, cache, dz, skip_last_activation=True)
    return loss


def region_matrix(regions: Sequence[RegionRecord]) -> np.ndarray:
    return np.stack([r.representation() for r in regions]) if regions else np.zeros((0, 0))


def train_attr_model(regions: Sequence[RegionRecord], vocab: AttributeVocab,
                     hyper: AttrHyper | None = None) -> AttrModel:
    hyper = hyper or AttrHyper()
    X = region_matrix(regions).astype(np.float32)
    Y = np.stack([label_regions(r, vocab) for r in regions]).astype(np.float32)
    model = init_attr_model(vocab, X.shape[1], hyper.hidden, hyper.seed)
    rng = np.random.default_rng(hyper.seed + 1)
    adam = nn.AdamConfig(lr=hyper.lr)
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for s in range(0, len(X), hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            total += attr_loss_and_grad(model.store, X[idx], Y[idx]) * len(idx)
            nn.adam_update(model.store, adam)
        log.debug("attr epoch %d loss %.5f", epoch, total / max(len(X), 1))
    return model


def predict_attributes(model: AttrModel, regions) -> np.ndarray:
    """Sigmoid scores for one region (K,) or a batch (N, K)."""
    single = isinstance(regions, RegionRecord)
    if single:
        X = regions.representation()[None, :]
    elif isinstance(regions, np.ndarray):
        X = np.atleast_2d(regions)
    else:
        X = region_matrix(list(regions))
    if X.shape[1] != model.input_dim:
        raise nn.ShapeError(f"attribute model expects features of length {model.input_dim}, got {X.shape[1]}")
    scores = nn.mlp_forward(X.astype(model.store.dtype), model.store, ATTR_LAYERS).astype(np.float64)
    return scores[0] if single else scores


def similarity_matrix(W: np.ndarray, normalize: bool = False) -> np.ndarray:
    """All pairwise row inner products of W (optionally cosine)."""
    W = np.asarray(W, dtype=np.float64)
    if normalize:
        W = W / np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-12)
    return W @ W.T


def row_similarity(W: np.ndarray, i: int, j: int, normalize: bool = False) -> float:
    K = W.shape[0]
    for k in (i, j):
        if not 0 <= k < K:
            raise IndexError(f"attribute index {k} out of range for K={K}")
    wi = np.asarray(W[i], dtype=np.float64)
    wj = np.asarray(W[j], dtype=np.float64)
    if normalize:
        wi = wi / max(np.linalg.norm(wi), 1e-12)
        wj = wj / max(np.linalg.norm(wj), 1e-12)
    return float(wi @ wj)


def visual_similarity(model: AttrModel, i: int, j: int, normalize: bool = False) -> float:
    return row_similarity(model.W_f, i, j, normalize)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision/recall step curve; tied scores keep input order."""
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    n_pos = y.sum()
    if n_pos == 0:
        return float("nan")
    hits = np.cumsum(y)
    precision = hits / np.arange(1, len(y) + 1)
    return float((precision * y).sum() / n_pos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    aps = [average_precision(scores[:, k], labels[:, k]) for k in range(scores.shape[1])]
    aps = [a for a in aps if not np.isnan(a)]
    return float(np.mean(aps)) if aps else float("nan")
