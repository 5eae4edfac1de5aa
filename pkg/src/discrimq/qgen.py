"""Attribute-conditioned question generation and joint two-region decoding.

Input order to the stacked LSTM: projected region representation, then
(conditioned mode only) the projected attribute embedding, then the begin
marker and the question words. Both regions of a pair are decoded with the
same weights; only the recurrent states are duplicated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .attributes import AttributeVocab, predict_attributes, similarity_matrix
from .corpus import (BOS_ID, EOS_ID, MAX_QUESTION_LEN, PAD_ID, DataError, RegionRecord,
                     Vocabulary, tokenize)
from .metrics import sentence_bleu
from .pairselect import PairScore, SelectorConfig, rank_pairs_topk

log = logging.getLogger(__name__)

CONDITIONED = "conditioned"
BASELINE = "baseline"

# identical regions cannot beat x(1-x) <= 1/4 per side, so their contrast never exceeds 1/16
LOW_CONFIDENCE_THRESHOLD = 1.0 / 16.0

# never proposed during decoding: they cannot occur inside a question
_BLOCKED = (BOS_ID, PAD_ID)


class ConfigError(ValueError):
    pass


@dataclass
class QGenHyper:
    d_emb: int = 32
    d_att: int = 64
    hidden: int = 32
    layers: int = 2
    epochs: int = 30
    batch_size: int = 50
    lr: float = 3e-3
    clip: float = 5.0
    seed: int = 0


@dataclass
class QGenModel:
    store: nn.ParamStore
    vocab: Vocabulary
    attr_vocab: AttributeVocab | None
    mode: str
    feature_dim: int
    d_emb: int
    d_att: int
    hidden: int
    layers: int

    @property
    def n_context(self) -> int:
        return 2 if self.mode == CONDITIONED else 1

    def meta(self) -> dict:
        return {
            "kind": "qgen", "mode": self.mode, "vocab": self.vocab.to_json(),
            "attributes": self.attr_vocab.to_json() if self.attr_vocab else None,
            "feature_dim": self.feature_dim, "d_emb": self.d_emb, "d_att": self.d_att,
            "hidden": self.hidden, "layers": self.layers,
        }

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.store, self.meta())

    @classmethod
    def from_checkpoint(cls, path) -> "QGenModel":
        store, m = nn.load_checkpoint(path)
        attrs = AttributeVocab.from_json(m["attributes"]) if m["attributes"] else None
        return cls(store, Vocabulary.from_json(m["vocab"]), attrs, m["mode"], m["feature_dim"],
                   m["d_emb"], m["d_att"], m["hidden"], m["layers"])

    def with_store(self, store: nn.ParamStore) -> "QGenModel":
        return QGenModel(store, self.vocab, self.attr_vocab, self.mode, self.feature_dim,
                         self.d_emb, self.d_att, self.hidden, self.layers)


def init_qgen_model(vocab: Vocabulary, attr_vocab: AttributeVocab | None, feature_dim: int,
                    hyper: QGenHyper, mode: str = CONDITIONED, dtype=np.float32,
                    attribute_embeddings: np.ndarray | None = None) -> QGenModel:
    """``attribute_embeddings`` (K x d) loads a fixed pretrained table instead of a learned one."""
    if mode not in (CONDITIONED, BASELINE):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == CONDITIONED and attr_vocab is None:
        raise ConfigError("conditioned mode needs an attribute vocabulary")
    rng = np.random.default_rng(hyper.seed)
    store = nn.ParamStore(dtype)
    store.add("qg.emb", rng.normal(0.0, 0.1, (len(vocab), hyper.d_emb)))
    nn.init_linear(store, "qg.img", feature_dim, hyper.d_emb, rng)
    d_att = hyper.d_att
    if mode == CONDITIONED:
        if attribute_embeddings is not None:
            table = np.asarray(attribute_embeddings, dtype=np.float64)
            if table.shape[0] != attr_vocab.K:
                raise nn.ShapeError(f"attribute table has {table.shape[0]} rows, vocabulary has {attr_vocab.K}")
            d_att = table.shape[1]
            store.add("qg.att", table, trainable=False)
        else:
            store.add("qg.att", rng.normal(0.0, 0.1, (attr_vocab.K, d_att)))
        nn.init_linear(store, "qg.attproj", d_att, hyper.d_emb, rng)
    n_in = hyper.d_emb
    for k in range(hyper.layers):
        nn.init_lstm(store, f"qg.lstm{k}", n_in, hyper.hidden, rng)
        n_in = hyper.hidden
    nn.init_linear(store, "qg.out", hyper.hidden, len(vocab), rng)
    return QGenModel(store, vocab, attr_vocab if mode == CONDITIONED else None, mode, feature_dim,
                     hyper.d_emb, d_att, hyper.hidden, hyper.layers)


def load_word_vectors(path, attr_vocab: AttributeVocab) -> np.ndarray:
    """Attribute table from a text file of ``word v1 v2 ...`` lines; phrases average their words."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split()
            if len(parts) > 2:
                vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
    if not vectors:
        raise DataError(f"{path}: no word vectors")
    dim = len(next(iter(vectors.values())))
    rows = []
    for toks in attr_vocab.token_tuples:
        found = [vectors[t] for t in toks if t in vectors]
        rows.append(np.mean(found, axis=0) if found else np.zeros(dim))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# teacher-forced training


def _context_inputs(store: nn.ParamStore, feats, atts, mode):
    xs = [nn.linear_forward(store, "qg.img", feats)]
    if mode == CONDITIONED:
        xs.append(nn.linear_forward(store, "qg.attproj", store["qg.att"][atts]))
    return xs


def qgen_loss_and_grad(model: QGenModel, feats: np.ndarray, atts, seqs: np.ndarray,
                       backward: bool = True) -> tuple[float, float]:
    """Mean per-token NLL over a padded (B, L) batch of BOS..EOS sequences.

    Returns (mean loss, token count); gradients are left in the store.
    """
    store = model.store
    if backward:
        store.zero_grad()
    feats = feats.astype(store.dtype, copy=False)
    ctx = _context_inputs(store, feats, atts, model.mode)
    n_ctx = len(ctx)
    words_in = seqs[:, :-1].T
    X = np.concatenate([np.stack(ctx), store["qg.emb"][words_in]], axis=0)
    caches = []
    h = X
    for k in range(model.layers):
        h, cache = nn.lstm_forward(store, f"qg.lstm{k}", h)
        caches.append(cache)
    top = h[n_ctx:]
    logits = nn.linear_forward(store, "qg.out", top)
    targets = seqs[:, 1:].T
    mask = (targets != PAD_ID).astype(store.dtype)
    n_tok = float(mask.sum())
    loss, dlogits = nn.softmax_xent(logits, targets, mask)
    if not backward:
        return loss, n_tok
    dtop = nn.linear_backward(store, "qg.out", top, dlogits)
    dh = np.zeros_like(h)
    dh[n_ctx:] = dtop
    for k in reversed(range(model.layers)):
        dh = nn.lstm_backward(store, f"qg.lstm{k}", dh, caches[k])
    g = store.grads
    nn.linear_backward(store, "qg.img", feats, dh[0])
    if model.mode == CONDITIONED:
        d_att = nn.linear_backward(store, "qg.attproj", store["qg.att"][atts], dh[1])
        if "qg.att" not in store.frozen:
            np.add.at(g["qg.att"], atts, d_att)
    np.add.at(g["qg.emb"], words_in, dh[n_ctx:])
    return loss, n_tok


def pad_sequences(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    for k, s in enumerate(seqs):
        out[k, :len(s)] = s
    return out


@dataclass
class QGenData:
    feats: np.ndarray
    atts: np.ndarray | None
    seqs: list[list[int]]

    def __len__(self) -> int:
        return len(self.seqs)


def qgen_examples(regions: Sequence[RegionRecord], vocab: Vocabulary,
                  attr_vocab: AttributeVocab | None, mode: str = CONDITIONED,
                  max_len: int = MAX_QUESTION_LEN) -> QGenData:
    """Training tuples (f, Q, att); conditioned mode keeps QA pairs whose answer is an attribute."""
    feats, atts, seqs = [], [], []
    for r in regions:
        f = None
        for q in r.questions:
            toks = q.tokens
            if not toks:
                continue
            k = None
            if mode == CONDITIONED:
                k = attr_vocab.match_answer(q.answer)
                if k is None:
                    continue
            if f is None:
                f = r.representation()
            feats.append(f)
            atts.append(k)
            seqs.append(vocab.encode(toks, max_len))
    if not seqs:
        raise DataError("no training tuples after matching answers to attributes")
    return QGenData(np.stack(feats).astype(np.float32),
                    np.array(atts, dtype=np.int64) if mode == CONDITIONED else None, seqs)


def _train(model: QGenModel, data: QGenData, hyper: QGenHyper) -> QGenModel:
    rng = np.random.default_rng(hyper.seed + 1)
    adam = nn.AdamConfig(lr=hyper.lr)
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for s in range(0, len(data), hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            seqs = pad_sequences([data.seqs[i] for i in idx])
            atts = data.atts[idx] if data.atts is not None else None
            loss, _ = qgen_loss_and_grad(model, data.feats[idx], atts, seqs)
            total += loss * len(idx)
            if hyper.clip > 0:
                nn.clip_gradients(model.store, hyper.clip)
            nn.adam_update(model.store, adam)
        log.debug("qgen[%s] epoch %d loss %.5f", model.mode, epoch, total / len(data))
    return model


def train_qgen(regions: Sequence[RegionRecord], vocab: Vocabulary, attr_vocab: AttributeVocab,
               hyper: QGenHyper | None = None, attribute_embeddings: np.ndarray | None = None) -> QGenModel:
    hyper = hyper or QGenHyper()
    data = qgen_examples(regions, vocab, attr_vocab, CONDITIONED)
    model = init_qgen_model(vocab, attr_vocab, data.feats.shape[1], hyper, CONDITIONED,
                            attribute_embeddings=attribute_embeddings)
    return _train(model, data, hyper)


def train_baseline(regions: Sequence[RegionRecord], vocab: Vocabulary,
                   hyper: QGenHyper | None = None) -> QGenModel:
    hyper = hyper or QGenHyper()
    data = qgen_examples(regions, vocab, None, BASELINE)
    model = init_qgen_model(vocab, None, data.feats.shape[1], hyper, BASELINE)
    return _train(model, data, hyper)


def perplexity(model: QGenModel, data: QGenData, batch_size: int = 200) -> float:
    """Per-token perplexity under teacher forcing."""
    total = n = 0.0
    for s in range(0, len(data), batch_size):
        seqs = pad_sequences(data.seqs[s:s + batch_size])
        atts = data.atts[s:s + batch_size] if data.atts is not None else None
        loss, n_tok = qgen_loss_and_grad(model, data.feats[s:s + batch_size], atts, seqs, backward=False)
        total += loss * n_tok
        n += n_tok
    return math.exp(total / n)


# ---------------------------------------------------------------------------
# incremental decoding


def _step_layers(model: QGenModel, x, states):
    new = []
    h = x
    for k, st in enumerate(states):
        st = nn.lstm_step(h, st, model.store, f"qg.lstm{k}")
        new.append(st)
        h = st.h
    logits = nn.linear_forward(model.store, "qg.out", h).astype(np.float64)
    return new, nn.log_softmax(logits)


def prime(model: QGenModel, feats: np.ndarray, atts=None):
    """Feed the context steps and the begin marker. Returns (states, log p(next token))."""
    store = model.store
    feats = np.atleast_2d(np.asarray(feats, dtype=store.dtype))
    if feats.shape[1] != model.feature_dim:
        raise nn.ShapeError(f"model expects features of length {model.feature_dim}, got {feats.shape[1]}")
    N = feats.shape[0]
    if model.mode == CONDITIONED:
        if atts is None:
            raise ConfigError("conditioned model needs an attribute index")
        atts = np.atleast_1d(np.asarray(atts, dtype=np.int64))
    ctx = _context_inputs(store, feats, atts, model.mode)
    zeros = np.zeros((N, model.hidden), store.dtype)
    states = [nn.LSTMState(zeros, zeros) for _ in range(model.layers)]
    for x in ctx:
        states, _ = _step_layers(model, x, states)
    bos = store["qg.emb"][np.full(N, BOS_ID)]
    return _step_layers(model, bos, states)


def advance(model: QGenModel, states, tokens):
    x = model.store["qg.emb"][np.asarray(tokens, dtype=np.int64)]
    return _step_layers(model, x, states)


def _select(states, rows):
    return [nn.LSTMState(s.h[rows], s.c[rows]) for s in states]


def joint_step(logp_a, logp_b) -> np.ndarray:
    """Log of the renormalised product of two next-token distributions."""
    a = np.asarray(logp_a, dtype=np.float64)
    b = np.asarray(logp_b, dtype=np.float64)
    for x in (a, b):
        if np.isnan(x).any() or np.isposinf(x).any():
            raise nn.NumericError("log distribution has NaN or +inf entries")
    s = a + b
    return s - nn.logsumexp(s, axis=-1, keepdims=True)


@dataclass
class GeneratedQuestion:
    tokens: list[int]
    words: list[str]
    log_prob: float | None
    length_normalized_log_prob: float | None
    att_i: int | None = None
    att_j: int | None = None
    pair_score: float | None = None
    final_score: float | None = None
    low_confidence: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def text(self) -> str:
        return " ".join(self.words)


def _finish(model, tokens, logp):
    return GeneratedQuestion(list(tokens), model.vocab.decode(tokens), float(logp),
                             float(logp) / (len(tokens) - 1))


def _sort_key(g: GeneratedQuestion):
    return (-g.length_normalized_log_prob, -g.log_prob, g.tokens)


def beam_search_joint(ctx_a, ctx_b, model: QGenModel, width: int = 5,
                      max_len: int = MAX_QUESTION_LEN) -> list[GeneratedQuestion]:
    """Beam search over the joint next-token distribution of two contexts.

    ``ctx_a``/``ctx_b`` are (feature, attribute index or None). At every step
    each live hypothesis is also closed with the end marker; the final step
    only allows the end marker. Returns up to ``width`` questions sorted by
    length-normalised log probability.
    """
    if width < 1:
        raise ConfigError("beam width must be at least 1")
    if max_len < 1:
        raise ConfigError("max_len must be at least 1")
    fa, att_a = ctx_a
    fb, att_b = ctx_b
    sa, la = prime(model, fa, None if att_a is None else [att_a])
    sb, lb = prime(model, fb, None if att_b is None else [att_b])
    prefixes: list[list[int]] = [[BOS_ID]]
    scores = np.zeros(1)
    finished: list[GeneratedQuestion] = []
    V = la.shape[1]
    for step in range(max_len):
        J = joint_step(la, lb)
        total = scores[:, None] + J
        for n, pre in enumerate(prefixes):
            finished.append(_finish(model, pre + [EOS_ID], total[n, EOS_ID]))
        if step == max_len - 1:
            break
        total[:, list(_BLOCKED) + [EOS_ID]] = -np.inf
        flat = total.ravel()
        # order: score desc, then parent row, then token id
        order = np.lexsort((np.tile(np.arange(V), len(prefixes)),
                            np.repeat(np.arange(len(prefixes)), V), -flat))
        chosen = [k for k in order[:width] if np.isfinite(flat[k])]
        if len(finished) >= width:
            worst_kept = sorted(finished, key=_sort_key)[width - 1].length_normalized_log_prob
            # any completion of a prefix scores at most logp / max_len
            chosen = [k for k in chosen if flat[k] / max_len >= worst_kept]
        if not chosen:
            break
        rows = np.array([k // V for k in chosen])
        toks = np.array([k % V for k in chosen])
        prefixes = [prefixes[r] + [int(t)] for r, t in zip(rows, toks)]
        scores = flat[chosen]
        sa, la = advance(model, _select(sa, rows), toks)
        sb, lb = advance(model, _select(sb, rows), toks)
    finished.sort(key=_sort_key)
    return finished[:width]


def sequence_log_prob(model: QGenModel, ctx_a, ctx_b, tokens: Sequence[int]) -> float:
    """Joint log probability of a full BOS..EOS sequence (used as an oracle)."""
    fa, att_a = ctx_a
    fb, att_b = ctx_b
    sa, la = prime(model, fa, None if att_a is None else [att_a])
    sb, lb = prime(model, fb, None if att_b is None else [att_b])
    total = 0.0
    for t in tokens[1:]:
        total += float(joint_step(la, lb)[0, t])
        if t == EOS_ID:
            break
        sa, la = advance(model, sa, [t])
        sb, lb = advance(model, sb, [t])
    return total


# ---------------------------------------------------------------------------
# discriminative generation


@dataclass
class BeamConfig:
    width: int = 5
    max_len: int = MAX_QUESTION_LEN


class DiscriminativeGenerator:
    """Attribute recognition -> pair selection -> joint decoding -> reranking.

    Similarity matrices are computed once per generator. Beams are cached per
    (region pair, attribute pair) so several selector settings can share them.
    """

    def __init__(self, attr_model, vqa_model, qgen_model: QGenModel, beam: BeamConfig | None = None,
                 normalize_similarity: bool = False, low_confidence: float = LOW_CONFIDENCE_THRESHOLD):
        if qgen_model.mode != CONDITIONED:
            raise ConfigError("discriminative generation needs a conditioned model")
        if not (attr_model.vocab.K == vqa_model.attr_vocab.K == qgen_model.attr_vocab.K):
            raise ConfigError("attribute, VQA and generator models use different attribute vocabularies")
        self.attr_model = attr_model
        self.qgen = qgen_model
        self.beam = beam or BeamConfig()
        self.q_sim = similarity_matrix(vqa_model.W_q, normalize_similarity)
        self.v_sim = similarity_matrix(attr_model.W_f, normalize_similarity)
        self.low_confidence = low_confidence
        self._beams: dict = {}
        self._scores: dict = {}

    def attribute_scores(self, region: RegionRecord) -> np.ndarray:
        key = region.region_id
        if key not in self._scores:
            self._scores[key] = predict_attributes(self.attr_model, region)
        return self._scores[key]

    def beams(self, region_a: RegionRecord, region_b: RegionRecord, i: int, j: int):
        key = (region_a.region_id, region_b.region_id, i, j)
        if key not in self._beams:
            self._beams[key] = beam_search_joint(
                (region_a.representation(), i), (region_b.representation(), j),
                self.qgen, self.beam.width, self.beam.max_len)
        return self._beams[key]

    def generate(self, region_a: RegionRecord, region_b: RegionRecord,
                 config: SelectorConfig) -> GeneratedQuestion:
        vA = self.attribute_scores(region_a)
        vB = self.attribute_scores(region_b)
        pairs: list[PairScore] = rank_pairs_topk(vA, vB, self.q_sim, self.v_sim, config)
        best = None
        best_key = None
        for p in pairs:
            for g in self.beams(region_a, region_b, p.i, p.j):
                final = p.score * math.exp(g.length_normalized_log_prob)
                key = (-final, -g.length_normalized_log_prob, p.i, p.j, g.tokens)
                if best_key is None or key < best_key:
                    best_key = key
                    best = (p, g, final)
        p, g, final = best
        out = GeneratedQuestion(g.tokens, g.words, g.log_prob, g.length_normalized_log_prob,
                                att_i=p.i, att_j=p.j, pair_score=p.score, final_score=final,
                                low_confidence=best_contrast(vA, vB) < self.low_confidence)
        out.extra = {"pairs": [(q.i, q.j, q.score) for q in pairs]}
        return out


def best_contrast(vA, vB) -> float:
    """Largest attribute score contrast over all K^2 pairs; it factorises per side.

    Unlike the full pair score it does not depend on the similarity scale, so
    it is what the low-confidence flag compares against the threshold.
    """
    vA = np.asarray(vA, dtype=np.float64)
    vB = np.asarray(vB, dtype=np.float64)
    return float(np.max(vA * (1.0 - vB)) * np.max(vB * (1.0 - vA)))


def generate_discriminative(region_a: RegionRecord, region_b: RegionRecord, models: dict,
                            selector_config: SelectorConfig | None = None,
                            beam_config: BeamConfig | None = None) -> GeneratedQuestion:
    gen = DiscriminativeGenerator(models["attr"], models["vqa"], models["qgen"], beam_config)
    return gen.generate(region_a, region_b, selector_config or SelectorConfig())


def generate_baseline(region_a: RegionRecord, region_b: RegionRecord, model: QGenModel,
                      beam_config: BeamConfig | None = None) -> GeneratedQuestion:
    beam = beam_config or BeamConfig()
    return beam_search_joint((region_a.representation(), None), (region_b.representation(), None),
                             model, beam.width, beam.max_len)[0]


# ---------------------------------------------------------------------------
# retrieval baseline


class RetrievalIndex:
    """Nearest training regions to a pair, then the pool's consensus question.

    A region r is compared with the pair through ||[f_A, f_B] - [f_r, f_r]||.
    """

    def __init__(self, regions: Sequence[RegionRecord]):
        kept = [r for r in regions if r.questions]
        if not kept:
            raise DataError("retrieval index needs regions with questions")
        self.regions = kept
        self.features = np.stack([r.representation() for r in kept])
        self._sq = np.sum(self.features ** 2, axis=1)

    def neighbors(self, f_a: np.ndarray, f_b: np.ndarray, k: int) -> np.ndarray:
        F = self.features
        d2 = (self._sq - 2 * F @ f_a + f_a @ f_a) + (self._sq - 2 * F @ f_b + f_b @ f_b)
        k = min(k, len(F))
        return np.lexsort((np.arange(len(F)), d2))[:k]

    def pool(self, region_a: RegionRecord, region_b: RegionRecord, k: int) -> list[list[str]]:
        idx = self.neighbors(region_a.representation(), region_b.representation(), k)
        return [q.tokens for n in idx for q in self.regions[n].questions if q.tokens]

    def retrieve(self, region_a: RegionRecord, region_b: RegionRecord, k: int = 100) -> GeneratedQuestion:
        pool = self.pool(region_a, region_b, k)
        words, score = consensus_question(pool)
        out = GeneratedQuestion([], words, None, None)
        out.final_score = score
        return out


def consensus_question(pool: Sequence[Sequence[str]]) -> tuple[list[str], float]:
    """Candidate with the highest mean smoothed sentence-BLEU against the rest of the pool.

    Identical candidates are scored once; ties go to the earliest candidate.
    """
    if not pool:
        raise DataError("empty candidate pool")
    uniq: list[tuple[str, ...]] = []
    counts: dict[tuple[str, ...], int] = {}
    for q in pool:
        t = tuple(q)
        if t not in counts:
            uniq.append(t)
            counts[t] = 0
        counts[t] += 1
    if len(pool) == 1:
        return list(pool[0]), 1.0
    best, best_score = None, -1.0
    for c in uniq:
        total = 0.0
        for o in uniq:
            m = counts[o] - (1 if o == c else 0)
            if m:
                total += m * sentence_bleu(list(c), [list(o)])
        score = total / (len(pool) - 1)
        if score > best_score:
            best, best_score = c, score
    return list(best), best_score


def retrieval_baseline(region_a: RegionRecord, region_b: RegionRecord, train_regions, k: int = 100):
    index = train_regions if isinstance(train_regions, RetrievalIndex) else RetrievalIndex(train_regions)
    return index.retrieve(region_a, region_b, k)

