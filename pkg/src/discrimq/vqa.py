"""Small VQA model whose answer projection embeds attributes in question space.

logits = W_q h_q + W_v f + b, where h_q is the last LSTM hidden state of the
question and f the region representation. Only the rows of W_q matter to
the rest of the package; the model is trained to make them meaningful.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .attributes import AttributeVocab, row_similarity, similarity_matrix
from .corpus import DataError, PAD_ID, RegionRecord, Vocabulary, MAX_QUESTION_LEN

log = logging.getLogger(__name__)


@dataclass
class VqaHyper:
    d_emb: int = 32
    hidden: int = 32
    epochs: int = 15
    batch_size: int = 50
    lr: float = 3e-3
    seed: int = 0


@dataclass
class VqaModel:
    store: nn.ParamStore
    vocab: Vocabulary
    attr_vocab: AttributeVocab
    feature_dim: int
    d_emb: int
    hidden: int

    @property
    def W_q(self) -> np.ndarray:
        return self.store["vqa.q.W"]

    def meta(self) -> dict:
        return {"kind": "vqa", "vocab": self.vocab.to_json(), "attributes": self.attr_vocab.to_json(),
                "feature_dim": self.feature_dim, "d_emb": self.d_emb, "hidden": self.hidden}

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.store, self.meta())

    @classmethod
    def from_checkpoint(cls, path) -> "VqaModel":
        store, m = nn.load_checkpoint(path)
        return cls(store, Vocabulary.from_json(m["vocab"]), AttributeVocab.from_json(m["attributes"]),
                   m["feature_dim"], m["d_emb"], m["hidden"])


def init_vqa_model(vocab: Vocabulary, attr_vocab: AttributeVocab, feature_dim: int, d_emb: int,
                   hidden: int, seed: int = 0, dtype=np.float32, zero: bool = False) -> VqaModel:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore(dtype)
    K = attr_vocab.K
    store.add("vqa.emb", rng.normal(0.0, 0.1, (len(vocab), d_emb)))
    nn.init_lstm(store, "vqa.lstm", d_emb, hidden, rng)
    store.add("vqa.q.W", nn.init_uniform(rng, (K, hidden), hidden))
    store.add("vqa.v.W", nn.init_uniform(rng, (K, feature_dim), feature_dim))
    store.add("vqa.b", np.zeros(K))
    if zero:
        for p in store.params.values():
            p.fill(0.0)
    return VqaModel(store, vocab, attr_vocab, feature_dim, d_emb, hidden)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), pad, dtype=np.int64)
    for k, s in enumerate(seqs):
        out[k, :len(s)] = s
    return out


def _forward(store: nn.ParamStore, ids: np.ndarray, lengths: np.ndarray, feats: np.ndarray):
    X = store["vqa.emb"][ids.T]  # (T, B, E)
    hs, cache = nn.lstm_forward(store, "vqa.lstm", X)
    B = ids.shape[0]
    h_q = hs[lengths - 1, np.arange(B)]
    logits = h_q @ store["vqa.q.W"].T + feats @ store["vqa.v.W"].T + store["vqa.b"]
    return logits, (hs, cache, h_q)


def vqa_loss_and_grad(store: nn.ParamStore, ids: np.ndarray, lengths: np.ndarray,
                      feats: np.ndarray, answers: np.ndarray) -> float:
    store.zero_grad()
    feats = feats.astype(store.dtype, copy=False)
    logits, (hs, cache, h_q) = _forward(store, ids, lengths, feats)
    loss, dlogits = nn.softmax_xent(logits, answers)
    g = store.grads
    g["vqa.q.W"] += dlogits.T @ h_q
    g["vqa.v.W"] += dlogits.T @ feats
    g["vqa.b"] += dlogits.sum(axis=0)
    dhs = np.zeros_like(hs)
    dhs[lengths - 1, np.arange(len(ids))] = dlogits @ store["vqa.q.W"]
    dX = nn.lstm_backward(store, "vqa.lstm", dhs, cache)
    np.add.at(g["vqa.emb"], ids.T, dX)
    return loss


def vqa_examples(regions: Sequence[RegionRecord], vocab: Vocabulary, attr_vocab: AttributeVocab):
    """(question ids, feature, attribute index) for QA pairs whose answer is an attribute."""
    out = []
    for r in regions:
        f = None
        for q in r.questions:
            k = attr_vocab.match_answer(q.answer)
            toks = q.tokens
            if k is None or not toks:
                continue
            if f is None:
                f = r.representation()
            out.append(([vocab.index(t) for t in toks][:MAX_QUESTION_LEN], f, k))
    return out


def train_vqa(regions: Sequence[RegionRecord], vocab: Vocabulary, attr_vocab: AttributeVocab,
              hyper: VqaHyper | None = None) -> VqaModel:
    hyper = hyper or VqaHyper()
    data = vqa_examples(regions, vocab, attr_vocab)
    if not data:
        raise DataError("no question-answer pair has an answer in the attribute vocabulary")
    feature_dim = len(data[0][1])
    model = init_vqa_model(vocab, attr_vocab, feature_dim, hyper.d_emb, hyper.hidden, hyper.seed)
    feats = np.stack([d[1] for d in data]).astype(np.float32)
    answers = np.array([d[2] for d in data])
    rng = np.random.default_rng(hyper.seed + 1)
    adam = nn.AdamConfig(lr=hyper.lr)
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for s in range(0, len(data), hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            seqs = [data[i][0] for i in idx]
            ids = pad_batch(seqs)
            lengths = np.array([len(q) for q in seqs])
            total += vqa_loss_and_grad(model.store, ids, lengths, feats[idx], answers[idx]) * len(idx)
            nn.adam_update(model.store, adam)
        log.debug("vqa epoch %d loss %.5f", epoch, total / len(data))
    return model


def answer_distribution(model: VqaModel, question_tokens: Sequence[str], feature) -> np.ndarray:
    if not question_tokens:
        raise ValueError("empty question")
    ids = np.array([[model.vocab.index(t) for t in question_tokens][:MAX_QUESTION_LEN]])
    f = np.asarray(feature, dtype=model.store.dtype)[None, :]
    if f.shape[1] != model.feature_dim:
        raise nn.ShapeError(f"VQA model expects features of length {model.feature_dim}, got {f.shape[1]}")
    logits, _ = _forward(model.store, ids, np.array([ids.shape[1]]), f)
    return np.exp(nn.log_softmax(logits[0].astype(np.float64)))


def predict_answer(model: VqaModel, question_tokens: Sequence[str], feature) -> tuple[int, float]:
    """Most probable attribute (lowest index on ties) and its probability."""
    p = answer_distribution(model, question_tokens, feature)
    k = int(np.argmax(p))
    return k, float(p[k])


def question_similarity(model: VqaModel, i: int, j: int, normalize: bool = False) -> float:
    return row_similarity(model.W_q, i, j, normalize)


def question_similarity_matrix(model: VqaModel, normalize: bool = False) -> np.ndarray:
    return similarity_matrix(model.W_q, normalize)
