import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from discrimq import nn
from discrimq.attributes import AttributeVocab
from discrimq.corpus import BOS_ID, EOS_ID, PAD_ID, Question, RegionRecord, Vocabulary
from discrimq.metrics import sentence_bleu
from discrimq.qgen import (BASELINE, CONDITIONED, ConfigError, QGenHyper, RetrievalIndex, beam_search_joint,
                           best_contrast, consensus_question, init_qgen_model, joint_step, qgen_examples, sequence_log_prob,
                           train_baseline, train_qgen)

# ---------------------------------------------------------------------------
# joint step


def _log(p):
    return np.log(np.asarray(p, dtype=float))


def test_joint_step_examples():
    np.testing.assert_allclose(np.exp(joint_step(_log([0.8, 0.2]), _log([0.5, 0.5]))), [0.8, 0.2], atol=1e-12)
    np.testing.assert_allclose(np.exp(joint_step(_log([0.6, 0.4]), _log([0.3, 0.7]))),
                               [18 / 46, 28 / 46], atol=1e-12)


def test_joint_step_matches_direct_space_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pa = rng.dirichlet(np.ones(50))
        pb = rng.dirichlet(np.ones(50))
        direct = pa * pb / np.sum(pa * pb)
        np.testing.assert_allclose(np.exp(joint_step(np.log(pa), np.log(pb))), direct, rtol=1e-9, atol=1e-15)


def test_joint_step_is_a_log_distribution_on_random_inputs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        V = int(rng.integers(2, 60))
        a = nn.log_softmax(rng.normal(0, rng.uniform(0.1, 30), V))
        b = nn.log_softmax(rng.normal(0, rng.uniform(0.1, 30), V))
        assert abs(float(nn.logsumexp(joint_step(a, b)))) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 40))
def test_joint_step_commutes_and_uniform_is_identity(seed, V):
    rng = np.random.default_rng(seed)
    a = nn.log_softmax(rng.normal(0, 3, V))
    b = nn.log_softmax(rng.normal(0, 3, V))
    np.testing.assert_allclose(joint_step(a, b), joint_step(b, a), atol=1e-12)
    np.testing.assert_allclose(joint_step(a, np.full(V, -math.log(V))), a, atol=1e-12)


def test_joint_step_handles_minus_infinity_and_rejects_nan():
    a = np.array([0.0, -np.inf])
    assert np.exp(joint_step(a, _log([0.5, 0.5])))[0] == pytest.approx(1.0)
    with pytest.raises(nn.NumericError):
        joint_step(np.array([np.nan, 0.0]), np.array([0.0, -1.0]))


# ---------------------------------------------------------------------------
# beam search against exhaustive enumeration


def _oracle_lstm(W, b, x, h, c):
    H = h.shape[0]
    z = W @ np.concatenate([x, h]) + b
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f, o, g = sig(z[:H]), sig(z[H:2 * H]), sig(z[2 * H:3 * H]), np.tanh(z[3 * H:])
    c = f * c + i * g
    return o * np.tanh(c), c


def oracle_next_dist(model, feat, att, prefix):
    """Next-token distribution after ``prefix`` (starting with BOS), recomputed from scratch."""
    P = {k: np.asarray(v, dtype=np.float64) for k, v in model.store.params.items()}
    inputs = [P["qg.img.W"] @ feat + P["qg.img.b"]]
    if model.mode == CONDITIONED:
        inputs.append(P["qg.attproj.W"] @ P["qg.att"][att] + P["qg.attproj.b"])
    inputs += [P["qg.emb"][t] for t in prefix]
    states = [(np.zeros(model.hidden), np.zeros(model.hidden)) for _ in range(model.layers)]
    for x in inputs:
        for k in range(model.layers):
            h, c = _oracle_lstm(P[f"qg.lstm{k}.W"], P[f"qg.lstm{k}.b"], x, *states[k])
            states[k] = (h, c)
            x = h
    logits = P["qg.out.W"] @ x + P["qg.out.b"]
    p = np.exp(logits - logits.max())
    return p / p.sum()


def exhaustive_top(model, ctx_a, ctx_b, max_len, top):
    V = len(model.vocab)
    words = [t for t in range(V) if t not in (BOS_ID, EOS_ID, PAD_ID)]
    cache = {}

    def joint(prefix):
        if prefix not in cache:
            pa = oracle_next_dist(model, ctx_a[0], ctx_a[1], list(prefix))
            pb = oracle_next_dist(model, ctx_b[0], ctx_b[1], list(prefix))
            cache[prefix] = pa * pb / np.sum(pa * pb)
        return cache[prefix]

    out = []
    for n_words in range(max_len):
        for body in itertools.product(words, repeat=n_words):
            seq = [BOS_ID, *body, EOS_ID]
            logp = 0.0
            for k in range(1, len(seq)):
                logp += math.log(joint(tuple(seq[:k]))[seq[k]])
            out.append((logp / (len(seq) - 1), logp, seq))
    out.sort(key=lambda t: (-t[0], -t[1], t[2]))
    return out[:top]


def _tiny_model(seed, n_words, mode=CONDITIONED, scale=1.5):
    """Random tiny model; ``scale=None`` keeps the library's default initialisation."""
    vocab = Vocabulary([f"w{k}" for k in range(n_words)])
    attrs = AttributeVocab([("a0", ("NN",)), ("a1", ("NN",)), ("a2", ("NN",))])
    hyper = QGenHyper(d_emb=4, d_att=3, hidden=5, layers=2, seed=seed)
    model = init_qgen_model(vocab, attrs, 6, hyper, mode, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    if scale is not None:
        for name in model.store.trainable():
            model.store.params[name][...] = rng.normal(0, scale, model.store.params[name].shape)
    ctx_a = (rng.normal(size=6), int(rng.integers(3)) if mode == CONDITIONED else None)
    ctx_b = (rng.normal(size=6), int(rng.integers(3)) if mode == CONDITIONED else None)
    return model, ctx_a, ctx_b


def _agree(model, ctx_a, ctx_b, width, max_len):
    beam = beam_search_joint(ctx_a, ctx_b, model, width, max_len)
    ref = exhaustive_top(model, ctx_a, ctx_b, max_len, width)
    same = [g.tokens for g in beam] == [r[2] for r in ref]
    close = all(abs(g.length_normalized_log_prob - r[0]) < 1e-9 for g, r in zip(beam, ref))
    return same and close and len(beam) == len(ref)


def test_beam_equals_exhaustive_on_five_token_vocabulary():
    # 4 reserved markers + 1 word: |V| = 5
    misses = [seed for seed in range(50) if not _agree(*_tiny_model(seed, 1, scale=None), 3, 4)]
    assert misses == []


def test_beam_equals_exhaustive_with_five_words():
    misses = [seed for seed in range(50) if not _agree(*_tiny_model(seed, 5, scale=None), 3, 4)]
    assert misses == []


def test_beam_is_sound_on_sharp_random_models():
    # With large random weights a width-3 beam can prune a prefix whose end-marker
    # step would have lifted it into the top 3; it must never report a wrong score.
    misses = 0
    for seed in range(30):
        model, a, b = _tiny_model(seed, 1, scale=1.5)
        beam = beam_search_joint(a, b, model, 3, 4)
        ref = exhaustive_top(model, a, b, 4, 10 ** 6)
        by_seq = {tuple(r[2]): r[0] for r in ref}
        for g in beam:
            assert g.length_normalized_log_prob == pytest.approx(by_seq[tuple(g.tokens)], abs=1e-9)
        assert beam[0].length_normalized_log_prob <= ref[0][0] + 1e-12
        misses += [g.tokens for g in beam] != [r[2] for r in ref[:3]]
    assert misses <= 5


def test_beam_log_probs_are_sums_of_joint_steps():
    model, a, b = _tiny_model(3, 4)
    for g in beam_search_joint(a, b, model, 4, 5):
        assert g.log_prob == pytest.approx(sequence_log_prob(model, a, b, g.tokens), abs=1e-10)
        assert g.log_prob <= 0
        assert g.length_normalized_log_prob == pytest.approx(g.log_prob / (len(g.tokens) - 1))


def test_beam_results_sorted_and_bounded():
    model, a, b = _tiny_model(5, 6, BASELINE)
    out = beam_search_joint(a, b, model, 5, 6)
    norm = [g.length_normalized_log_prob for g in out]
    assert norm == sorted(norm, reverse=True)
    assert len(out) <= 5
    for g in out:
        assert g.tokens[0] == BOS_ID and g.tokens[-1] == EOS_ID and len(g.tokens) - 1 <= 6
        assert BOS_ID not in g.tokens[1:] and PAD_ID not in g.tokens


def test_width_one_is_greedy_over_joint_steps():
    model, a, b = _tiny_model(9, 6)
    greedy = [BOS_ID]
    while greedy[-1] != EOS_ID and len(greedy) - 1 < 5:
        pa = oracle_next_dist(model, a[0], a[1], greedy)
        pb = oracle_next_dist(model, b[0], b[1], greedy)
        j = pa * pb
        j[[BOS_ID, PAD_ID]] = 0
        if len(greedy) == 5:
            j[:] = 0
            j[EOS_ID] = 1
        greedy.append(int(np.argmax(j)))
    # width 1 keeps one live prefix; its completed path is the greedy one
    paths = [g.tokens for g in beam_search_joint(a, b, model, 1, 5)]
    cands = [greedy[:k] + [EOS_ID] for k in range(1, len(greedy))] + [greedy]
    assert paths[0] in cands


def test_beam_rejects_bad_width():
    model, a, b = _tiny_model(0, 2)
    with pytest.raises(ConfigError):
        beam_search_joint(a, b, model, 0, 4)


def test_beam_finds_near_certain_sequence():
    model, a, b = _tiny_model(1, 3, BASELINE, scale=0.1)
    # make the output layer prefer w0 after BOS and EOS afterwards regardless of state
    store = model.store
    store.params["qg.out.W"][...] = 0.0
    store.params["qg.out.b"][...] = -20.0
    store.params["qg.out.b"][EOS_ID] = 20.0
    out = beam_search_joint(a, b, model, 3, 4)
    assert out[0].tokens == [BOS_ID, EOS_ID]


# ---------------------------------------------------------------------------
# training sanity


def _region(rid, feat, questions):
    f = np.asarray(feat, dtype=float)
    return RegionRecord(rid, "img", (0, 0, 10, 10), (20, 20), f, f, questions, [], "thing")


def _greedy(model, feat, att):
    out = beam_search_joint((feat, att), (feat, att), model, 1, 8)
    return out[0].words


def test_single_tuple_is_memorized():
    q = Question("what color is the car", "red")
    region = _region("r0", [1.0, 0.0, 0.5], [q])
    vocab = Vocabulary(["what", "color", "is", "the", "car"])
    attrs = AttributeVocab([("red", ("JJ",)), ("blue", ("JJ",))])
    hyper = QGenHyper(d_emb=8, d_att=4, hidden=16, layers=2, epochs=300, batch_size=1, lr=0.01, seed=0)
    cond = train_qgen([region], vocab, attrs, hyper)
    assert _greedy(cond, region.representation(), 0) == q.tokens
    base = train_baseline([region], vocab, hyper)
    assert _greedy(base, region.representation(), None) == q.tokens


def test_conditioned_examples_skip_unmatched_answers():
    attrs = AttributeVocab([("red", ("JJ",))])
    vocab = Vocabulary(["what", "color", "is", "it", "where"])
    r = _region("r0", [0.0, 1.0], [Question("what color is it", "red"), Question("where is it", "on the left")])
    data = qgen_examples([r], vocab, attrs, CONDITIONED)
    assert len(data) == 1 and data.atts.tolist() == [0]
    assert len(qgen_examples([r], vocab, None, BASELINE)) == 2


# ---------------------------------------------------------------------------
# retrieval


def test_consensus_single_and_identical_pools():
    assert consensus_question([["what", "is", "it"]]) == (["what", "is", "it"], 1.0)
    words, score = consensus_question([["a", "b"]] * 4)
    assert words == ["a", "b"] and score == pytest.approx(1.0)


def _brute_force_consensus(pool):
    best, best_score = None, -1.0
    for k, c in enumerate(pool):
        others = [o for m, o in enumerate(pool) if m != k]
        s = sum(sentence_bleu(c, [o]) for o in others) / len(others)
        if s > best_score + 1e-12:
            best, best_score = c, s
    return best, best_score


def test_retrieval_matches_brute_force_pool_scoring():
    rng = np.random.default_rng(0)
    words = ["what", "color", "is", "the", "dog", "where", "doing", "how", "many"]
    regions = []
    for k in range(60):
        qs = [Question(" ".join(rng.choice(words, size=int(rng.integers(2, 6)))), "x")
              for _ in range(int(rng.integers(1, 4)))]
        regions.append(_region(f"r{k}", rng.normal(size=4), qs))
    index = RetrievalIndex(regions)
    a, b = _region("a", rng.normal(size=4), []), _region("b", rng.normal(size=4), [])
    fa, fb = a.representation(), b.representation()
    d = [np.sum((fa - r.representation()) ** 2) + np.sum((fb - r.representation()) ** 2) for r in regions]
    nearest = sorted(range(len(regions)), key=lambda k: (d[k], k))[:10]
    pool = [q.tokens for k in nearest for q in regions[k].questions]
    expect, score = _brute_force_consensus(pool)
    got = index.retrieve(a, b, 10)
    assert got.words == expect
    assert got.final_score == pytest.approx(score, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_best_contrast_is_the_max_over_all_pairs(seed):
    rng = np.random.default_rng(seed)
    vA, vB = rng.uniform(0, 1, 7), rng.uniform(0, 1, 7)
    brute = max(vA[i] * (1 - vB[i]) * vB[j] * (1 - vA[j]) for i in range(7) for j in range(7))
    assert best_contrast(vA, vB) == pytest.approx(brute, rel=1e-12)
    assert best_contrast(vA, vA) <= 1 / 16
