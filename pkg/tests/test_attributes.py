from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from discrimq import nn
from discrimq.attributes import (AttrHyper, AttributeVocab, DEFAULT_POS_RULES, attr_loss_and_grad,
                                 extract_attribute_vocab, init_attr_model, label_regions,
                                 mean_average_precision, pos_tag_lite, predict_attributes,
                                 similarity_matrix, train_attr_model, visual_similarity, average_precision)
from discrimq.corpus import RegionRecord, Question, make_splits, regions_in_split, tokenize
from discrimq.synth import WorldConfig, sample_tagged_tokens, synth_microworld


def texts_of(regions):
    desc = [tokenize(d) for r in regions for d in r.descriptions]
    ans = [q.answer_tokens for r in regions for q in r.questions]
    return desc, ans


def oracle_vocab(desc, ans, K, top_n):
    """Brute force: enumerate every n-gram, filter by tags and answer overlap, sort."""
    rules = {tuple(r) for r in DEFAULT_POS_RULES}
    counts = Counter()
    for toks in desc:
        tags = pos_tag_lite(toks)
        for s in range(len(toks)):
            for e in range(s + 1, min(s + 3, len(toks)) + 1):
                if tuple(tags[s:e]) in rules:
                    counts[" ".join(toks[s:e])] += 1
    freq = Counter(" ".join(a) for a in ans if a)
    top = sorted(freq, key=lambda a: (-freq[a], a.split()))[:top_n]
    words = {w for a in top for w in a.split()}
    keep = [g for g in counts if set(g.split()) & words]
    keep.sort(key=lambda g: (-counts[g], g))
    return keep[:K]


@pytest.fixture(scope="module")
def world():
    corpus, truth = synth_microworld(WorldConfig(n_images=300, n_pairs=30), seed=11)
    regions = list(corpus.regions.values())
    desc, ans = texts_of(regions)
    vocab = extract_attribute_vocab(desc, ans, K=612)
    return corpus, truth, vocab


def test_pos_lexicon_entries():
    assert pos_tag_lite(["white", "on", "dog", "running", "three"]) == ["JJ", "IN", "NN", "VB", "CD"]


def test_pos_agreement_with_generator_tags():
    toks, gold = sample_tagged_tokens(200, seed=0)
    agree = np.mean([a == b for a, b in zip(pos_tag_lite(toks), gold)])
    assert agree >= 0.95


def test_frequent_adjective_is_extracted():
    desc = [["the", "shirt", "is", "white"]] * 100 + [["a", "big", "red", "old", "bus"]]
    ans = [["white"]] * 50 + [["bus"]]
    v = extract_attribute_vocab(desc, ans, K=10, answer_top_n=1000)
    assert "white" in v.expressions
    assert all(len(e.split()) <= 3 for e in v.expressions)
    assert "big red old bus" not in v.expressions


def test_extraction_matches_brute_force(world):
    corpus, _, vocab = world
    desc, ans = texts_of(list(corpus.regions.values()))
    for K, top_n in ((612, 1000), (10, 1000), (15, 5)):
        got = extract_attribute_vocab(desc, ans, K=K, answer_top_n=top_n).expressions
        assert got == oracle_vocab(desc, ans, K, top_n)
    assert vocab.shortfall == 612 - vocab.K > 0


def test_extraction_is_deterministic(world):
    corpus, _, vocab = world
    desc, ans = texts_of(list(corpus.regions.values()))
    assert extract_attribute_vocab(desc[::-1], ans[::-1], K=612).expressions == vocab.expressions


def test_label_by_substring():
    v = AttributeVocab([("white", ("JJ",)), ("in white shirt", ("IN", "JJ", "NN")), ("red", ("JJ",))])
    r = RegionRecord("r", "i", (0, 0, 1, 1), (2, 2), np.zeros(2), np.zeros(2),
                     descriptions=["man in white shirt"])
    assert label_regions(r, v).tolist() == [1, 1, 0]
    empty = RegionRecord("e", "i", (0, 0, 1, 1), (2, 2), np.zeros(2), np.zeros(2))
    assert label_regions(empty, v).tolist() == [0, 0, 0]
    r.questions.append(Question("what color?", "red"))
    assert label_regions(r, v).tolist() == [1, 1, 1]


def test_labels_equal_ground_truth(world):
    corpus, truth, vocab = world
    for r in list(corpus.regions.values())[:100]:
        got = {vocab.expressions[k] for k in np.nonzero(label_regions(r, vocab))[0]}
        assert got == truth.region_attributes(r.region_id) & set(vocab.expressions)


def test_zero_model_scores_one_half(world):
    _, _, vocab = world
    m = init_attr_model(vocab, 10, 4)
    for p in m.store.params.values():
        p.fill(0.0)
    np.testing.assert_array_equal(predict_attributes(m, np.ones((3, 10))), 0.5)
    with pytest.raises(nn.ShapeError):
        predict_attributes(m, np.ones((1, 9)))


def test_similarity_oracle_and_symmetry():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(10, 6))
    S = similarity_matrix(W)
    oracle = [[sum(W[i, k] * W[j, k] for k in range(6)) for j in range(10)] for i in range(10)]
    np.testing.assert_allclose(S, oracle, atol=1e-12)
    assert np.array_equal(S, S.T) and (np.diag(S) >= 0).all()
    assert similarity_matrix(np.eye(3))[0, 1] == 0.0


def test_visual_similarity_index_error(world):
    _, _, vocab = world
    m = init_attr_model(vocab, 5, 4)
    assert visual_similarity(m, 1, 2) == visual_similarity(m, 2, 1)
    with pytest.raises(IndexError):
        visual_similarity(m, vocab.K, 0)


def test_average_precision_by_hand():
    scores = np.array([0.9, 0.8, 0.7, 0.6])
    labels = np.array([1, 0, 1, 0])
    assert average_precision(scores, labels) == pytest.approx((1 + 2 / 3) / 2)
    assert np.isnan(average_precision(scores, np.zeros(4)))


def test_gradcheck_float64():
    rng = np.random.default_rng(0)
    v = AttributeVocab([(f"a{k}", ("NN",)) for k in range(5)])
    m = init_attr_model(v, 7, 6, dtype=np.float64)
    X = rng.normal(size=(4, 7))
    Y = (rng.random((4, 5)) < 0.5).astype(float)
    assert nn.finite_diff_check(lambda s: attr_loss_and_grad(s, X, Y), m.store) < 1e-4


@pytest.fixture(scope="module")
def trained(world):
    corpus, truth, vocab = world
    splits = make_splits(corpus.image_ids(), seed=0)
    model = train_attr_model(regions_in_split(corpus, splits, "train"), vocab, AttrHyper(epochs=50))
    return model, regions_in_split(corpus, splits, "test")


def test_held_out_map(trained, world):
    _, truth, vocab = world
    model, test = trained
    S = predict_attributes(model, test)
    Y = np.stack([label_regions(r, vocab) for r in test])
    assert mean_average_precision(S, Y) >= 0.95


def test_batch_order_invariance(trained):
    model, test = trained
    S = predict_attributes(model, test)
    perm = np.random.default_rng(1).permutation(len(test))
    np.testing.assert_array_equal(predict_attributes(model, [test[k] for k in perm]), S[perm])
    # one row goes through a matrix-vector kernel, so only float32 round-off may differ
    np.testing.assert_allclose(predict_attributes(model, test[0]), S[0], rtol=0, atol=1e-6)


def test_family_argmax_on_noise_free_world():
    cfg = WorldConfig(noise=0.0, n_pairs=10)
    corpus, truth = synth_microworld(cfg, seed=5)
    regions = list(corpus.regions.values())
    vocab = extract_attribute_vocab(*texts_of(regions), K=612)
    splits = make_splits(corpus.image_ids(), seed=0)
    model = train_attr_model(regions_in_split(corpus, splits, "train"), vocab, AttrHyper(epochs=50))
    test = regions_in_split(corpus, splits, "test")
    S = predict_attributes(model, test)
    hits = total = 0
    for fam in cfg.families:
        cols = [vocab.index(v) for v in cfg.families[fam]]
        for r, s in zip(test, S):
            total += 1
            hits += cfg.families[fam][int(np.argmax(s[cols]))] == truth.region_values[r.region_id][fam]
    assert hits / total >= 0.99


@settings(max_examples=20, deadline=None)
@given(st.lists(st.sampled_from(["red", "dog", "on", "grass", "the", "run"]), min_size=1, max_size=12))
def test_vocab_invariants(words):
    v = extract_attribute_vocab([words, words[::-1]], [words[:1]], K=50)
    assert len(set(v.expressions)) == v.K
    for e, pat in v.entries:
        assert 1 <= len(e.split()) <= 3 and tokenize(e) == e.split() and tuple(pat) in DEFAULT_POS_RULES
