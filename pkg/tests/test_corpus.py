import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from discrimq.corpus import (BOS_ID, EOS_ID, PAD_ID, UNK_ID, ParseError, SchemaError, build_vocab,
                             compute_location_vector, dump_corpus, ingest_corpus, is_valid_question,
                             make_splits, tokenize, Vocabulary)
from discrimq.synth import WorldConfig, synth_microworld


def region_line(rid="r0", bbox=(0, 0, 10, 10), size=(20, 20), dim=3, **extra):
    obj = {"region_id": rid, "image_id": "i0", "bbox": list(bbox), "image_size": list(size),
           "feature_region": [0.0] * dim, "feature_image": [0.0] * dim,
           "questions": [{"text": "what color is it?", "answer": "red"}], "descriptions": ["a red ball"]}
    obj.update(extra)
    return json.dumps(obj)


def test_tokenize_examples():
    assert tokenize("What color is his shirt?") == ["what", "color", "is", "his", "shirt"]
    assert tokenize("") == []
    assert tokenize("There are 3 dogs, two cats and one bird.") == [
        "there", "are", "more_than_one", "dogs", "more_than_one", "cats", "and", "one", "bird"]


def test_vocab_min_freq_by_hand():
    v = build_vocab([tokenize("a b"), tokenize("b c")], min_freq=2)
    assert v.to_json() == ["b"]
    assert v.index("a") == UNK_ID and v.index("c") == UNK_ID and v.index("b") == 4


def test_vocab_reserved_and_roundtrip():
    v = Vocabulary(["x", "y", "x"])
    assert len(v) == 6 and (BOS_ID, EOS_ID, UNK_ID, PAD_ID) == (0, 1, 2, 3)
    assert Vocabulary.from_json(v.to_json()) == v
    ids = v.encode(["x", "zzz", "y"])
    assert ids == [BOS_ID, 4, UNK_ID, 5, EOS_ID] and is_valid_question(ids)
    assert v.decode(ids) == ["x", v.itos[UNK_ID], "y"]


@given(st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=40), st.integers(2, 20))
def test_encode_respects_marker_invariants(words, max_len):
    v = Vocabulary(["a", "b", "c"])
    ids = v.encode(words, max_len=max_len)
    assert is_valid_question(ids, max_len)
    assert len(ids) - 1 == min(len(words), max_len - 1) + 1


def test_location_vector_examples():
    assert compute_location_vector((0, 0, 50, 40), (50, 40)).tolist() == [0, 0, 1, 1, 1]
    assert np.allclose(compute_location_vector((25, 25, 75, 75), (100, 100)), [0.25, 0.25, 0.75, 0.75, 0.25])
    got = compute_location_vector((32, 48, 320, 240), (640, 480))
    assert np.allclose(got, [32 / 640, 48 / 480, 320 / 640, 240 / 480, 288 * 192 / (640 * 480)], atol=1e-15)
    assert np.allclose(got, [0.05, 0.1, 0.5, 0.5, 0.18])
    with pytest.raises(ValueError):
        compute_location_vector((0, 0, 1, 1), (0, 10))


def test_ingest_empty_and_rejects(tmp_path):
    (tmp_path / "regions.jsonl").write_text("")
    c = ingest_corpus(tmp_path)
    assert not c.regions and c.rejects == 0
    (tmp_path / "regions.jsonl").write_text(region_line(bbox=(10, 0, 5, 10)) + "\n")
    c = ingest_corpus(tmp_path)
    assert not c.regions and c.rejects == 1 and "invalid bbox" in c.reject_log[0]


def test_ingest_missing_field_reports_line(tmp_path):
    bad = json.loads(region_line("r1"))
    del bad["bbox"]
    (tmp_path / "regions.jsonl").write_text(region_line() + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(ParseError, match=r":2: missing required field\(s\) bbox"):
        ingest_corpus(tmp_path)


def test_ingest_feature_length_mismatch(tmp_path):
    (tmp_path / "regions.jsonl").write_text(region_line(dim=3) + "\n")
    with pytest.raises(SchemaError):
        ingest_corpus(tmp_path, feature_dim=4)
    (tmp_path / "regions.jsonl").write_text(region_line(dim=3) + "\n" + region_line("r1", dim=2) + "\n")
    with pytest.raises(SchemaError):
        ingest_corpus(tmp_path)


def test_ingest_rejects_bad_rating(tmp_path):
    (tmp_path / "regions.jsonl").write_text(region_line("a") + "\n" + region_line("b") + "\n")
    pair = {"pair_id": "p", "region_a": "a", "region_b": "b",
            "references": [{"text": "what?", "rating": "great"}]}
    (tmp_path / "pairs.jsonl").write_text(json.dumps(pair) + "\n")
    with pytest.raises(ParseError):
        ingest_corpus(tmp_path)


def test_synthetic_dump_roundtrip(tmp_path):
    corpus, _ = synth_microworld(WorldConfig(n_images=500, n_pairs=20), seed=3)
    assert len(corpus.regions) >= 1000
    dump_corpus(corpus, tmp_path)
    again = ingest_corpus(tmp_path, feature_dim=WorldConfig().feature_dim)
    assert again == corpus and again.rejects == 0


def test_splits_largest_remainder_and_grouping():
    ids = [f"i{k}" for k in range(10)]
    sizes = Counter(make_splits(ids, seed=1).values())
    assert sizes["train"] == 7 and sorted([sizes["val"], sizes["test"]]) == [1, 2]
    corpus, _ = synth_microworld(WorldConfig(n_images=40, n_pairs=10), seed=0)
    splits = make_splits(corpus.image_ids(), seed=5)
    assert set(splits) == set(corpus.image_ids())
    for r in corpus.regions.values():
        assert splits[r.image_id] in ("train", "val", "test")
    with pytest.raises(ValueError):
        make_splits(ids, (0.5, 0.2, 0.2))


def test_splits_deterministic_at_scale():
    ids = [f"img{k:05d}" for k in range(10_000)]
    a = make_splits(ids, seed=7)
    assert a == make_splits(ids, seed=7)
    sizes = Counter(a.values())
    assert (sizes["train"], sizes["val"], sizes["test"]) == (7000, 1500, 1500)


@given(st.integers(1, 300), st.integers(0, 1000))
def test_splits_partition_property(n, seed):
    ids = [str(k) for k in range(n)]
    out = make_splits(ids, seed=seed)
    assert sorted(out) == sorted(ids)
    sizes = Counter(out.values())
    for name, r in zip(("train", "val", "test"), (0.7, 0.15, 0.15)):
        assert abs(sizes[name] - n * r) < 1 + 1e-9
