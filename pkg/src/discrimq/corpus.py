"""Regions, questions and rated pairs; tokenization, vocabulary, splits."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

BOS, EOS, UNK, PAD = "<bos>", "<eos>", "<unk>", "<pad>"
RESERVED = (BOS, EOS, UNK, PAD)
BOS_ID, EOS_ID, UNK_ID, PAD_ID = 0, 1, 2, 3

RATING_WEIGHTS = {"strong_pos": 1.0, "weak_pos": 0.5, "neg": -0.5}

MAX_QUESTION_LEN = 15

REAL_FEATURE_DIM = 2048


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokenization

_TOKEN_RE = re.compile(r"[a-z0-9_]+")

_NUMBER_WORDS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6,
    "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11, "twelve": 12,
    "thirteen": 13, "fourteen": 14, "fifteen": 15, "sixteen": 16,
    "seventeen": 17, "eighteen": 18, "nineteen": 19, "twenty": 20,
    "thirty": 30, "forty": 40, "fifty": 50, "hundred": 100,
}

MORE_THAN_ONE = "more_than_one"


def _rewrite_number(tok: str) -> str:
    if tok.isdigit():
        value = int(tok)
    elif tok in _NUMBER_WORDS:
        value = _NUMBER_WORDS[tok]
    else:
        return tok
    if value > 1:
        return MORE_THAN_ONE
    return "one" if value == 1 else "zero"


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, fold numbers above one into one token."""
    return [_rewrite_number(t) for t in _TOKEN_RE.findall(text.lower())]


class Vocabulary:
    """Token <-> index map with the four markers at indices 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str], max_len: int = MAX_QUESTION_LEN) -> list[int]:
        """Question sequence: BOS + words + EOS, at most max_len generated tokens."""
        words = [self.index(t) for t in tokens][: max_len - 1]
        return [BOS_ID, *words, EOS_ID]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids if i not in (BOS_ID, EOS_ID, PAD_ID)]

    def to_json(self) -> list[str]:
        return self.itos[len(RESERVED):]

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Vocabulary":
        return cls(tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocab(token_lists: Iterable[Sequence[str]], min_freq: int = 1) -> Vocabulary:
    counts = Counter(t for toks in token_lists for t in toks)
    kept = sorted(t for t, c in counts.items() if c >= min_freq and t not in RESERVED)
    return Vocabulary(kept)


def is_valid_question(ids: Sequence[int], max_len: int = MAX_QUESTION_LEN) -> bool:
    return (
        len(ids) >= 2
        and ids[0] == BOS_ID
        and ids[-1] == EOS_ID
        and BOS_ID not in ids[1:]
        and EOS_ID not in ids[:-1]
        and len(ids) - 1 <= max_len
    )


# ---------------------------------------------------------------------------
# records


@dataclass
class Question:
    text: str
    answer: str

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)

    @property
    def answer_tokens(self) -> list[str]:
        return tokenize(self.answer)


@dataclass
class RegionRecord:
    region_id: str
    image_id: str
    bbox: tuple[float, float, float, float]
    image_size: tuple[float, float]
    feature_region: np.ndarray
    feature_image: np.ndarray
    questions: list[Question] = field(default_factory=list)
    descriptions: list[str] = field(default_factory=list)
    category: str | None = None

    @property
    def location(self) -> np.ndarray:
        return compute_location_vector(self.bbox, self.image_size)

    def representation(self) -> np.ndarray:
        """Region local feature, image context and relative location/size."""
        return np.concatenate([self.feature_region, self.feature_image, self.location])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionRecord):
            return NotImplemented
        return (
            self.region_id == other.region_id
            and self.image_id == other.image_id
            and tuple(self.bbox) == tuple(other.bbox)
            and tuple(self.image_size) == tuple(other.image_size)
            and np.array_equal(self.feature_region, other.feature_region)
            and np.array_equal(self.feature_image, other.feature_image)
            and self.questions == other.questions
            and self.descriptions == other.descriptions
            and self.category == other.category
        )


@dataclass
class Reference:
    text: str
    rating: str

    @property
    def weight(self) -> float:
        return RATING_WEIGHTS[self.rating]


@dataclass
class EvalPair:
    pair_id: str
    region_a: str
    region_b: str
    references: list[Reference]


@dataclass
class Corpus:
    regions: dict[str, RegionRecord] = field(default_factory=dict)
    pairs: list[EvalPair] = field(default_factory=list)
    rejects: int = 0
    reject_log: list[str] = field(default_factory=list)

    def image_ids(self) -> list[str]:
        return sorted({r.image_id for r in self.regions.values()})

    def region_list(self) -> list[RegionRecord]:
        return list(self.regions.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return list(self.regions.items()) == list(other.regions.items()) and self.pairs == other.pairs


def compute_location_vector(bbox, image_size) -> np.ndarray:
    x_tl, y_tl, x_br, y_br = (float(v) for v in bbox)
    W, H = (float(v) for v in image_size)
    if W <= 0 or H <= 0:
        raise ValueError(f"image size {image_size} has zero area")
    area = (x_br - x_tl) * (y_br - y_tl)
    return np.array([x_tl / W, y_tl / H, x_br / W, y_br / H, area / (W * H)])


def bbox_is_valid(bbox, image_size) -> bool:
    try:
        x_tl, y_tl, x_br, y_br = (float(v) for v in bbox)
        W, H = (float(v) for v in image_size)
    except (TypeError, ValueError):
        return False
    return 0 <= x_tl < x_br <= W and 0 <= y_tl < y_br <= H


# ---------------------------------------------------------------------------
# JSON lines I/O

_REGION_FIELDS = ("region_id", "image_id", "bbox", "image_size", "feature_region",
                  "feature_image", "questions", "descriptions")
_PAIR_FIELDS = ("pair_id", "region_a", "region_b", "references")


def region_to_json(r: RegionRecord) -> dict:
    out = {
        "region_id": r.region_id,
        "image_id": r.image_id,
        "bbox": list(r.bbox),
        "image_size": list(r.image_size),
        "feature_region": [float(x) for x in r.feature_region],
        "feature_image": [float(x) for x in r.feature_image],
        "questions": [{"text": q.text, "answer": q.answer} for q in r.questions],
        "descriptions": list(r.descriptions),
    }
    if r.category is not None:
        out["category"] = r.category
    return out


def pair_to_json(p: EvalPair) -> dict:
    return {
        "pair_id": p.pair_id,
        "region_a": p.region_a,
        "region_b": p.region_b,
        "references": [{"text": ref.text, "rating": ref.rating} for ref in p.references],
    }


def dump_corpus(corpus: Corpus, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "regions.jsonl", "w", encoding="utf-8") as fh:
        for r in corpus.regions.values():
            fh.write(json.dumps(region_to_json(r)) + "\n")
    with open(d / "pairs.jsonl", "w", encoding="utf-8") as fh:
        for p in corpus.pairs:
            fh.write(json.dumps(pair_to_json(p)) + "\n")


def _read_jsonl(path: Path, required: Sequence[str]):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = [k for k in required if k not in obj]
            if missing:
                raise ParseError(f"{path}:{lineno}: missing required field(s) {', '.join(missing)}")
            yield lineno, obj


def ingest_corpus(path, feature_dim: int | None = None) -> Corpus:
    """Load regions.jsonl (+ optional pairs.jsonl) from a directory or file.

    Records with an invalid bounding box are rejected and counted. A feature
    vector whose length differs from ``feature_dim`` is a schema error; when
    ``feature_dim`` is None it is taken from the first record.
    """
    p = Path(path)
    regions_path = p / "regions.jsonl" if p.is_dir() else p
    pairs_path = regions_path.parent / "pairs.jsonl" if p.is_dir() else None
    corpus = Corpus()
    for lineno, obj in _read_jsonl(regions_path, _REGION_FIELDS):
        for key in ("feature_region", "feature_image"):
            n = len(obj[key])
            if feature_dim is None:
                feature_dim = n
            if n != feature_dim:
                raise SchemaError(f"{regions_path}:{lineno}: {key} has length {n}, profile expects {feature_dim}")
        if len(obj["bbox"]) != 4 or len(obj["image_size"]) != 2 or not bbox_is_valid(obj["bbox"], obj["image_size"]):
            corpus.rejects += 1
            msg = f"{regions_path}:{lineno}: rejected region {obj['region_id']!r}: invalid bbox {obj['bbox']}"
            corpus.reject_log.append(msg)
            log.warning(msg)
            continue
        try:
            questions = [Question(q["text"], q["answer"]) for q in obj["questions"]]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"{regions_path}:{lineno}: malformed question entry") from exc
        rec = RegionRecord(
            region_id=str(obj["region_id"]),
            image_id=str(obj["image_id"]),
            bbox=tuple(obj["bbox"]),
            image_size=tuple(obj["image_size"]),
            feature_region=np.asarray(obj["feature_region"], dtype=np.float64),
            feature_image=np.asarray(obj["feature_image"], dtype=np.float64),
            questions=questions,
            descriptions=list(obj["descriptions"]),
            category=obj.get("category"),
        )
        corpus.regions[rec.region_id] = rec
    if pairs_path is not None and pairs_path.exists():
        for lineno, obj in _read_jsonl(pairs_path, _PAIR_FIELDS):
            refs = []
            for ref in obj["references"]:
                if ref.get("rating") not in RATING_WEIGHTS or "text" not in ref:
                    raise ParseError(f"{pairs_path}:{lineno}: bad reference {ref!r}")
                refs.append(Reference(ref["text"], ref["rating"]))
            if not refs:
                raise ParseError(f"{pairs_path}:{lineno}: empty reference set")
            if obj["region_a"] not in corpus.regions or obj["region_b"] not in corpus.regions:
                corpus.rejects += 1
                corpus.reject_log.append(f"{pairs_path}:{lineno}: pair {obj['pair_id']!r} refers to unknown region")
                continue
            corpus.pairs.append(EvalPair(str(obj["pair_id"]), str(obj["region_a"]), str(obj["region_b"]), refs))
    return corpus


# ---------------------------------------------------------------------------
# splits

SPLIT_NAMES = ("train", "val", "test")


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    sizes = [int(np.floor(q)) for q in quotas]
    left = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - sizes[k]), k))
    for k in order[:left]:
        sizes[k] += 1
    return sizes


def make_splits(image_ids: Iterable[str], ratios=(0.7, 0.15, 0.15), seed: int = 0) -> dict[str, str]:
    """Assign whole images to train/val/test; every region of an image shares a split."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    ids = sorted(set(image_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    sizes = _largest_remainder(len(ids), ratios)
    out: dict[str, str] = {}
    start = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for k in order[start:start + size]:
            out[ids[k]] = name
        start += size
    return out


def regions_in_split(corpus: Corpus, splits: dict[str, str], name: str) -> list[RegionRecord]:
    return [r for r in corpus.regions.values() if splits.get(r.image_id) == name]


def pairs_in_split(corpus: Corpus, splits: dict[str, str], name: str) -> list[EvalPair]:
    out = []
    for p in corpus.pairs:
        a = corpus.regions[p.region_a]
        b = corpus.regions[p.region_b]
        if splits.get(a.image_id) == name and splits.get(b.image_id) == name:
            out.append(p)
    return out
