"""Pipeline stages shared by the command line and the demos.

Each stage reads its inputs from the run's output directory, writes its
artifacts there, and returns a small status dict.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import nn
from .attributes import (AttrHyper, AttrModel, AttributeVocab, attr_loss_and_grad, extract_attribute_vocab,
                         init_attr_model, label_regions, mean_average_precision, predict_attributes,
                         similarity_matrix, train_attr_model)
from .config import METHODS, ConfigError, RunConfig
from .corpus import (Corpus, DataError, Vocabulary, build_vocab, dump_corpus, ingest_corpus,
                     make_splits, pairs_in_split, regions_in_split, tokenize)
from .metrics import bleu_corpus, delta_bleu_corpus
from .pairselect import SelectorConfig, rank_pairs_topk
from .qgen import (BASELINE, CONDITIONED, BeamConfig, DiscriminativeGenerator, QGenHyper, QGenModel,
                   RetrievalIndex, generate_baseline, init_qgen_model, load_word_vectors,
                   qgen_loss_and_grad, train_baseline, train_qgen)
from .synth import GroundTruth, WorldConfig, synth_microworld
from .vqa import VqaHyper, VqaModel, init_vqa_model, question_similarity_matrix, train_vqa, vqa_loss_and_grad

log = logging.getLogger(__name__)


def _hyper(cls, section: dict, seed: int):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in section.items() if k in names}, seed=seed)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    if not path.exists():
        raise ConfigError(f"missing input: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _require(path: Path) -> Path:
    if not path.exists():
        raise ConfigError(f"missing input: {path}")
    return path


# ---------------------------------------------------------------------------
# stage helpers


class Run:
    """Lazy access to the artifacts of one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out_dir
        self._corpus = None
        self._splits = None

    def world_config(self) -> WorldConfig:
        w = dict(self.cfg.section("world"))
        known = {f.name for f in fields(WorldConfig)}
        unknown = set(w) - known
        if unknown:
            raise ConfigError(f"unknown config key: world.{sorted(unknown)[0]}")
        return WorldConfig.from_dict(w)

    def feature_dim(self):
        d = self.cfg.get("corpus.feature_dim")
        if d is None and self.cfg.get("profile") == "synthetic":
            d = self.world_config().feature_dim
        return d

    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            _require(self.cfg.corpus_dir / "regions.jsonl")
            self._corpus = ingest_corpus(self.cfg.corpus_dir, self.feature_dim())
        return self._corpus

    @property
    def splits(self) -> dict[str, str]:
        if self._splits is None:
            self._splits = _read_json(self.out / "splits.json")
        return self._splits

    def regions(self, split: str):
        return regions_in_split(self.corpus, self.splits, split)

    def pairs(self, split: str):
        return pairs_in_split(self.corpus, self.splits, split)

    def vocab(self) -> Vocabulary:
        return Vocabulary.from_json(_read_json(self.out / "vocab.json"))

    def attr_vocab(self) -> AttributeVocab:
        return AttributeVocab.load(_require(self.out / "attribute_vocab.json"))

    def attr_model(self) -> AttrModel:
        return AttrModel.from_checkpoint(_require(self.out / "attr.ckpt"))

    def vqa_model(self) -> VqaModel:
        return VqaModel.from_checkpoint(_require(self.out / "vqa.ckpt"))

    def qgen_model(self) -> QGenModel:
        return QGenModel.from_checkpoint(_require(self.out / "qgen.ckpt"))

    def baseline_model(self) -> QGenModel:
        return QGenModel.from_checkpoint(_require(self.out / "baseline.ckpt"))

    def ground_truth(self) -> GroundTruth | None:
        p = self.cfg.corpus_dir / "ground_truth.json"
        return GroundTruth.from_json(json.loads(p.read_text())) if p.exists() else None

    def beam(self) -> BeamConfig:
        return BeamConfig(self.cfg.get("beam.width"), self.cfg.get("beam.max_len"))


def stage_synth(cfg: RunConfig) -> dict:
    world = Run(cfg).world_config()
    corpus, truth = synth_microworld(world, cfg.seed)
    dump_corpus(corpus, cfg.corpus_dir)
    _write_json(cfg.corpus_dir / "ground_truth.json", truth.to_json())
    return {"regions": len(corpus.regions), "pairs": len(corpus.pairs), "feature_dim": world.feature_dim}


def stage_ingest(cfg: RunConfig) -> dict:
    run = Run(cfg)
    corpus = run.corpus
    splits = make_splits(corpus.image_ids(), cfg.get("corpus.split_ratios"), cfg.seed)
    train = regions_in_split(corpus, splits, "train")
    vocab = build_vocab((q.tokens for r in train for q in r.questions), cfg.get("corpus.min_freq"))
    descriptions = [tokenize(d) for r in train for d in r.descriptions]
    answers = [q.answer_tokens for r in train for q in r.questions]
    a = cfg.section("attributes")
    attr_vocab = extract_attribute_vocab(descriptions, answers, K=a["K"], answer_top_n=a["answer_top_n"])
    _write_json(run.out / "vocab.json", vocab.to_json())
    attr_vocab.save(run.out / "attribute_vocab.json")
    _write_json(run.out / "splits.json", dict(sorted(splits.items())))
    counts = {s: sum(1 for v in splits.values() if v == s) for s in ("train", "val", "test")}
    return {"regions": len(corpus.regions), "rejects": corpus.rejects, "pairs": len(corpus.pairs),
            "vocab": len(vocab), "K": attr_vocab.K, "attribute_shortfall": attr_vocab.shortfall,
            "images": counts}


def stage_train_attr(cfg: RunConfig) -> dict:
    run = Run(cfg)
    vocab = run.attr_vocab()
    model = train_attr_model(run.regions("train"), vocab, _hyper(AttrHyper, cfg.section("attributes"), cfg.seed))
    model.save(run.out / "attr.ckpt")
    held = run.regions("val") + run.regions("test")
    scores = predict_attributes(model, held)
    labels = np.stack([label_regions(r, vocab) for r in held])
    return {"map_heldout": mean_average_precision(scores, labels)}


def stage_train_vqa(cfg: RunConfig) -> dict:
    run = Run(cfg)
    model = train_vqa(run.regions("train"), run.vocab(), run.attr_vocab(),
                      _hyper(VqaHyper, cfg.section("vqa"), cfg.seed))
    model.save(run.out / "vqa.ckpt")
    return {"K": model.attr_vocab.K}


def stage_train_qgen(cfg: RunConfig) -> dict:
    run = Run(cfg)
    attr_vocab = run.attr_vocab()
    table = None
    wv = cfg.get("paths.word_vectors")
    if wv:
        table = load_word_vectors(_require(Path(wv)), attr_vocab)
    model = train_qgen(run.regions("train"), run.vocab(), attr_vocab,
                       _hyper(QGenHyper, cfg.section("qgen"), cfg.seed), attribute_embeddings=table)
    model.save(run.out / "qgen.ckpt")
    return {"params": model.store.num_params()}


def stage_train_baseline(cfg: RunConfig) -> dict:
    run = Run(cfg)
    model = train_baseline(run.regions("train"), run.vocab(), _hyper(QGenHyper, cfg.section("baseline"), cfg.seed))
    model.save(run.out / "baseline.ckpt")
    return {"params": model.store.num_params()}


def selector_config(cfg: RunConfig, alpha=None, beta=None) -> SelectorConfig:
    s = cfg.section("selector")
    return SelectorConfig(s["alpha"] if alpha is None else alpha, s["beta"] if beta is None else beta,
                          s["top_k"], s["mode"])


def stage_select(cfg: RunConfig) -> dict:
    run = Run(cfg)
    attr, vqa = run.attr_model(), run.vqa_model()
    normalize = cfg.get("selector.normalize")
    q_sim = question_similarity_matrix(vqa, normalize)
    v_sim = similarity_matrix(attr.W_f, normalize)
    sel = selector_config(cfg)
    names = attr.vocab.expressions
    lines = []
    pairs = run.pairs("test")
    for p in pairs:
        vA = predict_attributes(attr, run.corpus.regions[p.region_a])
        vB = predict_attributes(attr, run.corpus.regions[p.region_b])
        top = rank_pairs_topk(vA, vB, q_sim, v_sim, sel)
        lines.append({"pair_id": p.pair_id, "top": [
            {"i": s.i, "j": s.j, "att_i": names[s.i], "att_j": names[s.j], "contrast": s.contrast,
             "q_sim": s.q_sim, "v_sim": s.v_sim, "score": s.score} for s in top]})
    _write_jsonl(run.out / "pairs_scored.jsonl", lines)
    return {"pairs": len(lines)}


def _write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    _require(path)
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# generation


def _rated(pair):
    return [(tokenize(r.text), r.weight) for r in pair.references]


def _delta_bleu_of(questions, pairs) -> float:
    return delta_bleu_corpus([tokenize(q) for q in questions], [_rated(p) for p in pairs]).score


def _method_selector(method: str, alpha: float, beta: float):
    if method == "acqg_ac":
        return 0.0, 0.0
    if method == "acqg_ac_qs":
        return alpha, 0.0
    return alpha, beta


def tune_selector(gen: DiscriminativeGenerator, run: Run, method: str) -> tuple[float, float, float]:
    """Grid search of (alpha, beta) on validation pairs by corpus delta-BLEU."""
    cfg = run.cfg
    grid = [float(g) for g in cfg.get("selector.grid")]
    if method == "acqg_ac_qs":
        candidates = [(a, 0.0) for a in grid]
    else:
        candidates = [(a, b) for a in grid for b in grid]
    pairs = run.pairs("val")
    if not pairs:
        raise DataError("no validation pairs to tune the selector on")
    regions = run.corpus.regions
    best = best_plain = None
    for a, b in candidates:
        sel = selector_config(cfg, a, b)
        qs = [gen.generate(regions[p.region_a], regions[p.region_b], sel).text for p in pairs]
        score = _delta_bleu_of(qs, pairs)
        log.info("tune %s alpha=%g beta=%g val delta-bleu=%.4f", method, a, b, score)
        if best is None or score > best[2]:
            best = (a, b, score)
        if b == 0.0 and (best_plain is None or score > best_plain[2]):
            best_plain = (a, b, score)
    # a visual-dissimilarity weight has to earn its place on validation
    if best_plain is not None and best[2] - best_plain[2] <= float(cfg.get("selector.min_gain")):
        return best_plain
    return best


def stage_generate(cfg: RunConfig, method: str | None = None) -> dict:
    run = Run(cfg)
    method = method or cfg.get("method")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    corpus = run.corpus
    pairs = run.pairs("test")
    rows = []
    info: dict = {"method": method, "pairs": len(pairs)}
    if method == "retrieval":
        index = RetrievalIndex(run.regions("train"))
        k = cfg.get("retrieval.k")
        for p in pairs:
            g = index.retrieve(corpus.regions[p.region_a], corpus.regions[p.region_b], k)
            rows.append(_row(p, g, method, None))
    elif method == "cnn_lstm":
        model = run.baseline_model()
        beam = run.beam()
        for p in pairs:
            g = generate_baseline(corpus.regions[p.region_a], corpus.regions[p.region_b], model, beam)
            rows.append(_row(p, g, method, None))
    else:
        attr = run.attr_model()
        gen = DiscriminativeGenerator(attr, run.vqa_model(), run.qgen_model(), run.beam(),
                                      cfg.get("selector.normalize"))
        alpha, beta = _method_selector(method, cfg.get("selector.alpha"), cfg.get("selector.beta"))
        if cfg.get("selector.tune") and method != "acqg_ac":
            alpha, beta, val = tune_selector(gen, run, method)
            info["val_delta_bleu"] = val
        info.update(alpha=alpha, beta=beta)
        sel = selector_config(cfg, alpha, beta)
        names = attr.vocab.expressions
        for p in pairs:
            g = gen.generate(corpus.regions[p.region_a], corpus.regions[p.region_b], sel)
            rows.append(_row(p, g, method, names))
    _write_jsonl(run.out / method / "generated.jsonl", rows)
    _write_json(run.out / method / "selector.json", info)
    return info


def _row(pair, g, method, names) -> dict:
    return {
        "pair_id": pair.pair_id,
        "question": g.text,
        "log_prob": g.log_prob,
        "length_normalized_log_prob": g.length_normalized_log_prob,
        "att_i": names[g.att_i] if names is not None and g.att_i is not None else None,
        "att_j": names[g.att_j] if names is not None and g.att_j is not None else None,
        "pair_score": g.pair_score,
        "low_confidence": bool(g.low_confidence),
        "method": method,
    }


# ---------------------------------------------------------------------------
# evaluation and report


def hard_subset(pairs, corpus: Corpus):
    """Per object category, the half of the pairs with the lowest share of positive references."""
    groups: dict[str, list] = {}
    for k, p in enumerate(pairs):
        cat = corpus.regions[p.region_a].category or ""
        ratio = sum(1 for r in p.references if r.weight > 0) / len(p.references)
        groups.setdefault(cat, []).append((ratio, k, p))
    keep = []
    for cat in sorted(groups):
        items = sorted(groups[cat], key=lambda t: (t[0], t[1]))
        keep.extend(items[: math.ceil(len(items) / 2)])
    return [p for _, _, p in sorted(keep, key=lambda t: t[1])]


def evaluate_rows(rows: list[dict], corpus: Corpus, method: str, hard: bool = False):
    by_id = {p.pair_id: p for p in corpus.pairs}
    missing = [r["pair_id"] for r in rows if r["pair_id"] not in by_id]
    if missing:
        raise DataError(f"generated pair ids not in pairs.jsonl: {missing[:3]}")
    pairs = [by_id[r["pair_id"]] for r in rows]
    questions = {r["pair_id"]: r["question"] for r in rows}
    if hard:
        pairs = hard_subset(pairs, corpus)
    if not pairs:
        raise DataError("nothing to evaluate")
    hyps = [tokenize(questions[p.pair_id]) for p in pairs]
    rated = [_rated(p) for p in pairs]
    delta = delta_bleu_corpus(hyps, rated)
    pos = [[t for t, w in rs if w > 0] for rs in rated]
    bleu_items = [(h, r) for h, r in zip(hyps, pos) if r]
    bleu = bleu_corpus([h for h, _ in bleu_items], [r for _, r in bleu_items]) if bleu_items else None
    scores = {
        "method": method,
        "n": len(pairs),
        "delta_bleu": delta.score,
        "bleu": bleu.score if bleu else None,
        "p_n": delta.precisions,
        "bp": delta.brevity_penalty,
        "rho": delta.hyp_length,
        "eta": delta.ref_length,
        "bleu_p_n": bleu.precisions if bleu else None,
        "flags": {"all_negative_eta_count": delta.all_negative_eta_count,
                  "clamped_orders": [n + 1 for n, c in enumerate(delta.clamped) if c],
                  "no_positive_reference": len(pairs) - len(bleu_items)},
        "hard": hard,
    }
    per_sample = []
    for p, h, rs, ps in zip(pairs, hyps, rated, pos):
        d = delta_bleu_corpus([h], [rs]).score
        b = bleu_corpus([h], [ps]).score if ps else None
        per_sample.append((p.pair_id, questions[p.pair_id], d, b))
    return scores, per_sample


def stage_evaluate(cfg: RunConfig, method: str | None = None, hard: bool = False) -> dict:
    run = Run(cfg)
    method = method or cfg.get("method")
    rows = _read_jsonl(run.out / method / "generated.jsonl")
    scores, per_sample = evaluate_rows(rows, run.corpus, method, hard)
    suffix = "_hard" if hard else ""
    _write_json(run.out / method / f"scores{suffix}.json", scores)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair_id", "question", "delta_bleu", "bleu"])
    for pid, q, d, b in per_sample:
        w.writerow([pid, q, repr(d), "" if b is None else repr(b)])
    (run.out / method / f"per_sample{suffix}.csv").write_text(buf.getvalue(), encoding="utf-8")
    return {"method": method, "n": scores["n"], "delta_bleu": scores["delta_bleu"], "bleu": scores["bleu"]}


def emit_report(scores: list[dict], out_dir: Path, name: str = "report") -> dict:
    """Methods x (delta-BLEU, BLEU) table in a fixed method order, as CSV and text."""
    if not scores:
        raise ConfigError("no scores to report")
    order = {m: k for k, m in enumerate(METHODS)}
    rows = sorted(scores, key=lambda s: (order.get(s["method"], len(order)), s["method"]))

    def pct(x):
        return "" if x is None else f"{100.0 * x:.2f}"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "delta_bleu", "bleu", "n"])
    for s in rows:
        w.writerow([s["method"], pct(s["delta_bleu"]), pct(s["bleu"]), s["n"]])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.csv").write_text(buf.getvalue(), encoding="utf-8")
    lines = [f"{'Model':<12}{'dBLEU':>8}{'BLEU':>8}", "-" * 28]
    lines += [f"{s['method']:<12}{pct(s['delta_bleu']):>8}{pct(s['bleu']):>8}" for s in rows]
    (out_dir / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"methods": [s["method"] for s in rows]}


def stage_report(cfg: RunConfig) -> dict:
    out = cfg.out_dir
    status = {}
    for suffix, name in (("", "report"), ("_hard", "report_hard")):
        scores = [json.loads(p.read_text()) for m in METHODS if (p := out / m / f"scores{suffix}.json").exists()]
        if scores:
            status[name] = emit_report(scores, out, name)["methods"]
    if not status:
        raise ConfigError(f"no scores.json found under {out}")
    return status


# ---------------------------------------------------------------------------
# gradient checks


def _tiny_world(seed: int):
    rng = np.random.default_rng(seed)
    vocab = Vocabulary([f"w{k}" for k in range(6)])
    attrs = AttributeVocab([(f"a{k}", ("NN",)) for k in range(5)])
    D = 7
    feats = rng.normal(size=(4, D))
    seqs = [[0, 4, 5, 6, 1], [0, 7, 1], [0, 8, 9, 4, 5, 1], [0, 6, 1]]
    return rng, vocab, attrs, D, feats, seqs


def _scramble(store: nn.ParamStore, rng, scale: float = 0.5) -> None:
    # a generic point: near-zero gradients at the default init are all round-off
    for name in store.trainable():
        store.params[name][...] = rng.normal(0.0, scale, store.params[name].shape)


def gradient_checks(seed: int = 0, eps: float = 1e-4) -> dict[str, float]:
    """Finite-difference checks of every trainable model at tiny sizes, in float64.

    The recurrent models have coordinates with gradients near 1e-7 where a
    1e-5 step drowns in round-off of the loss, hence the larger default step.
    """
    rng, vocab, attrs, D, feats, seqs = _tiny_world(seed)
    out = {}

    attr = init_attr_model(attrs, D, 6, seed, dtype=np.float64)
    _scramble(attr.store, rng)
    Y = (rng.random((4, attrs.K)) < 0.5).astype(float)
    out["attr"] = nn.finite_diff_check(lambda s: attr_loss_and_grad(s, feats, Y), attr.store, eps,
                                       rng=np.random.default_rng(seed))

    vqa = init_vqa_model(vocab, attrs, D, 4, 5, seed, dtype=np.float64)
    _scramble(vqa.store, rng)
    ids = np.array([[4, 5, 6, 3], [7, 3, 3, 3], [8, 9, 4, 5], [6, 4, 3, 3]])
    lengths = np.array([3, 1, 4, 2])
    ans = np.array([0, 3, 1, 4])
    out["vqa"] = nn.finite_diff_check(lambda s: vqa_loss_and_grad(s, ids, lengths, feats, ans), vqa.store, eps,
                                      rng=np.random.default_rng(seed))

    hyper = QGenHyper(d_emb=4, d_att=3, hidden=5, layers=2, seed=seed)
    from .qgen import pad_sequences
    padded = pad_sequences(seqs)
    for name, mode in (("qgen", CONDITIONED), ("baseline", BASELINE)):
        model = init_qgen_model(vocab, attrs, D, hyper, mode, dtype=np.float64)
        _scramble(model.store, rng)
        atts = np.array([0, 2, 4, 2]) if mode == CONDITIONED else None
        out[name] = nn.finite_diff_check(lambda s, m=model, a=atts: qgen_loss_and_grad(m, feats, a, padded)[0],
                                         model.store, eps, rng=np.random.default_rng(seed))
    return out


STAGES = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "train-attr": stage_train_attr,
    "train-vqa": stage_train_vqa,
    "train-qgen": stage_train_qgen,
    "train-baseline": stage_train_baseline,
    "select": stage_select,
}


def run_all(cfg: RunConfig, methods=METHODS, hard: bool = True) -> dict:
    """synth (synthetic profile only) -> ingest -> train-* -> select -> generate/evaluate -> report."""
    status = {}
    for name, fn in STAGES.items():
        if name == "synth" and cfg.get("profile") != "synthetic":
            continue
        cfg.echo(name)
        status[name] = fn(cfg)
    for m in methods:
        status[f"generate:{m}"] = stage_generate(cfg, m)
        status[f"evaluate:{m}"] = stage_evaluate(cfg, m)
        if hard:
            stage_evaluate(cfg, m, hard=True)
    cfg.echo("report")
    status["report"] = stage_report(cfg)
    return status
