"""Synthetic micro-world with known attributes, questions and rated pairs.

Every region takes one value per attribute family. Region features are the
one-hot family blocks plus Gaussian noise, followed by nuisance dimensions
that carry no attribute information (pose, background and the like in real
features). Questions come from per-family
templates. Each object category has a favourite family that it is asked
about more often. An evaluation pair shares its object and differs in one or
more families: the first is drawn from the category's question prior and
rated strong-positive, any further ones weak-positive. The returned ground
truth table lets tests score every stage exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, EvalPair, Question, Reference, RegionRecord, tokenize

DEFAULT_FAMILIES: dict[str, list[str]] = {
    "color": ["red", "green", "blue", "white", "black", "yellow"],
    "action": ["stand", "sit", "run", "jump", "walk"],
    "count": ["one", "more_than_one"],
    "location": ["on grass", "in water", "on road", "near tree"],
    "object": ["man", "woman", "dog", "cat", "horse", "bird", "boy", "girl"],
}

TEMPLATES: dict[str, list[str]] = {
    "color": ["what color is the {obj}?", "what is the color of the {obj}?"],
    "action": ["what is the {obj} doing?", "what is this {obj} doing?"],
    "count": ["how many {obj} are there?", "how many {obj} can you see?"],
    "location": ["where is the {obj}?", "where is the {obj} located?"],
    "object": ["what is this?", "what is shown here?"],
}

# families whose values can differ inside an evaluation pair; the object is shared
PAIR_FAMILIES = ("color", "action", "count", "location")

_MANY = ["two", "three", "four", "five"]


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    families: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_FAMILIES.items()})
    noise: float = 0.05
    n_images: int = 700
    n_pairs: int = 600
    max_regions_per_image: int = 3
    questions_per_region: tuple[int, int] = (2, 4)
    question_family_weights: dict[str, float] = field(default_factory=lambda: {
        "color": 0.3, "action": 0.2, "location": 0.2, "count": 0.15, "object": 0.15})
    # share of a region's question prior given to its category's favourite family
    category_focus: float = 0.5
    max_pair_differences: int = 2
    nuisance_dims: int = 16
    # default: nuisance variance roughly equal to the attribute variance between two random regions
    nuisance_scale: float = 0.5

    @property
    def feature_dim(self) -> int:
        return sum(len(v) for v in self.families.values()) + self.nuisance_dims

    def to_dict(self) -> dict:
        return {
            "families": self.families,
            "noise": self.noise,
            "n_images": self.n_images,
            "n_pairs": self.n_pairs,
            "max_regions_per_image": self.max_regions_per_image,
            "questions_per_region": list(self.questions_per_region),
            "question_family_weights": self.question_family_weights,
            "category_focus": self.category_focus,
            "max_pair_differences": self.max_pair_differences,
            "nuisance_dims": self.nuisance_dims,
            "nuisance_scale": self.nuisance_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "questions_per_region" in d:
            d["questions_per_region"] = tuple(d["questions_per_region"])
        return cls(**d)


@dataclass
class GroundTruth:
    families: dict[str, list[str]]
    region_values: dict[str, dict[str, str]]
    # differing families per pair, the strong-positive one first
    pair_family: dict[str, list[str]]

    def region_attributes(self, region_id: str) -> set[str]:
        """Expressions that truly hold for a region."""
        out = set()
        for fam, value in self.region_values[region_id].items():
            out.add(value)
            if fam == "location":
                out.add(value.split()[-1])
        return out

    def attribute_family(self, expression: str) -> str | None:
        return attribute_family(expression, self.families)

    def to_json(self) -> dict:
        return {"families": self.families, "region_values": self.region_values, "pair_family": self.pair_family}

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        return cls(d["families"], d["region_values"], d["pair_family"])


def attribute_family(expression: str, families: dict[str, list[str]]) -> str | None:
    from .attributes import pos_tag_lite

    toks = [t for t, tag in zip(tokenize(expression), pos_tag_lite(tokenize(expression))) if tag != "IN"]
    for fam, values in families.items():
        for v in values:
            if set(toks) & set(tokenize(v)):
                return fam
    return None


def question_family(tokens) -> str | None:
    """Template family a question belongs to, by its key words."""
    toks = list(tokens)
    if "color" in toks:
        return "color"
    if "doing" in toks:
        return "action"
    if toks[:2] == ["how", "many"]:
        return "count"
    if toks[:1] == ["where"]:
        return "location"
    if toks in (["what", "is", "this"], ["what", "is", "shown", "here"]):
        return "object"
    return None


def describe(values: dict[str, str], rng) -> list[tuple[str, list[str]]]:
    """Descriptions of a region with the gold part-of-speech tag of each token."""
    obj = values["object"]
    loc = values["location"].split()
    out = [
        (f"the {obj} is {values['color']}", ["OTHER", "NN", "OTHER", "JJ"]),
        (f"the {obj} {values['action']} {' '.join(loc)}", ["OTHER", "NN", "VB", "IN", "NN"]),
    ]
    if values["count"] == "one":
        out.append((f"there is one {obj}", ["OTHER", "OTHER", "CD", "NN"]))
    else:
        out.append((f"there are {rng.choice(_MANY)} {obj}", ["OTHER", "OTHER", "CD", "NN"]))
    return out


def favourite_family(obj: str, families: dict[str, list[str]]) -> str:
    return PAIR_FAMILIES[families["object"].index(obj) % len(PAIR_FAMILIES)]


def question_prior(obj: str, config: "WorldConfig") -> dict[str, float]:
    w = config.question_family_weights
    total = sum(w.values())
    fav = favourite_family(obj, config.families)
    prior = {f: (1.0 - config.category_focus) * v / total for f, v in w.items()}
    prior[fav] = prior.get(fav, 0.0) + config.category_focus
    return prior


def _answer(fam: str, values: dict[str, str], rng) -> str:
    if fam == "count" and values["count"] != "one":
        return str(rng.choice(_MANY))
    return values[fam]


def _one_hot(values, families) -> np.ndarray:
    blocks = []
    for fam, options in families.items():
        onehot = np.zeros(len(options))
        onehot[options.index(values[fam])] = 1.0
        blocks.append(onehot)
    return np.concatenate(blocks)


def _bbox(rng, W, H):
    x0 = int(rng.integers(0, W - 40))
    y0 = int(rng.integers(0, H - 40))
    x1 = int(rng.integers(x0 + 20, W + 1))
    y1 = int(rng.integers(y0 + 20, H + 1))
    return (x0, y0, x1, y1)


def synth_microworld(config: WorldConfig | None = None, seed: int = 0) -> tuple[Corpus, GroundTruth]:
    config = config or WorldConfig()
    fams = config.families
    if not fams:
        raise ConfigError("world needs at least one attribute family")
    missing = [f for f in ("object", *PAIR_FAMILIES) if f not in fams]
    if missing:
        raise ConfigError(f"world is missing families: {missing}")
    if not 0.0 <= config.category_focus <= 1.0:
        raise ConfigError("category_focus must lie in [0, 1]")
    if config.nuisance_dims < 0 or config.nuisance_scale < 0:
        raise ConfigError("nuisance_dims and nuisance_scale must be non-negative")
    if not 1 <= config.max_pair_differences <= len(PAIR_FAMILIES):
        raise ConfigError(f"max_pair_differences must lie in [1, {len(PAIR_FAMILIES)}]")
    rng = np.random.default_rng(seed)
    priors = {}
    for obj in fams["object"]:
        prior = question_prior(obj, config)
        names = list(prior)
        probs = np.array([prior[f] for f in names])
        priors[obj] = (names, probs / probs.sum())

    corpus = Corpus()
    truth = GroundTruth({k: list(v) for k, v in fams.items()}, {}, {})

    def nuisance():
        return config.nuisance_scale * rng.standard_normal(config.nuisance_dims)

    def random_values():
        return {fam: opts[int(rng.integers(len(opts)))] for fam, opts in fams.items()}

    def add_image(image_id, region_values):
        W, H = int(rng.integers(320, 641)), int(rng.integers(320, 641))
        clean = [_one_hot(v, fams) for v in region_values]
        context = np.mean(clean, axis=0)
        f_img = np.concatenate([context + config.noise * rng.standard_normal(context.shape), nuisance()])
        ids = []
        for k, (values, base) in enumerate(zip(region_values, clean)):
            rid = f"{image_id}_r{k}"
            n_q = int(rng.integers(config.questions_per_region[0], config.questions_per_region[1] + 1))
            qfams, qprobs = priors[values["object"]]
            questions = []
            seen = set()
            for ci in rng.choice(len(qfams), size=n_q, p=qprobs):
                fam = qfams[ci]
                text = TEMPLATES[fam][int(rng.integers(len(TEMPLATES[fam])))].format(obj=values["object"])
                if text not in seen:
                    seen.add(text)
                    questions.append(Question(text, _answer(fam, values, rng)))
            rec = RegionRecord(
                region_id=rid,
                image_id=image_id,
                bbox=_bbox(rng, W, H),
                image_size=(W, H),
                feature_region=np.concatenate([base + config.noise * rng.standard_normal(base.shape), nuisance()]),
                feature_image=f_img.copy(),
                questions=questions,
                descriptions=[d for d, _ in describe(values, rng)],
                category=values["object"],
            )
            corpus.regions[rid] = rec
            truth.region_values[rid] = dict(values)
            ids.append(rid)
        return ids

    for n in range(config.n_images):
        k = int(rng.integers(1, config.max_regions_per_image + 1))
        add_image(f"img{n:05d}", [random_values() for _ in range(k)])

    for n in range(config.n_pairs):
        va = random_values()
        prior = question_prior(va["object"], config)
        p = np.array([prior.get(f, 0.0) for f in PAIR_FAMILIES]) + 1e-12
        first = PAIR_FAMILIES[int(rng.choice(len(PAIR_FAMILIES), p=p / p.sum()))]
        rest = [f for f in PAIR_FAMILIES if f != first]
        n_extra = int(rng.integers(config.max_pair_differences))
        extra = [rest[k] for k in sorted(rng.choice(len(rest), size=n_extra, replace=False))]
        vb = dict(va)
        for fam in [first, *extra]:
            others = [v for v in fams[fam] if v != va[fam]]
            vb[fam] = others[int(rng.integers(len(others)))]
        ra, rb = add_image(f"pimg{n:05d}", [va, vb])
        refs = []
        for qfam, tmpls in TEMPLATES.items():
            rating = "strong_pos" if qfam == first else "weak_pos" if qfam in extra else "neg"
            refs.extend(Reference(t.format(obj=va["object"]), rating) for t in tmpls)
        pid = f"pair{n:05d}"
        corpus.pairs.append(EvalPair(pid, ra, rb, refs))
        truth.pair_family[pid] = [first, *extra]
    return corpus, truth


def sample_tagged_tokens(n_tokens: int, seed: int = 0, families=None) -> tuple[list[str], list[str]]:
    """Tokens and gold tags drawn from generated descriptions."""
    fams = families or DEFAULT_FAMILIES
    rng = np.random.default_rng(seed)
    toks: list[str] = []
    tags: list[str] = []
    while len(toks) < n_tokens:
        values = {f: opts[int(rng.integers(len(opts)))] for f, opts in fams.items()}
        for text, gold in describe(values, rng):
            toks.extend(tokenize(text))
            tags.extend(gold)
    return toks[:n_tokens], tags[:n_tokens]
