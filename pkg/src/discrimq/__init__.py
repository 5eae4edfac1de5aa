"""Discriminative question generation for pairs of ambiguous image regions."""

from .attributes import AttributeVocab, extract_attribute_vocab, predict_attributes, train_attr_model
from .config import RunConfig, load_config
from .corpus import Corpus, EvalPair, RegionRecord, Vocabulary, ingest_corpus, make_splits, tokenize
from .metrics import bleu_corpus, delta_bleu_corpus
from .pairselect import PairScore, SelectorConfig, rank_pairs_topk, score_pair
from .qgen import (BeamConfig, DiscriminativeGenerator, beam_search_joint, generate_baseline,
                   generate_discriminative, joint_step, retrieval_baseline, train_baseline, train_qgen)
from .synth import WorldConfig, synth_microworld
from .vqa import train_vqa

__version__ = "0.1.0"

__all__ = [
    "AttributeVocab", "BeamConfig", "Corpus", "DiscriminativeGenerator", "EvalPair", "PairScore",
    "RegionRecord", "RunConfig", "SelectorConfig", "Vocabulary", "WorldConfig", "beam_search_joint",
    "bleu_corpus", "delta_bleu_corpus", "extract_attribute_vocab", "generate_baseline",
    "generate_discriminative", "ingest_corpus", "joint_step", "load_config", "make_splits",
    "predict_attributes", "rank_pairs_topk", "retrieval_baseline", "score_pair", "synth_microworld",
    "tokenize", "train_attr_model", "train_baseline", "train_qgen", "train_vqa",
]
