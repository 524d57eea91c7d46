"""Shared fixtures. The expensive trained checkpoints are session-scoped so
the directional-replication and non-degradation tests reuse one training run.
"""

import os

import pytest
import torch

from racg.corpus import (
    build_vocabulary, dedup_test_against_train, generate_synthetic_corpus,
    tokenize_splits,
)
from racg.joint import TrainingConfig, train
from racg.neural import ModelConfig, make_encoder, make_generator

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures")


def small_training_config(**overrides):
    """Training settings sized for the synthetic corpus on a laptop CPU."""
    base = dict(k=4, epochs=3, patience=2, batch_size=4, grad_accum=2,
                beam_size=5, learning_rate=1e-3, seed=7, max_decode_len=16)
    base.update(overrides)
    return TrainingConfig(**base)


@pytest.fixture(scope="session")
def bench_corpus():
    """T=10 templates, 600/100/100 splits, tokenized and deduped."""
    corpus = generate_synthetic_corpus(10, 80, seed=1)
    vocab = build_vocabulary(corpus.splits.train)
    splits = dedup_test_against_train(tokenize_splits(corpus.splits, vocab))
    return {"splits": splits, "vocab": vocab, "template_of": corpus.template_of}


@pytest.fixture(scope="session")
def bench_model_config(bench_corpus):
    return ModelConfig(vocab_size=len(bench_corpus["vocab"]), max_positions=128)


@pytest.fixture(scope="session")
def joint_run(bench_corpus, bench_model_config):
    """One jointly trained checkpoint shared by the slow acceptance tests."""
    encoder = make_encoder(bench_model_config, seed=11)
    generator = make_generator(bench_model_config, seed=22)
    config = small_training_config()
    result = train(config, bench_corpus["splits"], encoder, generator)
    return {"result": result, "config": config,
            "encoder": encoder, "generator": generator}


@pytest.fixture(scope="session")
def tiny_corpus():
    """T=4 templates, 36/4/8 pairs; fast enough for per-module tests."""
    corpus = generate_synthetic_corpus(4, 12, seed=3)
    vocab = build_vocabulary(corpus.splits.train)
    splits = dedup_test_against_train(tokenize_splits(corpus.splits, vocab))
    return {"splits": splits, "vocab": vocab, "template_of": corpus.template_of}


@pytest.fixture()
def tiny_models(tiny_corpus):
    config = ModelConfig(vocab_size=len(tiny_corpus["vocab"]), hidden_size=32,
                         num_layers=1, num_heads=2, ff_size=64, dropout=0.0,
                         max_positions=128)
    return make_encoder(config, seed=5), make_generator(config, seed=6), config
