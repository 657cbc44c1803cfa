"""Shared fixtures: tiny vocabularies, corpora, and fitted models."""

import numpy as np
import pytest

from taskrec.corpus import (CommandSequence, SyntheticSpec, Vocabulary,
                            generate_synthetic)
from taskrec.topics import BtmConfig, fit_btm


def make_sequences(n, vocab_size, length=21, seed=0, users=None):
    """Random sequences with no run longer than 2 (preprocess-clean)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        cmds = [int(rng.integers(vocab_size))]
        while len(cmds) < length:
            c = int(rng.integers(vocab_size))
            if len(cmds) >= 2 and cmds[-1] == cmds[-2] == c:
                continue
            cmds.append(c)
        gaps = (0.0,) + tuple(float(g) for g in rng.uniform(1, 10, length - 1))
        user = users[i % len(users)] if users else f"u{i % 7}"
        out.append(CommandSequence(user=user, commands=tuple(cmds), gaps=gaps))
    return out


@pytest.fixture(scope="session")
def small_vocab():
    return Vocabulary.from_names([f"cmd_{i:02d}" for i in range(10)])


@pytest.fixture(scope="session")
def random_corpus(small_vocab):
    return make_sequences(200, len(small_vocab), seed=42)


@pytest.fixture(scope="session")
def planted():
    """Small planted-task corpus plus a fitted BTM, shared across tests."""
    spec = SyntheticSpec(num_tasks=3, vocab_per_task=8, docs=150,
                         doc_length=21, task_mixing=0.05,
                         transition_sharpness=8.0)
    sequences, labels, vocab = generate_synthetic(spec, seed=7)
    btm = fit_btm(sequences, BtmConfig(K=3, iterations=120, seed=7), vocab)
    return spec, sequences, labels, vocab, btm
