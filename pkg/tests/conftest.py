"""Shared fixtures: small synthetic worlds and a few trained models.

Training fixtures are session-scoped because they take tens of seconds; every
test that needs a *converged* model reuses them instead of training its own.
"""

from __future__ import annotations

import numpy as np
import pytest

from modnet import data as dk
from modnet import models as mz
from modnet import training as tr
from modnet.data import Direction
from modnet.transformer import preset


class World:
    """A generated corpus plus its division and vocabularies."""

    def __init__(self, languages, concept_vocab, rows, valid_rows, test_rows,
                 lengths=(4, 10), seed=11, joint=False, reorders=None):
        self.languages = list(languages)
        self.concepts = concept_vocab
        self.specs = dk.make_language_specs(languages, concept_vocab, seed, reorders)
        self.train_corpus = dk.synth_generate(self.specs, rows, lengths, concept_vocab, seed)
        self.valid_corpus = dk.synth_generate(self.specs, valid_rows, lengths, concept_vocab, seed + 1)
        self.test_corpus = dk.synth_generate(self.specs, test_rows, lengths, concept_vocab, seed + 2)
        parts = dk.min_parts(len(languages))
        self.plan, self.train_pairs = dk.split_nonsharing(self.train_corpus, parts, seed)
        _, self.valid_pairs = dk.split_nonsharing(self.valid_corpus, parts, seed)
        _, self.test_pairs = dk.split_nonsharing(self.test_corpus, parts, seed)
        per_lang = {l: self.train_corpus.column(l) for l in languages}
        if joint:
            self.vocabs = dk.build_vocab(per_lang, "joint",
                                         len(languages) * concept_vocab + 16, languages)
        else:
            self.vocabs = dk.build_vocab(per_lang, "per_language", concept_vocab + 8)


@pytest.fixture(scope="session")
def pair_world():
    return World(["aa", "bb"], 40, 1200, 120, 120)


@pytest.fixture(scope="session")
def pair_model(pair_world):
    """Two dedicated single-direction models (aa-bb and bb-aa), well trained."""
    w = pair_world
    dirs = [Direction("aa", "bb"), Direction("bb", "aa")]
    model = mz.assemble("single", w.languages, preset("desk"), dict(w.vocabs), dirs, seed=5)
    settings = tr.TrainSettings(module_budget=1024, max_epochs=10 ** 6, max_steps=450,
                                warmup_steps=150, peak_lr=3e-3)
    tr.train(model, w.train_pairs, w.valid_pairs, dirs, settings, seed=5)
    return model


@pytest.fixture(scope="session")
def one2one_world():
    return World(["aa", "bb"], 40, 1200, 120, 120, joint=True)


@pytest.fixture(scope="session")
def one2one_model(one2one_world):
    """A fully-shared model over two languages, both directions supervised."""
    w = one2one_world
    dirs = [Direction("aa", "bb"), Direction("bb", "aa")]
    model = mz.assemble("one_to_one", w.languages, preset("desk"), dict(w.vocabs), dirs, seed=6)
    settings = tr.TrainSettings(module_budget=1024, max_epochs=10 ** 6, max_steps=500,
                                warmup_steps=150, peak_lr=3e-3)
    tr.train(model, w.train_pairs, w.valid_pairs, dirs, settings, seed=6)
    return model


@pytest.fixture(scope="session")
def m2_world():
    return World(["aa", "bb", "cc"], 40, 1200, 120, 120)


@pytest.fixture(scope="session")
def m2_model(m2_world):
    """A modular model over three languages trained on all six directions."""
    w = m2_world
    dirs = mz.trainable_directions(w.languages, "m2m")
    model = mz.assemble("m2", w.languages, preset("desk"), dict(w.vocabs), dirs, seed=7)
    settings = tr.TrainSettings(module_budget=1200, max_epochs=10 ** 6, max_steps=420,
                                warmup_steps=150, peak_lr=3e-3)
    tr.train(model, w.train_pairs, w.valid_pairs, dirs, settings, seed=7)
    return model
