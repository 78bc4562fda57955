"""Beam search, BLEU, pivot translation and direction matrices."""

import math

import numpy as np
import pytest

from modnet import data as dk
from modnet import transformer as tf
from modnet.data import BOS_ID, EOS_ID, Direction, pair_key
from modnet.errors import ConfigurationError, ContractViolation, PivotError
from modnet.evaluation import (BleuStats, DecodeConfig, Hypothesis, beam_search,
                               corpus_bleu, evaluate_direction, exhaustive_search,
                               hypothesis_score, pivot_translate, sentence_stats,
                               translate_sentence, zero_shot_matrix)
from modnet.models import assemble
from modnet.transformer import TransformerConfig

TOY = TransformerConfig(d_model=8, ff_dim=16, num_heads=2, num_encoder_layers=1,
                        num_decoder_layers=1, dropout=0.0, max_positions=16)


def _toy_model(seed, vocab_tokens=1, directions=(Direction("s", "t"),)):
    """Random-parameter model over a tiny vocabulary (4 reserved + extras)."""
    langs = ["s", "t"]
    extra = [f"w{i}" for i in range(vocab_tokens)]
    vocabs = dk.build_vocab({l: [" ".join(extra)] for l in langs}, "per_language",
                            4 + vocab_tokens)
    return assemble("single", langs, TOY, vocabs, list(directions), seed=seed)


# -- BLEU ------------------------------------------------------------------------

def test_bleu_identical_is_exactly_100():
    refs = [["a", "b", "c", "d"], ["x", "y", "z", "w", "q"]]
    assert corpus_bleu(refs, refs) == 100.0


def test_bleu_clipping_zero_bigram_precision():
    # "the the the the" vs "the cat": p1 clipped to 1/4, p2 = 0 -> BLEU 0
    assert corpus_bleu([["the", "the", "the", "the"]], [["the", "cat"]]) == 0.0
    stats = sentence_stats(["the", "the", "the", "the"], ["the", "cat"])
    assert stats.matches[0] == 1 and stats.totals[0] == 4
    assert stats.matches[1] == 0 and stats.totals[1] == 3


def test_bleu_brevity_penalty_hand_case():
    # p_n all 1, BP = exp(1 - 5/4) -> 77.88
    bleu = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
    assert bleu == pytest.approx(77.88, abs=1e-2)
    assert bleu == pytest.approx(100.0 * math.exp(1.0 - 5.0 / 4.0), abs=1e-9)


def test_bleu_corpus_stats_not_mean_of_sentences():
    # crafted two-sentence case where summed stats and averaged sentence
    # scores disagree: corpus must be 100 * exp(-1/3), not 50
    hyps = [["a", "b", "c", "d"], ["a", "b"]]
    refs = [["a", "b", "c", "d"], ["a", "b", "x", "y"]]
    corpus = corpus_bleu(hyps, refs)
    assert corpus == pytest.approx(100.0 * math.exp(-1.0 / 3.0), abs=1e-9)
    sentence_mean = np.mean([corpus_bleu([h], [r]) for h, r in zip(hyps, refs)])
    assert sentence_mean == pytest.approx(50.0, abs=1e-9)
    assert corpus != pytest.approx(sentence_mean, abs=1.0)


def test_bleu_contract_errors():
    with pytest.raises(ContractViolation):
        corpus_bleu([["a"]], [["a"], ["b"]])
    with pytest.raises(ContractViolation):
        corpus_bleu([["a"]], [[]])


def test_bleu_stats_are_additive():
    a = sentence_stats(["a", "b", "c", "d"], ["a", "b", "c", "d"])
    b = sentence_stats(["x", "y"], ["x", "z"])
    total = BleuStats()
    total += a
    total += b
    assert total.hyp_len == 6 and total.ref_len == 6
    assert total.matches[0] == 4 + 1


# -- beam search -------------------------------------------------------------------

def test_beam_one_equals_greedy_rollout():
    model = _toy_model(seed=3, vocab_tokens=3)
    d = Direction("s", "t")
    from modnet.models import route
    routed = route(model, d)
    source = [4, 5, 6]
    cfg = DecodeConfig(beam_size=1, length_penalty=0.6, max_len=5)
    hyp = beam_search(model, d, source, cfg)

    src = np.array([[4, 5, 6, EOS_ID]])
    mask = src != 0
    enc = tf.encode(routed.encoder, routed.enc_embedding, src, mask)
    prefix = [BOS_ID]
    greedy = []
    for _ in range(5):
        logits = tf.decode_step(routed.decoder, routed.dec_embedding, enc,
                                np.array([prefix]), mask)[0]
        tok = int(np.argmax(logits))
        greedy.append(tok)
        prefix.append(tok)
        if tok == EOS_ID:
            break
    if greedy[-1] != EOS_ID:
        greedy.append(EOS_ID)
    assert list(hyp.tokens) == greedy


def test_alpha_zero_score_is_raw_log_prob():
    h = Hypothesis(tokens=(5, 6, 2), log_prob=-3.21, steps=3)
    assert hypothesis_score(h, DecodeConfig(beam_size=1, length_penalty=0.0)) == -3.21


def test_gnmt_penalty_variant():
    h = Hypothesis(tokens=(5, 6, 2), log_prob=-3.0, steps=3)
    cfg = DecodeConfig(beam_size=1, length_penalty=0.6, penalty_kind="gnmt")
    assert hypothesis_score(h, cfg) == pytest.approx(-3.0 / (((5 + 3) / 6) ** 0.6))


def test_empty_source_rejected():
    model = _toy_model(seed=1)
    with pytest.raises(ContractViolation):
        beam_search(model, Direction("s", "t"), [], DecodeConfig())


@pytest.mark.parametrize("seed", range(6))
def test_beam_125_matches_exhaustive_on_toy_models(seed):
    """vocab-5 models, max length 3: a 125-beam equals brute-force argmax."""
    model = _toy_model(seed=seed, vocab_tokens=1)  # vocab = pad bos eos unk w0
    d = Direction("s", "t")
    cfg = DecodeConfig(beam_size=125, length_penalty=0.6, max_len=3)
    got = beam_search(model, d, [4], cfg)
    want = exhaustive_search(model, d, [4], cfg)
    assert got.tokens == want.tokens
    assert got.log_prob == pytest.approx(want.log_prob, abs=1e-12)


def test_beam_score_at_least_greedy():
    for seed in range(4):
        model = _toy_model(seed=seed + 50, vocab_tokens=4)
        d = Direction("s", "t")
        cfg4 = DecodeConfig(beam_size=4, length_penalty=0.6, max_len=6)
        cfg1 = DecodeConfig(beam_size=1, length_penalty=0.6, max_len=6)
        best = beam_search(model, d, [4, 5], cfg4)
        greedy = beam_search(model, d, [4, 5], cfg1)
        assert hypothesis_score(best, cfg4) >= hypothesis_score(greedy, cfg4) - 1e-12


def test_forced_eos_flagged_at_length_limit():
    model = _toy_model(seed=2, vocab_tokens=2)
    cfg = DecodeConfig(beam_size=2, length_penalty=0.6, max_len=2)
    hyp = beam_search(model, Direction("s", "t"), [4], cfg)
    assert hyp.tokens[-1] == EOS_ID
    # either it finished on its own or it was forcibly closed and flagged
    if len(hyp.tokens) == 3:
        assert hyp.forced_eos


# -- trained-model decoding (session fixtures) ----------------------------------------

def test_trained_pair_decodes_well(pair_world, pair_model):
    d = Direction("aa", "bb")
    entry = evaluate_direction(pair_model, d, pair_world.test_pairs[pair_key("aa", "bb")],
                               DecodeConfig(beam_size=4), True, limit=40)
    assert entry.bleu > 90.0
    assert entry.accuracy > 0.97
    assert entry.n_sentences == 40


def test_decoding_determinism(pair_world, pair_model):
    d = Direction("aa", "bb")
    sent = pair_world.test_corpus.column("aa")[0]
    cfg = DecodeConfig(beam_size=4)
    a = translate_sentence(pair_model, d, sent, cfg)
    b = translate_sentence(pair_model, d, sent, cfg)
    assert a == b


def test_pivot_round_trip_through_trained_legs(pair_world, pair_model):
    cfg = DecodeConfig(beam_size=4)
    sources = pair_world.test_corpus.column("aa")[:25]
    exact = 0
    for sent in sources:
        out = pivot_translate(pair_model, Direction("aa", "bb"),
                              pair_model, Direction("bb", "aa"), sent, cfg)
        if out == sent.split():
            exact += 1
    assert exact >= 0.8 * len(sources)


def test_pivot_legs_must_chain():
    model = _toy_model(seed=0)
    with pytest.raises(ConfigurationError):
        pivot_translate(model, Direction("s", "t"), model, Direction("s", "t"),
                        "w0", DecodeConfig())


def test_pivot_empty_leg_is_explicit_error():
    model = _toy_model(seed=4, vocab_tokens=2,
                       directions=(Direction("s", "t"), Direction("t", "s")))
    # zeroed embeddings give uniform logits; the best-scoring hypothesis is
    # the immediate EOS, so leg A deterministically produces an empty output
    for entry in model.registry.values():
        entry.src_embedding.weight.data[:] = 0.0
        entry.tgt_embedding.weight.data[:] = 0.0
    with pytest.raises(PivotError):
        pivot_translate(model, Direction("s", "t"), model, Direction("t", "s"),
                        "w0 w1", DecodeConfig(beam_size=2))


# -- matrices -----------------------------------------------------------------------

def test_zero_shot_matrix_marks_supervision(pair_world, pair_model):
    dirs = [Direction("aa", "bb"), Direction("bb", "aa")]
    matrix = zero_shot_matrix(pair_model, dirs, pair_world.test_pairs,
                              DecodeConfig(beam_size=2), supervised=[dirs[0]], limit=10)
    assert matrix.entries[dirs[0]].supervised
    assert not matrix.entries[dirs[1]].supervised
    assert set(matrix.entries) == set(dirs)


def test_zero_shot_matrix_empty():
    model = _toy_model(seed=0)
    matrix = zero_shot_matrix(model, [], {}, DecodeConfig())
    assert matrix.entries == {}
    assert matrix.average_bleu() == 0.0


def test_matrix_tsv_round_trip(tmp_path, pair_world, pair_model):
    dirs = [Direction("aa", "bb")]
    matrix = zero_shot_matrix(pair_model, dirs, pair_world.test_pairs,
                              DecodeConfig(beam_size=2), supervised=dirs, limit=5)
    matrix.save_tsv(tmp_path / "m.tsv")
    from modnet.evaluation import TranslationMatrix
    loaded = TranslationMatrix.load_tsv(tmp_path / "m.tsv")
    d = dirs[0]
    assert loaded.entries[d].bleu == pytest.approx(matrix.entries[d].bleu, abs=1e-4)
    assert loaded.entries[d].supervised
    text = matrix.render_text()
    assert "aa-bb" in text and "avg" in text


def test_thread_env_parallel_matrix_matches_serial(pair_world, pair_model, monkeypatch):
    dirs = [Direction("aa", "bb"), Direction("bb", "aa")]
    cfg = DecodeConfig(beam_size=2)
    serial = zero_shot_matrix(pair_model, dirs, pair_world.test_pairs, cfg,
                              supervised=dirs, limit=8)
    monkeypatch.setenv("MODNET_THREADS", "2")
    parallel = zero_shot_matrix(pair_model, dirs, pair_world.test_pairs, cfg,
                                supervised=dirs, limit=8)
    for d in dirs:
        assert serial.entries[d].bleu == parallel.entries[d].bleu
        assert serial.entries[d].accuracy == parallel.entries[d].accuracy
