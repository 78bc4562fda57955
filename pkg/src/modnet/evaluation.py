"""Decoding and scoring: beam search, corpus BLEU, pivot translation and
full direction matrices (supervised and zero-shot).

BLEU is computed from summed corpus statistics (clipped n-gram matches for
n=1..4 plus a brevity penalty), never as a mean of sentence scores, and uses
no smoothing: any zero corpus precision gives 0.
"""

from __future__ import annotations

import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import transformer as tf
from .autodiff import Tensor
from .data import BOS_ID, EOS_ID, PAD_ID, Bitext, Direction, pair_key
from .errors import ConfigurationError, ContractViolation, PivotError
from .models import MultiModel, route
from .training import batch_accuracy, direction_batches

THREADS_ENV = "MODNET_THREADS"


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    length_penalty: float = 0.6
    max_len: int = 0                  # 0 = 2 * source length + 8
    penalty_kind: str = "per_length"  # or "gnmt"

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigurationError("beam_size must be >= 1")
        if self.length_penalty < 0:
            raise ConfigurationError("length penalty must be >= 0")
        if self.penalty_kind not in ("per_length", "gnmt"):
            raise ConfigurationError(f"unknown length penalty kind '{self.penalty_kind}'")


@dataclass(frozen=True)
class Hypothesis:
    """Generated ids including the final EOS (BOS excluded)."""

    tokens: tuple[int, ...]
    log_prob: float
    steps: int
    forced_eos: bool = False


def hypothesis_score(h: Hypothesis, cfg: DecodeConfig) -> float:
    length = len(h.tokens)
    if cfg.penalty_kind == "gnmt":
        return h.log_prob / (((5.0 + length) / 6.0) ** cfg.length_penalty)
    return h.log_prob / (length ** cfg.length_penalty)


def _rank_key(h: Hypothesis, cfg: DecodeConfig):
    return (-hypothesis_score(h, cfg), h.steps, h.tokens)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def beam_search(model: MultiModel, direction: Direction, source_ids: Sequence[int],
                cfg: DecodeConfig) -> Hypothesis:
    """Best hypothesis under length-normalized sum of log-probabilities.

    Live prefixes are ranked by raw cumulative log-probability; all finished
    hypotheses are kept and the winner is chosen by normalized score with
    ties broken by earlier completion, then lexicographic ids.  Prefixes
    still alive at the length limit are closed with a forced EOS and flagged.
    The pure greedy rollout rides along as one extra tracked row, so the
    result never scores below greedy.
    """
    if len(source_ids) == 0:
        raise ContractViolation("beam_search requires a nonempty source")
    finished = _beam_candidates(model, direction, source_ids, cfg)
    return min(finished, key=lambda h: _rank_key(h, cfg))


def _beam_candidates(model: MultiModel, direction: Direction,
                     source_ids: Sequence[int], cfg: DecodeConfig) -> list[Hypothesis]:
    routed = route(model, direction)
    src = np.array([list(routed.prepend) + list(source_ids) + [EOS_ID]], dtype=np.int64)
    src_mask = src != PAD_ID
    enc = tf.encode(routed.encoder, routed.enc_embedding, src, src_mask)
    max_len = cfg.max_len or (2 * len(source_ids) + 8)
    # the decoder prefix carries BOS plus the generated tokens
    max_len = min(max_len, routed.decoder.cfg.max_positions - 1)

    live_prefix = [(BOS_ID,)]
    live_score = [0.0]
    greedy_prefix: tuple[int, ...] | None = (BOS_ID,)  # None once finished/merged
    greedy_score = 0.0
    finished: list[Hypothesis] = []
    for step in range(1, max_len + 1):
        rows = list(live_prefix)
        greedy_row = None
        if greedy_prefix is not None:
            if greedy_prefix in live_prefix:
                greedy_row = live_prefix.index(greedy_prefix)
            else:
                greedy_row = len(rows)
                rows.append(greedy_prefix)
        k = len(rows)
        prefix_mat = np.array(rows, dtype=np.int64)
        enc_k = Tensor(np.repeat(enc.data, k, axis=0))
        mask_k = np.repeat(src_mask, k, axis=0)
        logp = _log_softmax_rows(
            tf.decode_step(routed.decoder, routed.dec_embedding, enc_k, prefix_mat, mask_k))
        vocab = logp.shape[1]

        if greedy_row is not None:
            tok = int(np.argmax(logp[greedy_row]))
            greedy_score += logp[greedy_row, tok]
            if tok == EOS_ID:
                finished.append(Hypothesis(greedy_prefix[1:] + (EOS_ID,), greedy_score, step))
                greedy_prefix = None
            elif step == max_len:
                pass  # closed together with the survivors below
            else:
                greedy_prefix = greedy_prefix + (tok,)

        candidates = []  # (cum_logprob, prefix_index, token)
        for i in range(len(live_prefix)):
            for tok in range(vocab):
                candidates.append((live_score[i] + logp[i, tok], i, tok))
        for score, i, _ in (c for c in candidates if c[2] == EOS_ID):
            finished.append(Hypothesis(live_prefix[i][1:] + (EOS_ID,), score, step))
        rest = [c for c in candidates if c[2] != EOS_ID]
        rest.sort(key=lambda c: (-c[0], c[1], c[2]))
        rest = rest[:cfg.beam_size]
        if step == max_len:
            to_close = [(live_prefix[i] + (tok,), score) for score, i, tok in rest]
            if greedy_prefix is not None and greedy_row is not None:
                gtok = int(np.argmax(logp[greedy_row]))
                gpref = greedy_prefix + (gtok,)
                if gpref not in [p for p, _ in to_close]:
                    to_close.append((gpref, greedy_score))
            if to_close:
                prefix_mat = np.array([p for p, _ in to_close], dtype=np.int64)
                enc_k = Tensor(np.repeat(enc.data, len(to_close), axis=0))
                mask_k = np.repeat(src_mask, len(to_close), axis=0)
                logp = _log_softmax_rows(tf.decode_step(
                    routed.decoder, routed.dec_embedding, enc_k, prefix_mat, mask_k))
                for row, (pref, score) in enumerate(to_close):
                    finished.append(Hypothesis(pref[1:] + (EOS_ID,),
                                               score + logp[row, EOS_ID],
                                               step + 1, forced_eos=True))
            break
        if not rest:
            break
        live_prefix = [live_prefix[i] + (tok,) for _, i, tok in rest]
        live_score = [score for score, _, _ in rest]
    # identical token sequences may enter twice (greedy + beam); keep the best
    unique: dict[tuple[int, ...], Hypothesis] = {}
    for h in finished:
        cur = unique.get(h.tokens)
        if cur is None or h.log_prob > cur.log_prob:
            unique[h.tokens] = h
    return list(unique.values())


def exhaustive_search(model: MultiModel, direction: Direction, source_ids: Sequence[int],
                      cfg: DecodeConfig) -> Hypothesis:
    """Brute-force argmax over the same hypothesis space as beam_search.

    Only feasible for tiny vocabularies and lengths; used as decoding oracle.
    """
    return beam_search(model, direction, source_ids,
                       DecodeConfig(10 ** 9, cfg.length_penalty, cfg.max_len,
                                    cfg.penalty_kind))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

MAX_NGRAM = 4


@dataclass
class BleuStats:
    """Additive corpus statistics: clipped matches/totals for n=1..4."""

    matches: list[int] = field(default_factory=lambda: [0] * MAX_NGRAM)
    totals: list[int] = field(default_factory=lambda: [0] * MAX_NGRAM)
    hyp_len: int = 0
    ref_len: int = 0

    def __iadd__(self, other: "BleuStats") -> "BleuStats":
        for n in range(MAX_NGRAM):
            self.matches[n] += other.matches[n]
            self.totals[n] += other.totals[n]
        self.hyp_len += other.hyp_len
        self.ref_len += other.ref_len
        return self


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hypothesis: Sequence, reference: Sequence) -> BleuStats:
    stats = BleuStats(hyp_len=len(hypothesis), ref_len=len(reference))
    for n in range(1, MAX_NGRAM + 1):
        hyp_counts = _ngrams(hypothesis, n)
        ref_counts = _ngrams(reference, n)
        stats.totals[n - 1] = max(len(hypothesis) - n + 1, 0)
        stats.matches[n - 1] = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    return stats


def bleu_from_stats(stats: BleuStats) -> float:
    if stats.hyp_len == 0:
        return 0.0
    log_precision = 0.0
    for n in range(MAX_NGRAM):
        if stats.totals[n] == 0 or stats.matches[n] == 0:
            return 0.0
        log_precision += math.log(stats.matches[n] / stats.totals[n])
    brevity = min(1.0, math.exp(1.0 - stats.ref_len / stats.hyp_len))
    return 100.0 * brevity * math.exp(log_precision / MAX_NGRAM)


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus BLEU in [0, 100] over token sequences (one reference each)."""
    if len(hypotheses) != len(references):
        raise ContractViolation("corpus_bleu needs equal hypothesis/reference counts")
    if not references or any(len(r) == 0 for r in references):
        raise ContractViolation("corpus_bleu requires nonempty references")
    total = BleuStats()
    for hyp, ref in zip(hypotheses, references):
        total += sentence_stats(hyp, ref)
    return bleu_from_stats(total)


# ---------------------------------------------------------------------------
# Direction matrices and pivot translation
# ---------------------------------------------------------------------------

@dataclass
class MatrixEntry:
    bleu: float
    accuracy: float
    n_sentences: int
    supervised: bool


@dataclass
class TranslationMatrix:
    entries: dict[Direction, MatrixEntry] = field(default_factory=dict)

    def average_bleu(self) -> float:
        if not self.entries:
            return 0.0
        return float(np.mean([e.bleu for e in self.entries.values()]))

    def render_text(self) -> str:
        header = f"{'direction':<12}{'bleu':>8}{'accuracy':>10}{'sents':>7}  {'supervised'}"
        lines = [header, "-" * len(header)]
        for d in sorted(self.entries, key=str):
            e = self.entries[d]
            lines.append(f"{str(d):<12}{e.bleu:>8.2f}{e.accuracy:>10.4f}"
                         f"{e.n_sentences:>7}  {'yes' if e.supervised else 'zero-shot'}")
        lines.append("-" * len(header))
        lines.append(f"{'avg':<12}{self.average_bleu():>8.2f}")
        return "\n".join(lines)

    def records(self, seed: int) -> list[dict]:
        return [{"type": "eval", "direction": str(d), "bleu": e.bleu,
                 "accuracy": e.accuracy, "n_sentences": e.n_sentences,
                 "supervised": e.supervised, "seed": seed}
                for d, e in sorted(self.entries.items(), key=lambda kv: str(kv[0]))]

    def save_tsv(self, path: Path) -> None:
        lines = ["direction\tbleu\taccuracy\tn_sentences\tsupervised"]
        for d in sorted(self.entries, key=str):
            e = self.entries[d]
            lines.append(f"{d}\t{e.bleu:.4f}\t{e.accuracy:.6f}\t{e.n_sentences}"
                         f"\t{int(e.supervised)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load_tsv(cls, path: Path) -> "TranslationMatrix":
        out = cls()
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        for line in lines[1:]:
            d, bleu, acc, n, sup = line.split("\t")
            out.entries[Direction.parse(d)] = MatrixEntry(
                float(bleu), float(acc), int(n), bool(int(sup)))
        return out


def translate_sentence(model: MultiModel, direction: Direction, sentence: str,
                       cfg: DecodeConfig) -> list[str]:
    """Token strings for one source sentence (EOS stripped)."""
    src_vocab = model.vocab_for(direction.src)
    tgt_vocab = model.vocab_for(direction.tgt)
    hyp = beam_search(model, direction, src_vocab.encode(sentence.split()), cfg)
    ids = [t for t in hyp.tokens if t != EOS_ID]
    return tgt_vocab.decode(ids)


def evaluate_direction(model: MultiModel, direction: Direction, bitext: Bitext,
                       cfg: DecodeConfig, supervised: bool,
                       limit: int | None = None) -> MatrixEntry:
    pair_rows = bitext.rows[:limit] if limit else bitext.rows
    sub = Bitext(bitext.pair, pair_rows, bitext.row_ids[:len(pair_rows)])
    hyps, refs = [], []
    for src_sent, tgt_sent in sub.oriented(direction):
        hyps.append(translate_sentence(model, direction, src_sent, cfg))
        refs.append(tgt_sent.split())
    bleu = corpus_bleu(hyps, refs)
    batches = direction_batches(model, {sub.pair: sub}, [direction], 4096)
    correct = total = 0
    for batch in batches[direction]:
        c, t = batch_accuracy(route(model, direction), batch)
        correct += c
        total += t
    return MatrixEntry(bleu, correct / max(total, 1), len(pair_rows), supervised)


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def zero_shot_matrix(model: MultiModel, directions: Sequence[Direction],
                     test_bitexts: dict[tuple[str, str], Bitext], cfg: DecodeConfig,
                     supervised: Iterable[Direction] = (),
                     limit: int | None = None) -> TranslationMatrix:
    """BLEU + token accuracy for every requested direction, marking which
    were supervised; directions never trained are evaluated all the same."""
    supervised_set = set(supervised)
    ordered = sorted(directions, key=str)
    matrix = TranslationMatrix()

    def job(d: Direction) -> tuple[Direction, MatrixEntry]:
        bitext = test_bitexts[pair_key(d.src, d.tgt)]
        return d, evaluate_direction(model, d, bitext, cfg, d in supervised_set, limit)

    workers = min(_thread_count(), max(len(ordered), 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(job, ordered))
    else:
        results = dict(map(job, ordered))
    for d in ordered:  # deterministic assembly order
        matrix.entries[d] = results[d]
    return matrix


def pivot_translate(model_a: MultiModel, direction_a: Direction,
                    model_b: MultiModel, direction_b: Direction,
                    sentence: str, cfg: DecodeConfig) -> list[str]:
    """Two-leg translation through a pivot language.

    The intermediate hypothesis is re-tokenized with leg B's source
    vocabulary.  An empty intermediate is an explicit error, never a silent
    empty output.
    """
    if direction_a.tgt != direction_b.src:
        raise ConfigurationError(
            f"pivot legs do not chain: {direction_a} then {direction_b}")
    intermediate = translate_sentence(model_a, direction_a, sentence, cfg)
    if not intermediate:
        raise PivotError(f"pivot leg {direction_a} produced an empty hypothesis")
    return translate_sentence(model_b, direction_b, " ".join(intermediate), cfg)
