"""Probes of the encoder-output space.

Language invariance is measured two ways: mean cosine similarity of pooled
encoder outputs over aligned sentence pairs (against a misaligned control so
desk-scale numbers are interpretable), and the BLEU of L-to-L decoding, which
is never trained and therefore shows how much source information the shared
space preserves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import transformer as tf
from .data import EOS_ID, PAD_ID, Bitext, Direction, MultiParallelCorpus, _hash_seed, pair_key
from .errors import ConfigurationError, ContractViolation
from .evaluation import DecodeConfig, MatrixEntry, evaluate_direction
from .models import ModelKind, MultiModel, route
from .data import _pad_matrix


@dataclass
class PooledRepr:
    language: str
    sentence_id: int
    vector: np.ndarray


@dataclass
class SimilarityReport:
    per_pair: dict[tuple[str, str], float]
    pair_count: int
    control_mean: float
    excluded: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_pair.values()))) if self.per_pair else 0.0

    def records(self, seed: int) -> list[dict]:
        out = [{"type": "probe_similarity", "pair": f"{a}-{b}", "cosine": v,
                "pairs": self.pair_count, "seed": seed}
               for (a, b), v in sorted(self.per_pair.items())]
        out.append({"type": "probe_similarity", "pair": "control",
                    "cosine": self.control_mean, "pairs": self.pair_count, "seed": seed})
        return out


def _encode_pooled(model: MultiModel, language: str, sentences: list[str]) -> np.ndarray:
    """Mean encoder state over non-pad positions, one row per sentence."""
    if model.kind is ModelKind.SINGLE:
        raise ConfigurationError("pooled representations need a language-keyed encoder")
    routed = route(model, Direction(language, language))
    vocab = model.vocab_for(language)
    ids = [list(routed.prepend) + vocab.encode(s.split()) + [EOS_ID] for s in sentences]
    mat = _pad_matrix(ids)
    mask = mat != PAD_ID
    states = tf.encode(routed.encoder, routed.enc_embedding, mat, mask).data
    keep = mask[:, :, None].astype(float)
    return (states * keep).sum(axis=1) / keep.sum(axis=1)


def pooled_repr(model: MultiModel, language: str, sentence: str,
                sentence_id: int = 0) -> PooledRepr:
    vec = _encode_pooled(model, language, [sentence])[0]
    return PooledRepr(language, sentence_id, vec)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroDivisionError("zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def similarity_report(model: MultiModel, corpus: MultiParallelCorpus,
                      n_pairs: int, seed: int,
                      languages: list[str] | None = None) -> SimilarityReport:
    """Mean cosine over aligned pairs per language pair, plus a control where
    the alignment is replaced by a seeded derangement of the same sentences."""
    languages = sorted(languages or [l for l in corpus.languages if l in model.languages])
    if len(languages) < 2:
        raise ConfigurationError("similarity report needs at least two languages")
    rng = np.random.default_rng(_hash_seed(seed, "probe"))
    order = rng.permutation(len(corpus))
    take = order[:min(n_pairs, len(corpus))]
    if len(take) == 0:
        raise ContractViolation("similarity report needs at least one sentence pair")

    pooled = {lang: _encode_pooled(model, lang, [corpus.column(lang)[i] for i in take])
              for lang in languages}
    # misaligned control: one seeded cycle over the sampled rows (a derangement)
    shuffled = rng.permutation(len(take))
    control_of = np.empty(len(take), dtype=int)
    for i in range(len(take)):
        control_of[shuffled[i]] = shuffled[(i + 1) % len(take)]

    per_pair: dict[tuple[str, str], float] = {}
    control_vals: list[float] = []
    excluded = 0
    for i, a in enumerate(languages):
        for b in languages[i + 1:]:
            vals = []
            for row in range(len(take)):
                try:
                    vals.append(cosine(pooled[a][row], pooled[b][row]))
                    control_vals.append(cosine(pooled[a][row], pooled[b][control_of[row]]))
                except ZeroDivisionError:
                    excluded += 1
            per_pair[(a, b)] = float(np.mean(vals)) if vals else 0.0
    control_mean = float(np.mean(control_vals)) if control_vals else 0.0
    return SimilarityReport(per_pair, int(len(take)), control_mean, excluded)


def mono_direction_eval(model: MultiModel, language: str, sentences: list[str],
                        cfg: DecodeConfig, limit: int | None = None) -> MatrixEntry:
    """BLEU of L-to-L decoding scored against the source itself."""
    rows = [(s, s) for s in sentences]
    bitext = Bitext(pair_key(language, language), rows, list(range(len(rows))))
    return evaluate_direction(model, Direction(language, language), bitext, cfg,
                              supervised=False, limit=limit)
