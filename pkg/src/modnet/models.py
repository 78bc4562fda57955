"""Assembly and routing for the three model families.

* ``single``  - one dedicated encoder/decoder pair per direction, nothing shared.
* ``one_to_one`` - one shared encoder/decoder over a joint vocabulary; the
  output language is selected by a reserved token prepended to the source.
* ``m2`` - per-language encoder, decoder and embedding; a direction routes the
  source language's encoder into the target language's decoder.  No parameters
  cross language boundaries, so any (src, tgt) over known languages is
  routable, including directions never trained.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import PAD_ID, Direction, Vocabulary, _hash_seed
from .errors import ConfigurationError, ContractViolation, RoutingError
from .transformer import DecoderStack, EmbeddingTable, EncoderStack, TransformerConfig

SHARED_KEY = "shared"


class ModelKind(str, enum.Enum):
    SINGLE = "single"
    ONE_TO_ONE = "one_to_one"
    M2 = "m2"


@dataclass
class LanguageModules:
    """Registry entry: one language's (or the shared) encoder/decoder/embedding."""

    encoder: EncoderStack
    decoder: DecoderStack
    embedding: EmbeddingTable
    frozen: bool = False


@dataclass
class DirectionModules:
    """Registry entry for a dedicated single-direction model."""

    encoder: EncoderStack
    decoder: DecoderStack
    src_embedding: EmbeddingTable
    tgt_embedding: EmbeddingTable
    frozen: bool = False


@dataclass
class RoutedDirection:
    """Everything needed to run one direction end to end."""

    direction: Direction
    encoder: EncoderStack
    enc_embedding: EmbeddingTable
    decoder: DecoderStack
    dec_embedding: EmbeddingTable
    prepend: tuple[int, ...] = ()


class MultiModel:
    def __init__(self, kind: ModelKind, config: TransformerConfig,
                 languages: list[str], vocabs: dict[str, Vocabulary],
                 directions: list[Direction], seed: int):
        self.kind = kind
        self.config = config
        self.languages = list(languages)
        self.vocabs = vocabs
        self.directions = list(directions)
        self.seed = seed
        self.registry: dict[str, LanguageModules | DirectionModules] = {}

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for key in sorted(self.registry):
            entry = self.registry[key]
            prefix = f"{self.kind.value}.{key}"
            out.update(entry.encoder.named_parameters(f"{prefix}.encoder"))
            out.update(entry.decoder.named_parameters(f"{prefix}.decoder"))
            if isinstance(entry, DirectionModules):
                out.update(entry.src_embedding.named_parameters(f"{prefix}.src_embedding"))
                out.update(entry.tgt_embedding.named_parameters(f"{prefix}.tgt_embedding"))
            else:
                out.update(entry.embedding.named_parameters(f"{prefix}.embedding"))
        return out

    def entry_parameters(self, key: str) -> dict[str, Tensor]:
        full = self.named_parameters()
        prefix = f"{self.kind.value}.{key}."
        return {n: p for n, p in full.items() if n.startswith(prefix)}

    def vocab_for(self, language: str) -> Vocabulary:
        if self.kind is ModelKind.ONE_TO_ONE:
            return self.vocabs["joint"]
        if language not in self.vocabs:
            raise ConfigurationError(f"no vocabulary for language '{language}'")
        return self.vocabs[language]


def trainable_directions(languages: list[str], scheme: str,
                         center: str | None = None) -> list[Direction]:
    """Direction sets: ``m2m`` is all ordered pairs, ``jm2m`` only the pairs
    with the center language on either side."""
    langs = sorted(languages)
    if scheme == "m2m":
        return [Direction(a, b) for a, b in itertools.permutations(langs, 2)]
    if scheme == "jm2m":
        if center not in langs:
            raise ConfigurationError(f"jm2m center '{center}' not among languages")
        return [Direction(a, b) for a, b in itertools.permutations(langs, 2)
                if center in (a, b)]
    raise ConfigurationError(f"unknown direction scheme '{scheme}'")


def _stack_pair(config: TransformerConfig, seed: int, *names: str) -> tuple[EncoderStack, DecoderStack]:
    enc = EncoderStack(config, np.random.default_rng(_hash_seed(seed, "init", *names, "encoder")))
    dec = DecoderStack(config, np.random.default_rng(_hash_seed(seed, "init", *names, "decoder")))
    return enc, dec


def _embedding(config: TransformerConfig, vocab: Vocabulary, seed: int, *names: str) -> EmbeddingTable:
    rng = np.random.default_rng(_hash_seed(seed, "init", *names, "embedding"))
    return EmbeddingTable(len(vocab), config.d_model, PAD_ID, rng)


def assemble(kind: ModelKind | str, languages: list[str], config: TransformerConfig,
             vocabs: dict[str, Vocabulary], directions: list[Direction] | None = None,
             seed: int = 0) -> MultiModel:
    """Build a model of the requested kind with deterministic initialization.

    ``vocabs`` must match the kind: a single ``joint`` vocabulary for the
    fully-shared model, one per language otherwise.  For the single-model
    family ``directions`` fixes which dedicated pairs exist (defaults to all
    ordered pairs).
    """
    kind = ModelKind(kind)
    languages = sorted(languages)
    if len(languages) < 2:
        raise ConfigurationError("assemble requires at least two languages")
    if directions is None:
        directions = [Direction(a, b) for a, b in itertools.permutations(languages, 2)]

    if kind is ModelKind.ONE_TO_ONE:
        if set(vocabs) != {"joint"}:
            raise ConfigurationError("the fully-shared model needs exactly one joint vocabulary")
        for lang in languages:
            vocabs["joint"].target_token_id(lang)  # raises if missing
    else:
        missing = [lang for lang in languages if lang not in vocabs]
        if missing:
            raise ConfigurationError(f"missing per-language vocabularies: {missing}")

    model = MultiModel(kind, config, languages, vocabs, directions, seed)

    if kind is ModelKind.M2:
        for lang in languages:
            enc, dec = _stack_pair(config, seed, "lang", lang)
            emb = _embedding(config, vocabs[lang], seed, "lang", lang)
            model.registry[lang] = LanguageModules(enc, dec, emb)
    elif kind is ModelKind.ONE_TO_ONE:
        enc, dec = _stack_pair(config, seed, SHARED_KEY)
        emb = _embedding(config, vocabs["joint"], seed, SHARED_KEY)
        model.registry[SHARED_KEY] = LanguageModules(enc, dec, emb)
    else:
        for d in directions:
            key = str(d)
            enc, dec = _stack_pair(config, seed, "dir", key)
            model.registry[key] = DirectionModules(
                enc, dec,
                _embedding(config, vocabs[d.src], seed, "dir", key, "src"),
                _embedding(config, vocabs[d.tgt], seed, "dir", key, "tgt"))
    return model


def route(model: MultiModel, direction: Direction) -> RoutedDirection:
    """Resolve which modules serve a direction, plus its source preprocessing."""
    if model.kind is ModelKind.M2:
        for lang in (direction.src, direction.tgt):
            if lang not in model.registry:
                raise RoutingError(f"language '{lang}' not in the module registry")
        src_entry = model.registry[direction.src]
        tgt_entry = model.registry[direction.tgt]
        return RoutedDirection(direction, src_entry.encoder, src_entry.embedding,
                               tgt_entry.decoder, tgt_entry.embedding)
    if model.kind is ModelKind.ONE_TO_ONE:
        for lang in (direction.src, direction.tgt):
            if lang not in model.languages:
                raise RoutingError(f"language '{lang}' not served by this model")
        entry = model.registry[SHARED_KEY]
        prepend = (model.vocabs["joint"].target_token_id(direction.tgt),)
        return RoutedDirection(direction, entry.encoder, entry.embedding,
                               entry.decoder, entry.embedding, prepend)
    key = str(direction)
    if key not in model.registry:
        raise RoutingError(f"no dedicated model for direction {direction}")
    entry = model.registry[key]
    return RoutedDirection(direction, entry.encoder, entry.src_embedding,
                           entry.decoder, entry.tgt_embedding)


def _set_frozen(model: MultiModel, key: str, frozen: bool) -> None:
    entry = model.registry[key]
    entry.frozen = frozen
    for tensor in model.entry_parameters(key).values():
        tensor.requires_grad = not frozen


def freeze(model: MultiModel, languages: list[str]) -> None:
    """Mark languages' modules frozen; the optimizer skips them entirely."""
    for lang in languages:
        if lang not in model.registry:
            raise ConfigurationError(f"cannot freeze unknown language '{lang}'")
        _set_frozen(model, lang, True)


def unfreeze(model: MultiModel, languages: list[str]) -> None:
    for lang in languages:
        if lang not in model.registry:
            raise ConfigurationError(f"cannot unfreeze unknown language '{lang}'")
        _set_frozen(model, lang, False)


def add_language(model: MultiModel, new_lang: str, vocab: Vocabulary,
                 init: str = "random", donor: str | None = None) -> None:
    """Extend a modular model with a new language's encoder/decoder/embedding.

    Donor initialization copies every non-embedding parameter from the donor
    language's modules; embeddings are never shared or copied across
    vocabularies, so the new embedding always starts random.
    """
    if model.kind is not ModelKind.M2:
        raise ContractViolation("add_language only applies to the modular model")
    if new_lang in model.registry:
        raise ConfigurationError(f"language '{new_lang}' already present")
    if init not in ("random", "donor"):
        raise ConfigurationError(f"unknown init mode '{init}'")

    enc, dec = _stack_pair(model.config, model.seed, "lang", new_lang)
    emb = _embedding(model.config, vocab, model.seed, "lang", new_lang)
    if init == "donor":
        if donor is None or donor not in model.registry:
            raise ConfigurationError(f"donor language '{donor}' not in the registry")
        src = model.registry[donor]
        for giver, taker in ((src.encoder, enc), (src.decoder, dec)):
            give = giver.named_parameters("x")
            take = taker.named_parameters("x")
            for name, tensor in take.items():
                tensor.data = give[name].data.copy()
    model.registry[new_lang] = LanguageModules(enc, dec, emb)
    model.languages = sorted(model.languages + [new_lang])
    model.vocabs[new_lang] = vocab
