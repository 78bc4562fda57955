"""Declarative experiment configuration.

Config files are flat-key structured text, one ``key = value`` per line
(``#`` comments allowed).  Keys are dotted; list values are whitespace
separated.  Semantically identical configs produce the same digest regardless
of key order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import Direction, min_parts, pair_key
from .errors import ConfigurationError
from .evaluation import DecodeConfig
from .models import ModelKind, trainable_directions
from .training import TrainSettings
from .transformer import PRESETS, TransformerConfig, preset


def parse_flat(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigurationError(f"config line {lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"config line {lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def canonical_text(mapping: dict[str, str]) -> str:
    return "\n".join(f"{k} = {mapping[k]}" for k in sorted(mapping)) + "\n"


def digest_of(mapping: dict[str, str]) -> str:
    return hashlib.sha256(canonical_text(mapping).encode("utf-8")).hexdigest()


@dataclass
class SizePlanSpec:
    ratio: tuple[int, int, int]
    high_amount: int
    tiers: dict[tuple[str, str], str]


@dataclass
class IncrementSpec:
    base_checkpoint: Path
    language: str
    anchors: list[str]
    aux: list[str]
    init: str = "random"          # "random" or "donor"
    donor: str | None = None


@dataclass
class ExperimentConfig:
    kind: ModelKind
    languages: list[str]
    scheme: str = "m2m"
    center: str | None = None
    preset_name: str = "desk"
    transformer: TransformerConfig = field(default_factory=lambda: preset("desk"))
    sharing: bool = False
    rows: int = 2000
    valid_rows: int = 200
    test_rows: int = 200
    concept_vocab: int = 60
    min_len: int = 4
    max_len: int = 12
    parts: int = 0                # 0 = chromatic index of the language graph
    vocab_size: int = 0           # 0 = concept_vocab + reserved + slack
    joint_vocab_size: int = 0
    reorders: dict[str, str] = field(default_factory=dict)
    size_plan: SizePlanSpec | None = None
    train: TrainSettings = field(default_factory=TrainSettings)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval_limit: int = 100
    eval_zero_shot: bool = False
    probe_pairs: int = 150
    probe_mono: list[str] = field(default_factory=list)
    seed: int = 1
    out: Path | None = None
    deterministic: bool = False
    increment: IncrementSpec | None = None
    raw: dict[str, str] = field(default_factory=dict)

    # -- construction --------------------------------------------------------

    @classmethod
    def from_file(cls, path: Path, **overrides) -> "ExperimentConfig":
        return cls.from_mapping(parse_flat(Path(path).read_text(encoding="utf-8")),
                                **overrides)

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], *, seed: int | None = None,
                     out: str | None = None, preset_name: str | None = None,
                     deterministic: bool = False) -> "ExperimentConfig":
        m = dict(mapping)
        if seed is not None:
            m["seed"] = str(seed)
        if out is not None:
            m["out"] = out
        if preset_name is not None:
            m["model.preset"] = preset_name

        def get(key: str, default: str | None = None) -> str:
            if key in m:
                return m[key]
            if default is None:
                raise ConfigurationError(f"missing required config key '{key}'")
            return default

        def get_int(key: str, default: int) -> int:
            try:
                return int(get(key, str(default)))
            except ValueError as exc:
                raise ConfigurationError(f"config key '{key}' must be an integer") from exc

        def get_float(key: str, default: float) -> float:
            try:
                return float(get(key, str(default)))
            except ValueError as exc:
                raise ConfigurationError(f"config key '{key}' must be a number") from exc

        def get_bool(key: str, default: bool) -> bool:
            raw = get(key, "true" if default else "false").lower()
            if raw in ("true", "yes", "1", "on"):
                return True
            if raw in ("false", "no", "0", "off"):
                return False
            raise ConfigurationError(f"config key '{key}' must be a boolean")

        try:
            kind = ModelKind(get("model.kind"))
        except ValueError as exc:
            raise ConfigurationError(f"unknown model.kind '{m.get('model.kind')}'") from exc

        languages = get("languages").split()
        if len(languages) < 2:
            raise ConfigurationError("need at least two languages")
        if len(set(languages)) != len(languages):
            raise ConfigurationError("languages must be unique")

        scheme = get("scheme", "m2m")
        center = m.get("scheme.center") or None
        if scheme == "jm2m":
            if center is None:
                raise ConfigurationError("jm2m scheme needs scheme.center")
            if center not in languages:
                raise ConfigurationError(f"jm2m center '{center}' not among languages")
        elif scheme != "m2m":
            raise ConfigurationError(f"unknown scheme '{scheme}'")

        preset_key = get("model.preset", "desk")
        if preset_key not in PRESETS:
            raise ConfigurationError(f"unknown model.preset '{preset_key}'")
        overrides = {}
        for fname in ("d_model", "ff_dim", "num_heads", "num_encoder_layers",
                      "num_decoder_layers", "max_positions"):
            if f"model.{fname}" in m:
                overrides[fname] = get_int(f"model.{fname}", 0)
        for fname in ("dropout", "attention_dropout", "activation_dropout"):
            if f"model.{fname}" in m:
                overrides[fname] = get_float(f"model.{fname}", 0.0)
        transformer = preset(preset_key, **overrides)

        sharing_raw = get("data.sharing", "non_sharing")
        if sharing_raw not in ("sharing", "non_sharing"):
            raise ConfigurationError("data.sharing must be 'sharing' or 'non_sharing'")

        parts = get_int("data.parts", 0)
        if parts and parts < min_parts(len(languages)):
            raise ConfigurationError(
                f"{len(languages)} languages need at least {min_parts(len(languages))} parts")

        reorders = {}
        for key, value in m.items():
            if key.startswith("synth.") and key.endswith(".reorder"):
                lang = key[len("synth."):-len(".reorder")]
                reorders[lang] = value

        size_plan = None
        if "size.ratio" in m:
            ratio_parts = get("size.ratio").split()
            if len(ratio_parts) != 3:
                raise ConfigurationError("size.ratio needs three integers (low medium high)")
            ratio = tuple(int(x) for x in ratio_parts)
            tiers = {}
            for item in get("size.tiers").split():
                pair_text, _, tier = item.partition(":")
                d = Direction.parse(pair_text)
                tiers[pair_key(d.src, d.tgt)] = tier
            size_plan = SizePlanSpec(ratio, get_int("size.high", 0), tiers)

        train = TrainSettings(
            module_budget=get_int("train.module_budget", 1536),
            max_epochs=get_int("train.max_epochs", 10),
            patience=get_int("train.patience", 0),
            max_steps=get_int("train.max_steps", 0),
            warmup_steps=get_int("train.warmup_steps", 2000),
            peak_lr=get_float("train.peak_lr", 1e-3),
            schedule=get("schedule.kind", "round_robin"),
            granularity=get_int("schedule.granularity", 8),
        )
        if train.schedule not in ("round_robin", "proportional"):
            raise ConfigurationError(f"unknown schedule.kind '{train.schedule}'")

        decode = DecodeConfig(
            beam_size=get_int("decode.beam", 4),
            length_penalty=get_float("decode.alpha", 0.6),
            max_len=get_int("decode.max_len", 0),
            penalty_kind=get("decode.penalty", "per_length"),
        )

        increment = None
        if "increment.language" in m:
            init_raw = get("increment.init", "random")
            donor = None
            if init_raw.startswith("donor:"):
                donor = init_raw.split(":", 1)[1]
                init_raw = "donor"
            if init_raw not in ("random", "donor"):
                raise ConfigurationError(f"unknown increment.init '{init_raw}'")
            increment = IncrementSpec(
                base_checkpoint=Path(get("increment.base")),
                language=get("increment.language"),
                anchors=get("increment.anchors").split(),
                aux=get("increment.aux", "").split(),
                init=init_raw, donor=donor,
            )
            if increment.language not in languages:
                raise ConfigurationError(
                    "increment.language must be listed in languages")
            for lang in increment.anchors + increment.aux:
                if lang not in languages:
                    raise ConfigurationError(f"increment direction language '{lang}' unknown")
            if increment.donor is not None and increment.donor not in languages:
                raise ConfigurationError(f"donor language '{increment.donor}' unknown")

        cfg = cls(
            kind=kind, languages=languages, scheme=scheme, center=center,
            preset_name=preset_key, transformer=transformer,
            sharing=sharing_raw == "sharing",
            rows=get_int("data.rows", 2000),
            valid_rows=get_int("data.valid_rows", 200),
            test_rows=get_int("data.test_rows", 200),
            concept_vocab=get_int("data.concept_vocab", 60),
            min_len=get_int("data.min_len", 4),
            max_len=get_int("data.max_len", 12),
            parts=parts,
            vocab_size=get_int("data.vocab_size", 0),
            joint_vocab_size=get_int("data.joint_vocab_size", 0),
            reorders=reorders, size_plan=size_plan, train=train, decode=decode,
            eval_limit=get_int("eval.limit", 100),
            eval_zero_shot=get_bool("eval.zero_shot", False),
            probe_pairs=get_int("probe.pairs", 150),
            probe_mono=get("probe.mono", languages[0]).split(),
            seed=get_int("seed", 1),
            out=Path(m["out"]) if "out" in m else None,
            deterministic=deterministic or get_bool("deterministic", False),
            increment=increment,
            raw=m,
        )
        return cfg

    # -- derived values -------------------------------------------------------

    def directions(self) -> list[Direction]:
        return trainable_directions(self.languages, self.scheme, self.center)

    def num_parts(self) -> int:
        return self.parts or min_parts(len(self.languages))

    def per_language_vocab_size(self) -> int:
        return self.vocab_size or (self.concept_vocab + 8)

    def joint_size(self) -> int:
        return self.joint_vocab_size or (
            len(self.languages) * self.concept_vocab + 8 + len(self.languages))

    def digest(self) -> str:
        return digest_of(self.raw)
