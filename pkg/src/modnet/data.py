"""Multi-parallel corpus handling.

Covers the full data side of an experiment: synthetic permutation languages
(a desk-scale stand-in for a real multi-parallel corpus), the non-sharing /
sharing division of multi-parallel parts across language pairs, unbalanced
size plans, vocabularies with the reserved-id convention, token-budget
batching, and a small greedy BPE for real-text ingestion.

A "pair" is always the sorted unordered language pair; both directions of a
pair draw from the same rows.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


def target_token(language: str) -> str:
    """Reserved token a fully-shared model prepends to select the output language."""
    return f"<2{language}>"


def pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class Direction:
    """Ordered (source, target) language pair."""

    src: str
    tgt: str

    def __str__(self) -> str:
        return f"{self.src}-{self.tgt}"

    @classmethod
    def parse(cls, text: str) -> "Direction":
        src, sep, tgt = text.partition("-")
        if not sep or not src or not tgt:
            raise ConfigurationError(f"cannot parse direction '{text}'")
        return cls(src, tgt)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Bijective token <-> id map with a fixed reserved prefix.

    ids 0..3 are pad/bos/eos/unk; a joint vocabulary additionally reserves one
    target token per language immediately after, in language-list order.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigurationError("vocabulary tokens must be unique")
        if tuple(self.tokens[:4]) != RESERVED_TOKENS:
            raise ConfigurationError("vocabulary must start with the reserved tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def target_token_id(self, language: str) -> int:
        token = target_token(language)
        if token not in self.index:
            raise ConfigurationError(f"vocabulary has no target token for '{language}'")
        return self.index[token]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(corpora: dict[str, Iterable[str]], mode: str, size: int,
                languages: Sequence[str] | None = None) -> dict[str, Vocabulary]:
    """Frequency-ranked vocabularies, ties broken lexicographically.

    ``mode`` is ``per_language`` (one vocabulary per corpus key) or ``joint``
    (a single vocabulary over all corpora, with reserved target tokens for
    ``languages`` placed right after the base reserved ids).
    """
    if mode not in ("per_language", "joint"):
        raise ConfigurationError(f"unknown vocabulary mode '{mode}'")
    if not corpora:
        raise ConfigurationError("build_vocab requires nonempty corpora")

    def ranked(counter: Counter, budget: int) -> list[str]:
        if budget <= 0:
            raise ConfigurationError("vocabulary size leaves no room beyond reserved tokens")
        order = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
        return [tok for tok, _ in order[:budget]]

    if mode == "per_language":
        out = {}
        for lang, sentences in corpora.items():
            counter = Counter(tok for s in sentences for tok in s.split())
            out[lang] = Vocabulary(list(RESERVED_TOKENS) + ranked(counter, size - 4))
        return out

    langs = list(languages if languages is not None else sorted(corpora))
    reserved = list(RESERVED_TOKENS) + [target_token(lang) for lang in langs]
    counter: Counter = Counter()
    for sentences in corpora.values():
        counter.update(tok for s in sentences for tok in s.split())
    return {"joint": Vocabulary(reserved + ranked(counter, size - len(reserved)))}


# ---------------------------------------------------------------------------
# Multi-parallel corpus and synthetic languages
# ---------------------------------------------------------------------------

@dataclass
class MultiParallelCorpus:
    languages: list[str]
    rows: list[tuple[str, ...]]

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.languages):
                raise ContractViolation("every corpus row needs one sentence per language")

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, language: str) -> list[str]:
        i = self.languages.index(language)
        return [row[i] for row in self.rows]

    def save(self, directory: Path, split: str) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for lang in self.languages:
            path = directory / f"{split}.{lang}"
            path.write_text("\n".join(self.column(lang)) + "\n", encoding="utf-8")
            written.append(path)
        return written

    @classmethod
    def load(cls, directory: Path, split: str, languages: Sequence[str]) -> "MultiParallelCorpus":
        cols = []
        for lang in languages:
            path = Path(directory) / f"{split}.{lang}"
            cols.append(path.read_text(encoding="utf-8").splitlines())
        lengths = {len(c) for c in cols}
        if len(lengths) != 1:
            raise ContractViolation("corpus columns have differing row counts")
        return cls(list(languages), list(zip(*cols)))


def _reorder_apply(seq: list, rule: str) -> list:
    if rule == "identity":
        return list(seq)
    if rule == "reverse":
        return list(reversed(seq))
    if rule.startswith("rotate:"):
        k = int(rule.split(":", 1)[1]) % max(len(seq), 1)
        return list(seq[k:]) + list(seq[:k])
    if rule == "swap":
        out = list(seq)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise ConfigurationError(f"unknown reorder rule '{rule}'")


def _reorder_invert(seq: list, rule: str) -> list:
    if rule.startswith("rotate:"):
        k = int(rule.split(":", 1)[1]) % max(len(seq), 1)
        return _reorder_apply(seq, f"rotate:{(-k) % max(len(seq), 1)}")
    # identity, reverse and swap are involutions
    return _reorder_apply(seq, rule)


@dataclass
class SyntheticLanguageSpec:
    """A language defined by a token permutation plus a positional reorder.

    Rendering a concept sentence applies the reorder to positions, then maps
    every concept index through the permutation onto a language-prefixed
    surface token.  Both maps are bijective, so exact reference translations
    exist between any two languages.
    """

    language: str
    permutation: np.ndarray
    reorder: str = "identity"

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ContractViolation("permutation must be a bijection on the concept vocabulary")
        self.permutation = perm
        self._inverse = np.argsort(perm)
        self._width = len(str(max(len(perm) - 1, 1)))
        _reorder_apply([0, 1], self.reorder)  # validate rule name early

    @property
    def concept_count(self) -> int:
        return len(self.permutation)

    def surface(self, index: int) -> str:
        return f"{self.language}{index:0{self._width}d}"

    def surface_tokens(self) -> list[str]:
        return [self.surface(i) for i in range(self.concept_count)]

    def render(self, concepts: Sequence[int]) -> list[str]:
        reordered = _reorder_apply(list(concepts), self.reorder)
        return [self.surface(int(self.permutation[c])) for c in reordered]

    def unrender(self, tokens: Sequence[str]) -> list[int]:
        prefix = len(self.language)
        indices = []
        for tok in tokens:
            if not tok.startswith(self.language):
                raise ContractViolation(f"token '{tok}' does not belong to language '{self.language}'")
            indices.append(int(self._inverse[int(tok[prefix:])]))
        return _reorder_invert(indices, self.reorder)


def concept_token(index: int, concept_vocab: int) -> str:
    width = len(str(max(concept_vocab - 1, 1)))
    return f"c{index:0{width}d}"


DEFAULT_REORDERS = ("identity", "reverse", "rotate:2", "swap", "rotate:3", "rotate:1")


def make_language_specs(languages: Sequence[str], concept_vocab: int, seed: int,
                        reorders: dict[str, str] | None = None,
                        identity_first: bool = True) -> dict[str, SyntheticLanguageSpec]:
    """Deterministic per-language specs; a language's spec depends only on its
    own name (not on which other languages are present), so corpora over
    supersets of languages stay mutually consistent."""
    specs = {}
    reorders = reorders or {}
    for i, lang in enumerate(languages):
        rule = reorders.get(lang, DEFAULT_REORDERS[i % len(DEFAULT_REORDERS)])
        if identity_first and i == 0 and lang not in reorders:
            rule = "identity"
        if identity_first and i == 0:
            perm = np.arange(concept_vocab)
        else:
            rng = np.random.default_rng(_hash_seed(seed, "lang", lang))
            perm = rng.permutation(concept_vocab)
        specs[lang] = SyntheticLanguageSpec(lang, perm, rule)
    return specs


def synth_generate(specs: dict[str, SyntheticLanguageSpec], rows: int,
                   length_range: tuple[int, int], concept_vocab: int,
                   seed: int) -> MultiParallelCorpus:
    """Row-aligned corpus: each row is one concept sentence rendered per language."""
    if not specs:
        raise ContractViolation("synth_generate requires at least one language spec")
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ContractViolation("sentence length range must satisfy 1 <= lo <= hi")
    rng = np.random.default_rng(_hash_seed(seed, "rows"))
    languages = list(specs)
    out_rows = []
    for _ in range(rows):
        n = int(rng.integers(lo, hi + 1))
        concepts = rng.integers(0, concept_vocab, size=n).tolist()
        out_rows.append(tuple(" ".join(specs[lang].render(concepts)) for lang in languages))
    return MultiParallelCorpus(languages, out_rows)


def ideal_translate(specs: dict[str, SyntheticLanguageSpec], src: str, tgt: str,
                    sentence: str) -> str:
    """Exact reference translation through the shared concept space."""
    concepts = specs[src].unrender(sentence.split())
    return " ".join(specs[tgt].render(concepts))


def _hash_seed(root: int, *names: object) -> int:
    import hashlib

    digest = hashlib.sha256(("/".join([str(root), *map(str, names)])).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Non-sharing / sharing division
# ---------------------------------------------------------------------------

def min_parts(num_languages: int) -> int:
    """Chromatic index of the complete language graph."""
    return num_languages - 1 if num_languages % 2 == 0 else num_languages


@dataclass
class SplitPlan:
    """Assignment of multi-parallel parts to unordered language pairs.

    Valid when, for every language, the parts of all pairs containing it are
    pairwise distinct (a proper edge coloring of the language graph).
    """

    num_parts: int
    assignment: dict[tuple[str, str], int]

    def part_of(self, a: str, b: str) -> int:
        return self.assignment[pair_key(a, b)]

    def languages(self) -> list[str]:
        return sorted({lang for pair in self.assignment for lang in pair})

    def validate(self) -> None:
        for pair, part in self.assignment.items():
            if not 1 <= part <= self.num_parts:
                raise ContractViolation(f"part {part} for pair {pair} out of range")
        for lang in self.languages():
            parts = [p for pair, p in self.assignment.items() if lang in pair]
            if len(parts) != len(set(parts)):
                raise ContractViolation(
                    f"language '{lang}' has two pairs sharing the same part")

    def save(self, path: Path) -> None:
        lines = [f"{a} {b} {part}" for (a, b), part in sorted(self.assignment.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "SplitPlan":
        assignment = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            a, b, part = line.split()
            assignment[pair_key(a, b)] = int(part)
        return cls(max(assignment.values()), assignment)


def make_split_plan(languages: Sequence[str], num_parts: int) -> SplitPlan:
    """Proper edge coloring of the complete graph via round-robin rotation.

    Languages are processed in sorted order, so the plan is deterministic for
    a given language set.
    """
    langs = sorted(languages)
    n = len(langs)
    needed = min_parts(n)
    if num_parts < needed:
        raise ConfigurationError(
            f"{n} languages need at least {needed} parts, got {num_parts}")
    slots: list[str | None] = list(langs)
    if n % 2 == 1:
        slots.append(None)  # bye slot; its pairs are dropped
    m = len(slots)
    fixed, ring = slots[-1], slots[:-1]
    assignment: dict[tuple[str, str], int] = {}
    for round_i in range(m - 1):
        part = round_i + 1
        pairs = [(fixed, ring[round_i])]
        for k in range(1, m // 2):
            pairs.append((ring[(round_i + k) % (m - 1)], ring[(round_i - k) % (m - 1)]))
        for a, b in pairs:
            if a is None or b is None:
                continue
            assignment[pair_key(a, b)] = part
    plan = SplitPlan(num_parts, assignment)
    plan.validate()
    return plan


@dataclass
class Bitext:
    """Aligned rows for one unordered pair, remembering source row ids."""

    pair: tuple[str, str]
    rows: list[tuple[str, str]]
    row_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def oriented(self, direction: Direction) -> list[tuple[str, str]]:
        if direction.src == self.pair[0] and direction.tgt == self.pair[1]:
            return self.rows
        if direction.src == self.pair[1] and direction.tgt == self.pair[0]:
            return [(b, a) for a, b in self.rows]
        raise ContractViolation(f"direction {direction} does not match pair {self.pair}")


def _part_chunks(n_rows: int, num_parts: int, seed: int | None) -> list[np.ndarray]:
    order = np.arange(n_rows)
    if seed is not None:
        np.random.default_rng(seed).shuffle(order)
    base, extra = divmod(n_rows, num_parts)
    chunks, start = [], 0
    for i in range(num_parts):
        size = base + (1 if i < extra else 0)
        chunks.append(order[start:start + size])
        start += size
    return chunks


def _pairs_to_bitexts(corpus: MultiParallelCorpus, plan: SplitPlan,
                      chunks: list[np.ndarray], sharing: bool) -> dict[tuple[str, str], Bitext]:
    out = {}
    for pair in sorted(plan.assignment):
        a, b = pair
        ia, ib = corpus.languages.index(a), corpus.languages.index(b)
        part = 1 if sharing else plan.part_of(a, b)
        ids = chunks[part - 1]
        rows = [(corpus.rows[i][ia], corpus.rows[i][ib]) for i in ids]
        out[pair] = Bitext(pair, rows, [int(i) for i in ids])
    return out


def split_nonsharing(corpus: MultiParallelCorpus, num_parts: int,
                     seed: int | None = None) -> tuple[SplitPlan, dict[tuple[str, str], Bitext]]:
    """Divide a multi-parallel corpus so pairs sharing a language never share rows."""
    plan = make_split_plan(corpus.languages, num_parts)
    chunks = _part_chunks(len(corpus), num_parts, seed)
    return plan, _pairs_to_bitexts(corpus, plan, chunks, sharing=False)


def split_sharing(corpus: MultiParallelCorpus, num_parts: int,
                  seed: int | None = None) -> tuple[SplitPlan, dict[tuple[str, str], Bitext]]:
    """All pairs draw from part 1; the plan is still computed so that
    validation/test division matches the non-sharing case exactly."""
    plan = make_split_plan(corpus.languages, num_parts)
    chunks = _part_chunks(len(corpus), num_parts, seed)
    return plan, _pairs_to_bitexts(corpus, plan, chunks, sharing=True)


def write_pair_files(directory: Path, part: int, bitext: Bitext) -> list[Path]:
    """fairseq-style pair files: {part}.{a}-{b}.{a} / .{b}, one sentence per line."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    a, b = bitext.pair
    stem = f"{part}.{a}-{b}"
    paths = []
    for lang, col in ((a, 0), (b, 1)):
        path = directory / f"{stem}.{lang}"
        path.write_text("\n".join(r[col] for r in bitext.rows) + "\n", encoding="utf-8")
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Unbalanced size plans
# ---------------------------------------------------------------------------

TIERS = ("low", "medium", "high")


@dataclass
class SizePlan:
    """Per-pair resource tiers with a low:medium:high amount ratio."""

    tiers: dict[tuple[str, str], str]
    ratio: tuple[int, int, int]
    high_amount: int

    def __post_init__(self):
        for pair, tier in self.tiers.items():
            if tier not in TIERS:
                raise ConfigurationError(f"unknown tier '{tier}' for pair {pair}")
        low, medium, high = self.ratio
        if min(low, medium, high) <= 0:
            raise ConfigurationError("size ratios must be positive")
        for r in (low, medium):
            if (self.high_amount * r) % high != 0:
                raise ConfigurationError(
                    f"high amount {self.high_amount} is not divisible for ratio {self.ratio}")

    def amount_for(self, pair: tuple[str, str]) -> int:
        tier = self.tiers[pair_key(*pair)]
        r = self.ratio[TIERS.index(tier)]
        return self.high_amount * r // self.ratio[2]


def apply_size_plan(bitexts: dict[tuple[str, str], Bitext], plan: SizePlan,
                    seed: int) -> dict[tuple[str, str], Bitext]:
    """Deterministic prefix truncation after a seeded shuffle, per pair."""
    out = {}
    for pair, bt in bitexts.items():
        amount = plan.amount_for(pair)
        if amount > len(bt):
            raise ContractViolation(
                f"size plan wants {amount} rows for {pair}, only {len(bt)} available")
        order = np.arange(len(bt))
        np.random.default_rng(_hash_seed(seed, "size", *pair)).shuffle(order)
        keep = order[:amount]
        out[pair] = Bitext(pair, [bt.rows[i] for i in keep], [bt.row_ids[i] for i in keep])
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """One padded direction batch; token_count is non-pad gold target tokens."""

    direction: Direction
    src: np.ndarray   # [B, Ts] ids, source tokens then EOS, padded
    tgt: np.ndarray   # [B, Tt] ids, BOS then tokens then EOS, padded
    token_count: int

    @property
    def size(self) -> int:
        return self.src.shape[0]

    def src_pad_mask(self) -> np.ndarray:
        return self.src != PAD_ID

    def tgt_input(self) -> np.ndarray:
        return self.tgt[:, :-1]

    def tgt_gold(self) -> np.ndarray:
        return self.tgt[:, 1:]


def encode_rows(rows: list[tuple[str, str]], src_vocab: Vocabulary,
                tgt_vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    return [(src_vocab.encode(s.split()), tgt_vocab.encode(t.split())) for s, t in rows]


def batch_by_tokens(rows: list[tuple[list[int], list[int]]], direction: Direction,
                    max_tokens: int, prepend: Sequence[int] = ()) -> list[Batch]:
    """Greedy length-bucketed packing under a target-token budget.

    Every row lands in exactly one batch and no batch exceeds ``max_tokens``
    non-pad gold target tokens (a row costs target length + 1 for EOS).
    """
    if not rows:
        return []
    costs = [len(t) + 1 for _, t in rows]
    worst = max(costs)
    if max_tokens < worst:
        raise ContractViolation(
            f"max_tokens {max_tokens} below longest target sentence cost {worst}")
    order = sorted(range(len(rows)), key=lambda i: (costs[i], len(rows[i][0]), i))
    batches: list[Batch] = []
    bucket: list[int] = []
    bucket_tokens = 0

    def flush():
        nonlocal bucket, bucket_tokens
        if not bucket:
            return
        srcs = [list(prepend) + rows[i][0] + [EOS_ID] for i in bucket]
        tgts = [[BOS_ID] + rows[i][1] + [EOS_ID] for i in bucket]
        batches.append(Batch(direction, _pad_matrix(srcs), _pad_matrix(tgts),
                             sum(costs[i] for i in bucket)))
        bucket, bucket_tokens = [], 0

    for i in order:
        if bucket_tokens + costs[i] > max_tokens:
            flush()
        bucket.append(i)
        bucket_tokens += costs[i]
    flush()
    return batches


def _pad_matrix(rows: list[list[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


# ---------------------------------------------------------------------------
# Simplified byte-pair encoding for real-text ingestion
# ---------------------------------------------------------------------------

WORD_END = "</w>"


def learn_bpe(sentences: Iterable[str], num_merges: int) -> list[tuple[str, str]]:
    """Greedy most-frequent-pair merges over whitespace-pretokenized words."""
    word_freq = Counter()
    for s in sentences:
        word_freq.update(s.split())
    words = {w: tuple(w) + (WORD_END,) for w in word_freq}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for w, freq in word_freq.items():
            sym = words[w]
            for i in range(len(sym) - 1):
                pairs[(sym[i], sym[i + 1])] += freq
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged = best[0] + best[1]
        for w, sym in words.items():
            out, i = [], 0
            while i < len(sym):
                if i < len(sym) - 1 and (sym[i], sym[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            words[w] = tuple(out)
    return merges


def apply_bpe(sentence: str, merges: list[tuple[str, str]]) -> list[str]:
    """Segment a sentence with learned merges; tokens keep their word-end marker."""
    ranks = {m: i for i, m in enumerate(merges)}
    out_tokens: list[str] = []
    for word in sentence.split():
        sym = list(word) + [WORD_END]
        while len(sym) > 1:
            candidates = [(ranks[(a, b)], i) for i, (a, b) in enumerate(zip(sym, sym[1:]))
                          if (a, b) in ranks]
            if not candidates:
                break
            _, i = min(candidates)
            sym[i:i + 2] = [sym[i] + sym[i + 1]]
        out_tokens.extend(sym)
    return out_tokens


def bpe_detokenize(tokens: Iterable[str]) -> str:
    return "".join(tokens).replace(WORD_END, " ").strip()
