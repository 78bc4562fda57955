"""Multi-way training loop.

One optimizer step accumulates the gradients of several direction batches
(round-robin: one batch from every direction; proportional: a fixed number of
sub-batches sampled by data amount) into a single Adam update.  Token budgets
are equalized per module: a dedicated single model sees the full budget per
direction, the fully-shared model budget/#directions, the modular model
budget/#languages.

Losses are summed token cross-entropies scaled by the step's total token
count, so accumulating k identical batches produces exactly the gradient of
one batch holding k copies.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .autodiff import Adam, LrSchedule, Tape, Tensor, lr_at
from .data import (PAD_ID, Batch, Bitext, Direction, Vocabulary, _hash_seed,
                   batch_by_tokens, encode_rows, pair_key)
from .errors import CheckpointError, ConfigurationError, ContractViolation, NumericFailure
from .models import (ModelKind, MultiModel, RoutedDirection, _set_frozen,
                     assemble, route)
from .transformer import TransformerConfig


@dataclass
class TrainSettings:
    module_budget: int = 2048
    max_epochs: int = 10
    patience: int = 0            # 0 disables patience-based stopping
    max_steps: int = 0           # 0 = no step cap
    warmup_steps: int = 2000
    peak_lr: float = 1e-3
    schedule: str = "round_robin"   # or "proportional"
    granularity: int = 8            # sub-batches per proportional step
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8


@dataclass
class TrainState:
    """Everything needed to resume training bit-identically."""

    epoch: int = 0               # completed epochs
    global_step: int = 0
    step_in_epoch: int = 0       # completed steps of an unfinished epoch
    best_val: float = math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0
    rng_state: dict | None = None


def per_direction_budget(kind: ModelKind, module_budget: int,
                         num_directions: int, num_languages: int) -> int:
    """Token budget of one direction batch so each module sees ``module_budget``."""
    if kind is ModelKind.SINGLE:
        return module_budget
    if kind is ModelKind.ONE_TO_ONE:
        return max(1, module_budget // num_directions)
    return max(1, module_budget // num_languages)


def direction_batches(model: MultiModel, bitexts: dict[tuple[str, str], Bitext],
                      directions: Sequence[Direction], max_tokens: int) -> dict[Direction, list[Batch]]:
    out = {}
    for d in sorted(directions, key=str):
        bt = bitexts[pair_key(d.src, d.tgt)]
        rows = encode_rows(bt.oriented(d), model.vocab_for(d.src), model.vocab_for(d.tgt))
        out[d] = batch_by_tokens(rows, d, max_tokens, prepend=route(model, d).prepend)
    return out


# ---------------------------------------------------------------------------
# Scheduling
# ---------------------------------------------------------------------------

def schedule_epoch(batches_by_dir: dict[Direction, list[Batch]], kind: str,
                   seed: int, epoch: int, granularity: int = 8
                   ) -> list[list[tuple[Direction, Batch]]]:
    """Ordered step plan for one epoch.

    Round-robin: every step holds one batch from every direction; the epoch
    ends when the largest direction is exhausted, smaller ones cycle (which
    up-samples low-resource pairs).  Proportional: each step holds
    ``granularity`` sub-batches drawn with probability proportional to each
    direction's token amount.
    """
    if not batches_by_dir:
        raise ContractViolation("schedule_epoch requires at least one direction")
    if any(not b for b in batches_by_dir.values()):
        raise ContractViolation("every direction needs at least one batch")
    dirs = sorted(batches_by_dir, key=str)
    rng = np.random.default_rng(_hash_seed(seed, "schedule", epoch))
    orders = {d: rng.permutation(len(batches_by_dir[d])) for d in dirs}

    if kind == "round_robin":
        n_steps = max(len(b) for b in batches_by_dir.values())
        return [[(d, batches_by_dir[d][orders[d][i % len(batches_by_dir[d])]])
                 for d in dirs] for i in range(n_steps)]
    if kind == "proportional":
        amounts = np.array([sum(b.token_count for b in batches_by_dir[d]) for d in dirs],
                           dtype=float)
        probs = amounts / amounts.sum()
        total_sub = sum(len(b) for b in batches_by_dir.values())
        n_steps = max(1, math.ceil(total_sub / granularity))
        cursors = dict.fromkeys(dirs, 0)
        plan = []
        for _ in range(n_steps):
            step = []
            for j in rng.choice(len(dirs), size=granularity, p=probs):
                d = dirs[int(j)]
                batch_list = batches_by_dir[d]
                step.append((d, batch_list[orders[d][cursors[d] % len(batch_list)]]))
                cursors[d] += 1
            plan.append(step)
        return plan
    raise ConfigurationError(f"unknown schedule kind '{kind}'")


# ---------------------------------------------------------------------------
# Forward / loss
# ---------------------------------------------------------------------------

def batch_loss(routed: RoutedDirection, batch: Batch, train: bool = False,
               rng: np.random.Generator | None = None) -> tuple[Tensor, int]:
    """Summed token cross-entropy of one batch and its non-pad token count."""
    src_mask = batch.src_pad_mask()
    enc = tf.encode(routed.encoder, routed.enc_embedding, batch.src, src_mask, train, rng)
    tgt_in = batch.tgt_input()
    dec = tf.decoder_states(routed.decoder, routed.dec_embedding, tgt_in, enc,
                            src_mask, tgt_in != PAD_ID, train, rng)
    logits = routed.dec_embedding.logits(dec)
    gold = batch.tgt_gold()
    mask = gold != PAD_ID
    n, t = gold.shape
    flat = ad.reshape(logits, (n * t, logits.shape[-1]))
    ce = ad.cross_entropy_sum(flat, gold.reshape(-1), mask.reshape(-1))
    return ce, int(mask.sum())


def batch_accuracy(routed: RoutedDirection, batch: Batch) -> tuple[int, int]:
    """Teacher-forced next-token accuracy (correct, total) over non-pad gold."""
    src_mask = batch.src_pad_mask()
    enc = tf.encode(routed.encoder, routed.enc_embedding, batch.src, src_mask)
    tgt_in = batch.tgt_input()
    dec = tf.decoder_states(routed.decoder, routed.dec_embedding, tgt_in, enc,
                            src_mask, tgt_in != PAD_ID)
    logits = routed.dec_embedding.logits(dec).data
    gold = batch.tgt_gold()
    mask = gold != PAD_ID
    pred = logits.argmax(axis=-1)
    return int(((pred == gold) & mask).sum()), int(mask.sum())


def _merge_entries(entries: Sequence[tuple[Direction, Batch]]
                   ) -> tuple[Batch, list[tuple[Direction, int, int]]]:
    """Stack several direction batches into one padded batch.

    Only valid when every direction routes through the same modules (the
    fully-shared model); gradients are identical because pad positions carry
    neither loss nor attention weight.
    """
    src_w = max(b.src.shape[1] for _, b in entries)
    tgt_w = max(b.tgt.shape[1] for _, b in entries)
    srcs, tgts, spans = [], [], []
    row = 0
    for d, b in entries:
        s = np.full((b.src.shape[0], src_w), PAD_ID, dtype=np.int64)
        s[:, :b.src.shape[1]] = b.src
        t = np.full((b.tgt.shape[0], tgt_w), PAD_ID, dtype=np.int64)
        t[:, :b.tgt.shape[1]] = b.tgt
        srcs.append(s)
        tgts.append(t)
        spans.append((d, row, row + b.src.shape[0]))
        row += b.src.shape[0]
    merged = Batch(entries[0][0], np.vstack(srcs), np.vstack(tgts),
                   sum(b.token_count for _, b in entries))
    return merged, spans


def _per_direction_losses(logits: np.ndarray, gold: np.ndarray,
                          spans: list[tuple[Direction, int, int]]) -> dict[str, float]:
    """Detached per-direction mean token cross-entropy over a merged batch."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.max(axis=-1)
    picked = np.take_along_axis(logits, gold[..., None], axis=-1)[..., 0]
    token_loss = (lse - picked) * (gold != PAD_ID)
    out = {}
    for d, lo, hi in spans:
        mask = gold[lo:hi] != PAD_ID
        n = int(mask.sum())
        out[str(d)] = float(token_loss[lo:hi].sum() / max(n, 1))
    return out


def train_step(model: MultiModel, entries: Sequence[tuple[Direction, Batch]],
               optimizer: Adam, lr: float, rng: np.random.Generator,
               step_no: int = 0) -> dict[str, float]:
    """Accumulate all entries' gradients into one Adam update.

    Returns the mean token cross-entropy per direction.  Frozen modules take
    no gradient and are untouched by the update.  For the fully-shared model
    the step's batches run as one stacked forward, which is the same
    computation with less per-batch overhead.
    """
    total_tokens = sum(batch.token_count for _, batch in entries)
    optimizer.zero_grad()
    losses: dict[str, list[float]] = {}
    if model.kind is ModelKind.ONE_TO_ONE and len(entries) > 1:
        merged, spans = _merge_entries(entries)
        routed = route(model, entries[0][0])
        with Tape() as tape:
            ce, logits = _batch_loss_with_logits(routed, merged, rng)
            if not np.isfinite(ce.data).all():
                raise NumericFailure(f"non-finite loss in merged step {step_no}")
            ad.backward(tape, ad.scale(ce, 1.0 / total_tokens))
        per_dir = _per_direction_losses(logits, merged.tgt_gold(), spans)
        optimizer.step(lr)
        return per_dir
    for direction, batch in entries:
        routed = route(model, direction)
        with Tape() as tape:
            ce, tokens = batch_loss(routed, batch, train=True, rng=rng)
            if not np.isfinite(ce.data).all():
                raise NumericFailure(
                    f"non-finite loss for direction {direction} at step {step_no}")
            ad.backward(tape, ad.scale(ce, 1.0 / total_tokens))
        losses.setdefault(str(direction), []).append(ce.item() / max(tokens, 1))
    optimizer.step(lr)
    return {d: float(np.mean(v)) for d, v in losses.items()}


def _batch_loss_with_logits(routed: RoutedDirection, batch: Batch,
                            rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    src_mask = batch.src_pad_mask()
    enc = tf.encode(routed.encoder, routed.enc_embedding, batch.src, src_mask, True, rng)
    tgt_in = batch.tgt_input()
    dec = tf.decoder_states(routed.decoder, routed.dec_embedding, tgt_in, enc,
                            src_mask, tgt_in != PAD_ID, True, rng)
    logits = routed.dec_embedding.logits(dec)
    gold = batch.tgt_gold()
    mask = gold != PAD_ID
    n, t = gold.shape
    flat = ad.reshape(logits, (n * t, logits.shape[-1]))
    ce = ad.cross_entropy_sum(flat, gold.reshape(-1), mask.reshape(-1))
    return ce, logits.data.reshape(n, t, -1)


def validate(model: MultiModel, valid_batches: dict[Direction, list[Batch]]
             ) -> tuple[dict[str, float], float]:
    """Per-direction mean token cross-entropy plus the plain average.

    Dropout is off and nothing is recorded, so repeated calls are identical.
    """
    per_dir = {}
    for d in sorted(valid_batches, key=str):
        routed = route(model, d)
        total, tokens = 0.0, 0
        for batch in valid_batches[d]:
            ce, n = batch_loss(routed, batch, train=False)
            total += ce.item()
            tokens += n
        per_dir[str(d)] = total / max(tokens, 1)
    avg = float(np.mean(list(per_dir.values()))) if per_dir else 0.0
    return per_dir, avg


def early_stop(state: TrainState, epoch: int, new_avg_loss: float,
               max_epochs: int, patience: int = 0) -> tuple[bool, bool]:
    """Update best-so-far bookkeeping; returns (stop, is_best)."""
    is_best = new_avg_loss < state.best_val
    if is_best:
        state.best_val = new_avg_loss
        state.best_epoch = epoch
        state.epochs_since_best = 0
    else:
        state.epochs_since_best += 1
    stop = epoch >= max_epochs or (patience > 0 and state.epochs_since_best >= patience)
    return stop, is_best


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    best_path: Path | None
    last_path: Path | None


def train(model: MultiModel, train_bitexts: dict[tuple[str, str], Bitext],
          valid_bitexts: dict[tuple[str, str], Bitext], directions: Sequence[Direction],
          settings: TrainSettings, seed: int, *, out_dir: Path | None = None,
          metrics_path: Path | None = None, deterministic: bool = False,
          config_digest: str = "", state: TrainState | None = None,
          optimizer: Adam | None = None,
          step_hook: Callable[[int, dict[str, float]], None] | None = None) -> TrainResult:
    """Run the multi-way loop until max_epochs/max_steps or patience fires.

    Resuming: pass the state and optimizer from ``load_checkpoint``; the
    epoch plan is rebuilt deterministically from (seed, epoch) and completed
    steps are skipped, so the loss trajectory continues exactly.
    """
    directions = sorted(directions, key=str)
    cap = per_direction_budget(model.kind, settings.module_budget,
                               len(directions), len(model.languages))
    if settings.schedule == "proportional":
        cap = max(1, cap * len(directions) // settings.granularity)
    batches = direction_batches(model, train_bitexts, directions, cap)
    valid_batches = direction_batches(model, valid_bitexts, directions, cap)
    schedule = LrSchedule(settings.warmup_steps, settings.peak_lr)
    state = state or TrainState()
    optimizer = optimizer or Adam(model.named_parameters(), settings.adam_beta1,
                                  settings.adam_beta2, settings.adam_epsilon)
    rng = np.random.default_rng(_hash_seed(seed, "dropout"))
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state

    best_path = Path(out_dir) / "checkpoint_best.bin" if out_dir else None
    last_path = Path(out_dir) / "checkpoint_last.bin" if out_dir else None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    def save(path):
        state.rng_state = rng.bit_generator.state
        save_checkpoint(path, model, optimizer, state, config_digest)

    stop = False
    while not stop:
        epoch = state.epoch + 1
        plan = schedule_epoch(batches, settings.schedule, seed, epoch, settings.granularity)
        epoch_losses: dict[str, list[float]] = {}
        epoch_tokens = 0
        last_lr = 0.0
        started = time.monotonic()
        for i in range(state.step_in_epoch, len(plan)):
            if settings.max_steps and state.global_step >= settings.max_steps:
                if last_path:
                    save(last_path)
                return TrainResult(state, best_path, last_path)
            last_lr = lr_at(schedule, state.global_step + 1)
            losses = train_step(model, plan[i], optimizer, last_lr, rng,
                                state.global_step + 1)
            state.global_step += 1
            state.step_in_epoch = i + 1
            epoch_tokens += sum(b.token_count for _, b in plan[i])
            for d, v in losses.items():
                epoch_losses.setdefault(d, []).append(v)
            if step_hook:
                step_hook(state.global_step, losses)
        per_dir_val, avg_val = validate(model, valid_batches)
        stop, is_best = early_stop(state, epoch, avg_val,
                                   settings.max_epochs, settings.patience)
        state.epoch = epoch
        state.step_in_epoch = 0
        elapsed = time.monotonic() - started
        tps = 0.0 if deterministic else (epoch_tokens / elapsed if elapsed > 0 else 0.0)
        if metrics_path:
            record = {
                "type": "train_epoch", "epoch": epoch, "global_step": state.global_step,
                "lr": last_lr,
                "train_loss": {d: float(np.mean(v)) for d, v in sorted(epoch_losses.items())},
                "valid_loss": per_dir_val, "valid_avg": avg_val,
                "tokens_per_sec": round(tps, 1), "is_best": is_best,
            }
            append_metrics(metrics_path, record)
        if is_best and best_path:
            save(best_path)
        if last_path:
            save(last_path)
    return TrainResult(state, best_path, last_path)


def append_metrics(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MODNETCK"
CHECKPOINT_VERSION = 1


def _meta_for(model: MultiModel, optimizer: Adam, state: TrainState,
              config_digest: str) -> dict:
    return {
        "kind": model.kind.value,
        "languages": model.languages,
        "directions": [str(d) for d in model.directions],
        "transformer": {
            "d_model": model.config.d_model, "ff_dim": model.config.ff_dim,
            "num_heads": model.config.num_heads,
            "num_encoder_layers": model.config.num_encoder_layers,
            "num_decoder_layers": model.config.num_decoder_layers,
            "dropout": model.config.dropout,
            "attention_dropout": model.config.attention_dropout,
            "activation_dropout": model.config.activation_dropout,
            "max_positions": model.config.max_positions,
        },
        "vocabs": {key: v.tokens for key, v in model.vocabs.items()},
        "frozen": {key: entry.frozen for key, entry in model.registry.items()},
        "seed": model.seed,
        "digest": config_digest,
        "adam": {"step": optimizer.state.step, "beta1": optimizer.state.beta1,
                 "beta2": optimizer.state.beta2, "epsilon": optimizer.state.epsilon},
        "train_state": {
            "epoch": state.epoch, "global_step": state.global_step,
            "step_in_epoch": state.step_in_epoch,
            "best_val": None if math.isinf(state.best_val) else state.best_val,
            "best_epoch": state.best_epoch,
            "epochs_since_best": state.epochs_since_best,
            "rng_state": state.rng_state,
        },
    }


def save_checkpoint(path: Path, model: MultiModel, optimizer: Adam,
                    state: TrainState, config_digest: str = "") -> None:
    """Versioned little-endian binary: header, JSON metadata, named tensors."""
    meta = json.dumps(_meta_for(model, optimizer, state, config_digest),
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors: dict[str, np.ndarray] = {n: p.data for n, p in model.named_parameters().items()}
    for n, arr in optimizer.state.m.items():
        tensors[f"opt.m.{n}"] = arr
    for n, arr in optimizer.state.v.items():
        tensors[f"opt.v.{n}"] = arr

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(meta))
    blob += meta
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated or corrupt")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw parse: (metadata, named tensor arrays)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    r = _Reader(raw)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported (expected {CHECKPOINT_VERSION})")
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError("checkpoint metadata is corrupt") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * n_items), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return meta, tensors


def load_checkpoint(path: Path) -> tuple[MultiModel, Adam, TrainState, dict]:
    """Rebuild the model, optimizer and train state bit-exactly."""
    meta, tensors = read_checkpoint(path)
    config = TransformerConfig(**meta["transformer"])
    vocabs = {key: Vocabulary(toks) for key, toks in meta["vocabs"].items()}
    directions = [Direction.parse(d) for d in meta["directions"]]
    model = assemble(meta["kind"], meta["languages"], config, vocabs,
                     directions, meta["seed"])
    params = model.named_parameters()
    adam_meta = meta["adam"]
    optimizer = Adam(params, adam_meta["beta1"], adam_meta["beta2"], adam_meta["epsilon"])
    optimizer.state.step = adam_meta["step"]
    for name, arr in tensors.items():
        if name.startswith("opt.m."):
            optimizer.state.m[name[len("opt.m."):]] = arr.copy()
        elif name.startswith("opt.v."):
            optimizer.state.v[name[len("opt.v."):]] = arr.copy()
        else:
            if name not in params:
                raise CheckpointError(f"checkpoint tensor '{name}' does not fit this model")
            if params[name].data.shape != arr.shape:
                raise CheckpointError(f"shape mismatch for tensor '{name}'")
            params[name].data = arr.copy()
    for key, flag in meta["frozen"].items():
        if flag:
            _set_frozen(model, key, True)
    ts = meta["train_state"]
    state = TrainState(
        epoch=ts["epoch"], global_step=ts["global_step"],
        step_in_epoch=ts["step_in_epoch"],
        best_val=math.inf if ts["best_val"] is None else ts["best_val"],
        best_epoch=ts["best_epoch"], epochs_since_best=ts["epochs_since_best"],
        rng_state=_restore_rng_state(ts["rng_state"]),
    )
    return model, optimizer, state, meta


def _restore_rng_state(state: dict | None) -> dict | None:
    # json round-trips the PCG64 state dict losslessly (ints stay ints)
    return state
