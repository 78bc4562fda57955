"""Transformer encoder/decoder stacks used by every model family.

Post-norm residual blocks, fixed sinusoidal positions, embeddings scaled by
sqrt(d_model) and shared with the output projection (logits come from the
transpose of the target-side embedding).  Stacks do not own embeddings; the
model registry decides which embedding table feeds which stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractViolation

NEG_INF = -1e9


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 64
    ff_dim: int = 128
    num_heads: int = 2
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    dropout: float = 0.1
    attention_dropout: float = 0.0
    activation_dropout: float = 0.0
    max_positions: int = 64

    def __post_init__(self):
        if min(self.d_model, self.ff_dim, self.num_heads,
               self.num_encoder_layers, self.num_decoder_layers, self.max_positions) <= 0:
            raise ConfigurationError("transformer dimensions must be positive")
        if self.d_model % self.num_heads != 0:
            raise ConfigurationError("d_model must be divisible by num_heads")
        for p in (self.dropout, self.attention_dropout, self.activation_dropout):
            if not 0.0 <= p < 1.0:
                raise ConfigurationError("dropout rates must lie in [0, 1)")


PRESETS: dict[str, TransformerConfig] = {
    "desk": TransformerConfig(),
    "base": TransformerConfig(d_model=256, ff_dim=1024, num_heads=8,
                              num_encoder_layers=6, num_decoder_layers=6,
                              dropout=0.1, attention_dropout=0.1,
                              activation_dropout=0.1, max_positions=1024),
    "large": TransformerConfig(d_model=512, ff_dim=2048, num_heads=8,
                               num_encoder_layers=6, num_decoder_layers=6,
                               dropout=0.1, attention_dropout=0.1,
                               activation_dropout=0.1, max_positions=1024),
}


def preset(name: str, **overrides) -> TransformerConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown transformer preset '{name}'")
    cfg = PRESETS[name]
    return replace(cfg, **overrides) if overrides else cfg


def sinusoidal_positions(max_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((max_positions, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class EmbeddingTable:
    """vocab x d_model matrix, padding row pinned to zero."""

    def __init__(self, vocab_size: int, d_model: int, pad_id: int, rng: np.random.Generator):
        weight = rng.normal(0.0, d_model ** -0.5, size=(vocab_size, d_model))
        weight[pad_id] = 0.0
        self.weight = Tensor(weight, requires_grad=True)
        self.pad_id = pad_id
        self.d_model = d_model

    @property
    def vocab_size(self) -> int:
        return self.weight.data.shape[0]

    def lookup(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.weight, ids, math.sqrt(self.d_model), pad_id=self.pad_id)

    def logits(self, states: Tensor) -> Tensor:
        return ad.project_tied(states, self.weight)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight}


class MultiHeadAttention:
    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.wq = Tensor(_xavier(rng, d_model, d_model), requires_grad=True)
        self.wk = Tensor(_xavier(rng, d_model, d_model), requires_grad=True)
        self.wv = Tensor(_xavier(rng, d_model, d_model), requires_grad=True)
        self.wo = Tensor(_xavier(rng, d_model, d_model), requires_grad=True)
        self.bq = Tensor(np.zeros(d_model), requires_grad=True)
        self.bk = Tensor(np.zeros(d_model), requires_grad=True)
        self.bv = Tensor(np.zeros(d_model), requires_grad=True)
        self.bo = Tensor(np.zeros(d_model), requires_grad=True)

    def forward(self, x_q: Tensor, x_kv: Tensor, score_bias: np.ndarray | None,
                dropout_p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
        b, t_q, d = x_q.shape
        t_k = x_kv.shape[1]
        h, hd = self.num_heads, self.head_dim

        def split(x, t):
            return ad.transpose(ad.reshape(x, (b, t, h, hd)), (0, 2, 1, 3))

        q = split(ad.linear(x_q, self.wq, self.bq), t_q)
        k = split(ad.linear(x_kv, self.wk, self.bk), t_k)
        v = split(ad.linear(x_kv, self.wv, self.bv), t_k)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        if score_bias is not None:
            scores = ad.add_const(scores, score_bias)
        attn = ad.softmax(scores)
        if train and dropout_p > 0.0:
            attn = ad.dropout(attn, dropout_p, rng)
        ctx = ad.matmul(attn, v)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t_q, d))
        return ad.linear(merged, self.wo, self.bo)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n)
                for n in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}


class LayerNormParams:
    def __init__(self, d_model: int):
        self.gain = Tensor(np.ones(d_model), requires_grad=True)
        self.bias = Tensor(np.zeros(d_model), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class FeedForward:
    def __init__(self, d_model: int, ff_dim: int, rng: np.random.Generator):
        self.w1 = Tensor(_xavier(rng, d_model, ff_dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(ff_dim), requires_grad=True)
        self.w2 = Tensor(_xavier(rng, ff_dim, d_model), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def forward(self, x: Tensor, act_dropout: float, train: bool,
                rng: np.random.Generator | None) -> Tensor:
        hidden = ad.relu(ad.linear(x, self.w1, self.b1))
        if train and act_dropout > 0.0:
            hidden = ad.dropout(hidden, act_dropout, rng)
        return ad.linear(hidden, self.w2, self.b2)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in ("w1", "b1", "w2", "b2")}


class _Layer:
    """Shared residual plumbing for encoder and decoder layers (post-norm)."""

    def _residual(self, x: Tensor, sub_out: Tensor, norm: LayerNormParams,
                  dropout_p: float, train: bool, rng) -> Tensor:
        if train and dropout_p > 0.0:
            sub_out = ad.dropout(sub_out, dropout_p, rng)
        return norm.forward(ad.add(x, sub_out))


class EncoderLayer(_Layer):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.norm_attn = LayerNormParams(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, rng)
        self.norm_ff = LayerNormParams(cfg.d_model)

    def forward(self, x: Tensor, key_bias: np.ndarray | None, train: bool, rng) -> Tensor:
        cfg = self.cfg
        attn = self.self_attn.forward(x, x, key_bias, cfg.attention_dropout, train, rng)
        x = self._residual(x, attn, self.norm_attn, cfg.dropout, train, rng)
        ff = self.ff.forward(x, cfg.activation_dropout, train, rng)
        return self._residual(x, ff, self.norm_ff, cfg.dropout, train, rng)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.self_attn.named_parameters(f"{prefix}.self_attn"))
        out.update(self.norm_attn.named_parameters(f"{prefix}.norm_attn"))
        out.update(self.ff.named_parameters(f"{prefix}.ff"))
        out.update(self.norm_ff.named_parameters(f"{prefix}.norm_ff"))
        return out


class DecoderLayer(_Layer):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.norm_self = LayerNormParams(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads, rng)
        self.norm_cross = LayerNormParams(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, rng)
        self.norm_ff = LayerNormParams(cfg.d_model)

    def forward(self, x: Tensor, enc_states: Tensor, self_bias: np.ndarray,
                cross_bias: np.ndarray | None, train: bool, rng) -> Tensor:
        cfg = self.cfg
        attn = self.self_attn.forward(x, x, self_bias, cfg.attention_dropout, train, rng)
        x = self._residual(x, attn, self.norm_self, cfg.dropout, train, rng)
        cross = self.cross_attn.forward(x, enc_states, cross_bias, cfg.attention_dropout, train, rng)
        x = self._residual(x, cross, self.norm_cross, cfg.dropout, train, rng)
        ff = self.ff.forward(x, cfg.activation_dropout, train, rng)
        return self._residual(x, ff, self.norm_ff, cfg.dropout, train, rng)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.self_attn.named_parameters(f"{prefix}.self_attn"))
        out.update(self.norm_self.named_parameters(f"{prefix}.norm_self"))
        out.update(self.cross_attn.named_parameters(f"{prefix}.cross_attn"))
        out.update(self.norm_cross.named_parameters(f"{prefix}.norm_cross"))
        out.update(self.ff.named_parameters(f"{prefix}.ff"))
        out.update(self.norm_ff.named_parameters(f"{prefix}.norm_ff"))
        return out


class EncoderStack:
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.num_encoder_layers)]
        self.positions = sinusoidal_positions(cfg.max_positions, cfg.d_model)

    def forward(self, x: Tensor, pad_mask: np.ndarray | None, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        key_bias = None if pad_mask is None else pad_bias(pad_mask)
        for layer in self.layers:
            x = layer.forward(x, key_bias, train, rng)
        return x

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.layers.{i}"))
        return out


class DecoderStack:
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.num_decoder_layers)]
        self.positions = sinusoidal_positions(cfg.max_positions, cfg.d_model)

    def forward(self, x: Tensor, enc_states: Tensor, src_pad_mask: np.ndarray | None,
                tgt_pad_mask: np.ndarray | None, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        t = x.shape[1]
        self_bias = causal_bias(t)
        if tgt_pad_mask is not None:
            self_bias = self_bias + pad_bias(tgt_pad_mask)
        cross_bias = None if src_pad_mask is None else pad_bias(src_pad_mask)
        for layer in self.layers:
            x = layer.forward(x, enc_states, self_bias, cross_bias, train, rng)
        return x

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.layers.{i}"))
        return out


def pad_bias(pad_mask: np.ndarray) -> np.ndarray:
    """Additive attention bias from a [B, T] keep-mask (True = real token)."""
    return np.where(pad_mask[:, None, None, :], 0.0, NEG_INF)


def causal_bias(t: int) -> np.ndarray:
    bias = np.triu(np.full((t, t), NEG_INF), k=1)
    return bias[None, None, :, :]


def _embed(stack, emb: EmbeddingTable, tokens: np.ndarray, train: bool, rng) -> Tensor:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ContractViolation("token batches must be 2-dimensional [batch, time]")
    t = tokens.shape[1]
    if t > stack.cfg.max_positions:
        raise ContractViolation(
            f"sequence length {t} exceeds max_positions {stack.cfg.max_positions}")
    x = emb.lookup(tokens)
    x = ad.add_const(x, stack.positions[:t][None, :, :])
    if train and stack.cfg.dropout > 0.0:
        x = ad.dropout(x, stack.cfg.dropout, rng)
    return x


def encode(stack: EncoderStack, emb: EmbeddingTable, tokens: np.ndarray,
           pad_mask: np.ndarray | None = None, train: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """Run the encoder over a [B, T] id batch, giving [B, T, d_model] states."""
    x = _embed(stack, emb, tokens, train, rng)
    return stack.forward(x, pad_mask, train, rng)


def decoder_states(stack: DecoderStack, emb: EmbeddingTable, prefix: np.ndarray,
                   enc_states: Tensor, src_pad_mask: np.ndarray | None = None,
                   tgt_pad_mask: np.ndarray | None = None, train: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    x = _embed(stack, emb, prefix, train, rng)
    return stack.forward(x, enc_states, src_pad_mask, tgt_pad_mask, train, rng)


def decode_step(stack: DecoderStack, emb: EmbeddingTable, enc_states: Tensor,
                prefix: np.ndarray, src_pad_mask: np.ndarray | None = None) -> np.ndarray:
    """Next-token logits for each prefix row; causal, evaluation-only.

    ``prefix`` is [K, T] and must start with BOS; returns [K, vocab].
    """
    prefix = np.asarray(prefix)
    if prefix.ndim == 1:
        prefix = prefix[None, :]
    if prefix.shape[1] == 0:
        raise ContractViolation("decode_step requires a nonempty prefix")
    states = decoder_states(stack, emb, prefix, enc_states, src_pad_mask)
    logits = emb.logits(states)
    return logits.data[:, -1, :]


def parameter_count(cfg: TransformerConfig, vocab_size: int) -> int:
    """Deterministic parameter count for one embedding + encoder + decoder.

    attention: 4*(d^2 + d); layer norm: 2d; feed-forward: 2*d*ff + ff + d.
    Encoder layer = attn + ff + 2 norms; decoder layer adds one more
    attention and norm.  Positional tables are constants, not parameters.
    """
    d, ff = cfg.d_model, cfg.ff_dim
    attn = 4 * (d * d + d)
    norm = 2 * d
    ffp = 2 * d * ff + ff + d
    enc_layer = attn + ffp + 2 * norm
    dec_layer = 2 * attn + ffp + 3 * norm
    return (vocab_size * d
            + cfg.num_encoder_layers * enc_layer
            + cfg.num_decoder_layers * dec_layer)
