"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything trainable in this package lives in a :class:`Tensor`.  Operations
executed while a :class:`Tape` is active append one node each; `backward`
replays the tape once, in reverse, and accumulates gradients into every
tensor that has ``requires_grad`` set.  Without an active tape the same
functions are plain numpy forward computations, which is what evaluation
uses.

The module also carries the optimizer side: Adam with bias correction, the
warmup + inverse-square-root learning-rate schedule, and a central-difference
gradient checker used as the independent oracle for every layer type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, NumericFailure

DTYPE = np.float64


class Tensor:
    """A dense n-dimensional float64 value with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation("item() requires a scalar tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # never in place: incoming arrays may be shared with other tensors
        self.grad = g if self.grad is None else self.grad + g

    def check_finite(self, context: str = "tensor") -> None:
        if not np.isfinite(self.data).all():
            raise NumericFailure(f"non-finite values in {context}")

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    # Small conveniences; heavy lifting is done by the module-level functions.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    """One recorded operation: inputs, output and its backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    """Wrap a forward result, recording the op when a tape is listening."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(TapeNode(op, inputs, out, backward))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every participating requires_grad tensor.

    Gradients accumulate (they are not zeroed first), which is what the
    multi-direction training step relies on.
    """
    if loss.size != 1:
        raise ContractViolation("backward requires a scalar loss")
    if not np.isfinite(loss.data).all():
        raise NumericFailure("non-finite loss value")
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.backward(g_out)
        for tensor, g in zip(node.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            # a single reduction catches NaN/Inf without a bool temporary
            if not math.isfinite(float(g.sum())):
                raise NumericFailure(f"non-finite gradient in op '{node.op}'")
            tensor.accumulate_grad(g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), out, bw)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bw(g):
        return (g * s,)

    return _emit("scale", (a,), out, bw)


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant (no gradient flows into ``c``); used for masks/positions."""
    out = a.data + c

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _emit("add_const", (a,), out, bw)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _emit("power", (a,), out, bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _emit("exp", (a,), out, bw)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _emit("log", (a,), out, bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", (a,), out, bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0.0),)

    return _emit("relu", (a,), out, bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _emit("reshape", (a,), out, bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _emit("transpose", (a,), out, bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _emit("sum", (a,), out, bw)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; a and b must have identical batch dimensions."""
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise ContractViolation("matmul requires equal-rank operands of rank >= 2")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ContractViolation("matmul batch dimensions must match")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _emit("matmul", (a, b), out, bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b) over the trailing feature axis of x."""
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in:
        raise ContractViolation("linear: feature dimension mismatch")
    flat = x.data.reshape(-1, d_in)
    out = flat @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(x.data.shape[:-1] + (d_out,))

    def bw(g):
        gf = g.reshape(-1, d_out)
        gx = (gf @ w.data.T).reshape(x.shape)
        gw = flat.T @ gf
        gb = gf.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit("linear", inputs, out, bw)


def project_tied(x: Tensor, weight: Tensor) -> Tensor:
    """Output logits through the transpose of an embedding matrix."""
    v, d = weight.data.shape
    flat = x.data.reshape(-1, d)
    out = (flat @ weight.data.T).reshape(x.data.shape[:-1] + (v,))

    def bw(g):
        gf = g.reshape(-1, v)
        gx = (gf @ weight.data).reshape(x.shape)
        gw = gf.T @ flat
        return gx, gw

    return _emit("project_tied", (x, weight), out, bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis. Rows sum to one by construction."""
    out = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.einsum("...d,...d->...", g, out)[..., None]
        return (out * (g - dot),)

    return _emit("softmax", (a,), out, bw)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), out, bw)


def embedding(table: Tensor, ids: np.ndarray, scale_factor: float, pad_id: int | None = None) -> Tensor:
    """Row lookup scaled by ``scale_factor``; the pad row never gets gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractViolation("embedding id out of range")
    out = table.data[ids] * scale_factor

    def bw(g):
        # sort-and-reduceat scatter-add; much faster than a buffered ufunc
        flat_ids = ids.reshape(-1)
        g2 = g.reshape(-1, table.data.shape[1])
        order = np.argsort(flat_ids, kind="stable")
        sorted_ids = flat_ids[order]
        uniq, starts = np.unique(sorted_ids, return_index=True)
        summed = np.add.reduceat(g2[order], starts, axis=0)
        gt = np.zeros_like(table.data)
        gt[uniq] = summed * scale_factor
        if pad_id is not None:
            gt[pad_id] = 0.0
        return (gt,)

    return _emit("embedding", (table,), out, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.einsum("...d,...d->...", centered, centered)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data
    out += bias.data

    def bw(g):
        gxhat = g * gain.data
        gvar = np.einsum("...d,...d->...", gxhat, centered)[..., None] * (-0.5) * inv ** 3
        # the sum of `centered` over the last axis is identically zero, so the
        # corresponding mean-gradient term is dropped
        gmu = -inv * gxhat.sum(axis=-1, keepdims=True)
        gx = gxhat * inv
        gx += centered * (gvar * (2.0 / d))
        gx += gmu / d
        g2 = g.reshape(-1, d)
        ggain = np.einsum("nd,nd->d", g2, xhat.reshape(-1, d))
        gbias = g2.sum(axis=0)
        return gx, ggain, gbias

    return _emit("layer_norm", (x, gain, bias), out, bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; callers skip this entirely during evaluation."""
    if p <= 0.0:
        return x
    # float32 uniforms are enough entropy for a keep-mask and twice as fast
    mask = (rng.random(x.shape, dtype=np.float32) >= p) / (1.0 - p)

    def bw(g):
        return (g * mask,)

    return _emit("dropout", (x,), x.data * mask, bw)


def cross_entropy_sum(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Summed token cross-entropy from raw logits.

    ``logits`` is [N, V]; ``targets`` and ``mask`` are length N.  Masked-out
    positions (mask 0) contribute neither loss nor gradient.
    """
    n, v = logits.data.shape
    targets = np.asarray(targets).reshape(-1)
    mask = np.asarray(mask, dtype=DTYPE).reshape(-1)
    if targets.shape[0] != n or mask.shape[0] != n:
        raise ContractViolation("cross_entropy_sum: length mismatch")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.data.max(axis=-1)
    picked = logits.data[np.arange(n), targets]
    out = np.asarray(((lse - picked) * mask).sum())

    def bw(g):
        soft = np.exp(shifted)
        soft /= soft.sum(axis=-1, keepdims=True)
        soft[np.arange(n), targets] -= 1.0
        return (soft * (mask * float(g))[:, None],)

    return _emit("cross_entropy", (logits,), out, bw)


# ---------------------------------------------------------------------------
# Optimizer and learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter-set Adam accumulators; step counts shared updates."""

    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    Parameters whose gradient entry is missing/None are treated as zero
    gradient.  Shapes must agree with existing accumulators.
    """
    if lr <= 0:
        raise ContractViolation("adam_step requires lr > 0")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractViolation(f"adam_step: gradient shape mismatch for '{name}'")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.data.shape:
            raise ContractViolation(f"adam_step: accumulator shape mismatch for '{name}'")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


class Adam:
    """Convenience wrapper driving :func:`adam_step` from tensor ``.grad``.

    Frozen parameters (``requires_grad`` False) are skipped entirely: no
    update, no accumulator decay.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.state = AdamState(beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self, lr: float) -> None:
        live = {n: p for n, p in self.params.items() if p.requires_grad}
        grads = {n: p.grad for n, p in live.items()}
        adam_step(live, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``peak_lr`` followed by inverse-square-root decay."""

    warmup_steps: int = 2000
    peak_lr: float = 1e-3


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 1:
        raise ContractViolation("lr_at requires step >= 1")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    return schedule.peak_lr * math.sqrt(schedule.warmup_steps / step)


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be a deterministic scalar-valued closure over ``params``
    (dropout off).  The numeric side only ever calls ``fn`` forward, so it is
    independent of every backward rule it checks.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ContractViolation("grad_check step size h must lie in [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    if loss.size != 1:
        raise ContractViolation("grad_check requires a scalar-valued function")
    if not np.isfinite(loss.data).all():
        raise NumericFailure("non-finite function value in grad_check")
    backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericFailure("non-finite function value in grad_check")
            numeric = (up - down) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
