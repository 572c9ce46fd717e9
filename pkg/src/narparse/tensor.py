"""Dense tensors with reverse-mode automatic differentiation.

Forward math is plain numpy. Every differentiable op appends a backward
closure to the active Tape (a Wengert list); `Tape.backward` replays the
list in reverse, which is a reverse topological order of the recorded
graph, visiting each node exactly once. With no tape active, ops run
forward-only, which is the inference path.

Float32 is the working precision; building tensors from float64 arrays
keeps them in float64, which is how gradient checking runs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeMismatch(ValueError):
    pass


class OddDim(ValueError):
    pass


class AllMasked(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class InvalidBeta(ValueError):
    pass


class Tensor:
    """A numpy array plus gradient slot. Not thread-shared while taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


_STACK = threading.local()


def _tapes() -> list["Tape"]:
    if not hasattr(_STACK, "tapes"):
        _STACK.tapes = []
    return _STACK.tapes


def active_tape() -> "Tape | None":
    tapes = _tapes()
    return tapes[-1] if tapes else None


class Tape:
    """Records op nodes in execution order; backward replays them reversed."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tapes().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of `loss` into every reachable tensor's .grad."""
        if loss.size != 1:
            raise ShapeMismatch("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


def _record(out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    _record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    _record(out, backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, a.requires_grad)
    _record(out, lambda g: _accum(a, g * c))
    return out


def mul_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise multiply by a fixed (non-differentiated) array."""
    out = Tensor(a.data * const, a.requires_grad)
    _record(out, lambda g: _accum(a, _unbroadcast(g * const, a.shape)))
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), any(t.requires_grad for t in tensors))
    sizes = [d.shape[axis] for d in datas]

    def backward(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, gs in zip(tensors, splits):
            _accum(t, gs)

    _record(out, backward)
    return out


def take_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along the last axis."""
    out = Tensor(a.data[..., start:stop], a.requires_grad)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        _accum(a, ga)

    _record(out, backward)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape), a.requires_grad)
    _record(out, lambda g: _accum(a, g.reshape(a.shape)))
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(a.data, axes), a.requires_grad)
    inv = tuple(np.argsort(axes))
    _record(out, lambda g: _accum(a, np.transpose(g, inv)))
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum()), a.requires_grad)
    _record(out, lambda g: _accum(a, np.broadcast_to(g, a.shape) * np.ones(1, a.data.dtype)))
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(np.asarray(a.data.mean()), a.requires_grad)
    _record(out, lambda g: _accum(a, np.broadcast_to(g / n, a.shape) * np.ones(1, a.data.dtype)))
    return out


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = Tensor(a.data.sum(axis=axis), a.requires_grad)

    def backward(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), a.requires_grad)
    _record(out, lambda g: _accum(a, g * (a.data > 0)))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s, a.requires_grad)
    _record(out, lambda g: _accum(a, g * s * (1.0 - s)))
    return out


def glu(a: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half gated by sigmoid of second."""
    d2 = a.shape[-1]
    if d2 % 2 != 0:
        raise OddDim(f"glu needs an even last dim, got {d2}")
    half = d2 // 2
    return mul(take_last(a, 0, half), sigmoid(take_last(a, half, d2)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    _record(out, backward)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w + b over the last axis of x; w is [d_in, d_out]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: x {x.shape} vs w {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: bias {b.shape} vs w {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y, x.requires_grad or w.requires_grad or (b is not None and b.requires_grad))

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            g2 = g.reshape(-1, w.shape[1])
            x2 = x.data.reshape(-1, w.shape[0])
            _accum(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, w.shape[1]).sum(axis=0))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# softmax family


def masked_softmax(scores: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along `axis`; positions where mask is True get probability 0.

    Raises AllMasked when any row has no unmasked position.
    """
    x = scores.data
    if mask is not None:
        mb = np.broadcast_to(mask, x.shape)
        if np.all(mb, axis=axis).any():
            raise AllMasked("softmax row with every position masked")
        x = np.where(mb, -np.inf, x)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=axis, keepdims=True)
    if mask is not None:
        p = np.where(np.broadcast_to(mask, p.shape), 0.0, p)
    out = Tensor(p, scores.requires_grad)

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accum(scores, p * (g - inner))

    _record(out, backward)
    return out


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Forward-only stable log-softmax (used on decode paths)."""
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def label_smoothed_ce(
    logits: Tensor,
    targets: np.ndarray,
    beta: float,
    support_mask: np.ndarray | None = None,
    row_mask: np.ndarray | None = None,
) -> Tensor:
    """Label-smoothed cross entropy, averaged over counted rows.

    The soft target is (1-beta) * onehot + beta * uniform, with the uniform
    mass spread over the valid support only. `support_mask` (True = valid
    class) restricts both the softmax and the smoothing; `row_mask`
    (True = counted) selects which rows contribute to the mean.
    """
    if not 0.0 <= beta < 1.0:
        raise InvalidBeta(f"beta must be in [0, 1), got {beta}")
    if logits.ndim != 2:
        raise ShapeMismatch("label_smoothed_ce expects [n, V] logits")
    n, v = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeMismatch(f"targets shape {targets.shape} vs logits {logits.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= v:
        raise IndexOutOfRange("target id outside vocabulary")

    x = logits.data
    if support_mask is not None:
        if not support_mask.any(axis=1).all():
            raise AllMasked("loss row with empty class support")
        x = np.where(support_mask, x, -np.inf)
        v_eff = support_mask.sum(axis=1).astype(x.dtype)
    else:
        v_eff = np.full(n, v, dtype=x.dtype)

    logp = log_softmax_np(x)
    rows = np.arange(n)
    nll = -logp[rows, targets]
    sum_logp = np.where(np.isfinite(logp), logp, 0.0).sum(axis=1)
    per_row = (1.0 - beta) * nll - (beta / v_eff) * sum_logp

    if row_mask is None:
        counted = np.ones(n, dtype=bool)
    else:
        counted = np.asarray(row_mask, dtype=bool)
    n_rows = int(counted.sum())
    if n_rows == 0:
        raise ShapeMismatch("no rows selected for the loss")
    loss = per_row[counted].sum() / n_rows
    out = Tensor(np.asarray(loss), logits.requires_grad)

    def backward(g):
        p = np.exp(logp)  # zero on masked-out classes
        q = np.zeros_like(p)
        if support_mask is not None:
            q[support_mask] = (beta / np.broadcast_to(v_eff[:, None], p.shape))[support_mask]
        else:
            q += beta / v_eff[:, None]
        q[rows, targets] += 1.0 - beta
        gl = (p - q) * (float(g) / n_rows)
        gl[~counted] = 0.0
        _accum(logits, gl)

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# normalization, embedding, convolution


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-position normalization over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch("layer_norm gain/bias must match the last dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, x.requires_grad or gain.requires_grad or bias.requires_grad)

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    _record(out, backward)
    return out


def embedding_lookup(ids: np.ndarray, table: Tensor) -> Tensor:
    """Gather rows of `table`; gradient scatter-adds into looked-up rows."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexOutOfRange(
            f"id outside table of {table.shape[0]} rows: [{ids.min()}, {ids.max()}]"
        )
    out = Tensor(table.data[ids], table.requires_grad)

    def backward(g):
        # tables only ever receive gradient here, so in-place scatter is safe
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    _record(out, backward)
    return out


def softmax_kernel_weights(kernels: Tensor) -> Tensor:
    """Normalize raw kernel logits [H, k] to per-head weights summing to 1."""
    return masked_softmax(kernels, axis=-1)


def conv1d_depthwise_shared(
    x: Tensor,
    kernels: Tensor,
    heads: int,
    pad_mask: np.ndarray | None = None,
    causal: bool = False,
) -> Tensor:
    """Depthwise 1-d convolution with head-shared, softmax-normalized kernels.

    x is [T, d] or [B, T, d]; kernels holds raw logits [H, k], normalized
    over the k taps before convolving. Channel c uses the kernel of head
    c*H//d. Padding is symmetric (non-causal) by default, left-only when
    `causal`. Positions where pad_mask is True are zeroed before the
    convolution so padding never leaks inward.
    """
    weights = softmax_kernel_weights(kernels)
    return _depthwise_conv(x, weights, heads, pad_mask, causal)


def _depthwise_conv(
    x: Tensor,
    weights: Tensor,
    heads: int,
    pad_mask: np.ndarray | None,
    causal: bool,
) -> Tensor:
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeMismatch(f"conv expects [T, d] or [B, T, d], got {x.shape}")
    b_sz, t_len, d = xd.shape
    h, k = weights.shape
    if h != heads:
        raise ShapeMismatch(f"kernel rows {h} != heads {heads}")
    if d % heads != 0:
        raise ShapeMismatch(f"channels {d} not divisible by heads {heads}")

    # per-channel tap weights [d, k]
    wc = np.repeat(weights.data, d // heads, axis=0)
    keep = None
    if pad_mask is not None:
        pm = pad_mask[None] if squeeze else pad_mask
        keep = ~np.asarray(pm, dtype=bool)
        xd = xd * keep[..., None].astype(xd.dtype)

    left = k - 1 if causal else (k - 1) // 2
    right = 0 if causal else k - 1 - left
    xp = np.pad(xd, ((0, 0), (left, right), (0, 0)))
    out_d = np.zeros_like(xd)
    for j in range(k):
        out_d += xp[:, j : j + t_len, :] * wc[:, j]

    out = Tensor(out_d[0] if squeeze else out_d, x.requires_grad or weights.requires_grad)

    def backward(g):
        gd = g[None] if squeeze else g
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + t_len, :] += gd * wc[:, j]
            gx = gxp[:, left : left + t_len, :]
            if keep is not None:
                gx = gx * keep[..., None].astype(gx.dtype)
            _accum(x, gx[0] if squeeze else gx)
        if weights.requires_grad:
            gwc = np.empty_like(wc)
            for j in range(k):
                gwc[:, j] = (gd * xp[:, j : j + t_len, :]).sum(axis=(0, 1))
            _accum(weights, gwc.reshape(heads, d // heads, k).sum(axis=1))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# parameters, optimizer, rng


class Parameter:
    """A trainable tensor with its Adam state."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def adam_step(
    param: Parameter,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    g = param.tensor.grad
    if g is None:
        raise ValueError(f"adam_step on {param.name!r} with no gradient")
    param.step += 1
    param.m = beta1 * param.m + (1.0 - beta1) * g
    param.v = beta2 * param.v + (1.0 - beta2) * (g * g)
    mhat = param.m / (1.0 - beta1**param.step)
    vhat = param.v / (1.0 - beta2**param.step)
    param.tensor.data = param.tensor.data - lr * mhat / (np.sqrt(vhat) + eps)


@dataclass(frozen=True)
class RngState:
    """Seed plus named PRNG; identical state yields identical draw sequences."""

    seed: int
    algorithm: str = "pcg64"

    def generator(self, *stream: int) -> np.random.Generator:
        if self.algorithm != "pcg64":
            raise ValueError(f"unknown PRNG algorithm {self.algorithm!r}")
        return np.random.Generator(np.random.PCG64([self.seed, *stream]))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    checked: int
    max_rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    entries: tuple[GradCheckEntry, ...]
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self) -> str:
        lines = [
            f"  {e.name}: max rel err {e.max_rel_err:.3e} over {e.checked} elements"
            for e in self.entries
        ]
        verdict = "PASS" if self.passed else "FAIL"
        return f"grad check {verdict} (tol {self.tol:g})\n" + "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-3,
    max_elements_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of f() against central differences.

    Relative error per element is |ad - num| / max(|ad|, |num|, 1e-6); the
    floor keeps quadrature noise on true-zero gradients from registering.
    Run with float64 parameters: float32 quantization swamps h = 1e-5.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    tape.backward(out)
    grads = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    entries = []
    for p in params:
        flat = p.tensor.data.reshape(-1)
        n = flat.size
        if max_elements_per_param is not None and n > max_elements_per_param:
            idxs = np.sort(rng.choice(n, size=max_elements_per_param, replace=False))
        else:
            idxs = np.arange(n)
        gflat = grads[p.name].reshape(-1)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            ad = float(gflat[i])
            rel = abs(ad - num) / max(abs(ad), abs(num), 1e-6)
            worst = max(worst, rel)
        entries.append(GradCheckEntry(p.name, len(idxs), worst))
    return GradCheckReport(tuple(entries), tol)
