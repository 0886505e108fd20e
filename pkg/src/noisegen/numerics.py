"""Fixed-op tensor substrate with reverse-mode gradients.

Every op accepts plain ``numpy`` arrays or :class:`Var` handles.  When any
argument is a ``Var`` the result is a ``Var`` on the same :class:`GradTape`
and a backward record is appended; otherwise the op is a plain array
function with no bookkeeping.  Ops preserve the floating dtype of their
inputs, so the same code runs in float32 for training and float64 for
finite-difference checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "DimensionError",
    "GradTape",
    "Var",
    "value_of",
    "conv2d",
    "linear",
    "activation",
    "resample",
    "concat_channels",
    "mse_loss",
    "add",
    "affine_channels",
    "split_features",
]


class DimensionError(ValueError):
    """Shape contract violation.  ``axes`` names the offending axes."""

    def __init__(self, message: str, axes: tuple[str, ...] = ()):
        super().__init__(message)
        self.axes = axes


class Var:
    """Handle to an array recorded on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "GradTape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


class GradTape:
    """Ordered record of executed ops for one backward pass.

    A tape belongs to one thread of execution.  ``gradient`` replays the
    records in reverse, visiting each exactly once.
    """

    def __init__(self):
        self._n_vars = 0
        self._records: list[tuple[int, tuple, Callable]] = []

    def __len__(self) -> int:
        return len(self._records)

    def watch(self, array) -> Var:
        arr = np.asarray(array)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        return self._new(arr)

    def _new(self, value: np.ndarray) -> Var:
        var = Var(value, self, self._n_vars)
        self._n_vars += 1
        return var

    def _record(self, value: np.ndarray, inputs: tuple, backward: Callable) -> Var:
        out = self._new(value)
        self._records.append((out.index, inputs, backward))
        return out

    def gradient(self, target: Var, sources: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` with respect to ``sources``."""
        if target.tape is not self:
            raise ValueError("target was not recorded on this tape")
        if target.value.size != 1:
            raise DimensionError("gradient target must be a scalar", ("target",))
        grads: dict[int, np.ndarray] = {target.index: np.ones_like(target.value)}
        for out_index, inputs, backward in reversed(self._records):
            g = grads.pop(out_index, None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if isinstance(inp, Var) and gi is not None:
                    if inp.index in grads:
                        grads[inp.index] = grads[inp.index] + gi
                    else:
                        grads[inp.index] = gi
        return [
            grads.get(s.index, np.zeros_like(s.value)).astype(s.value.dtype, copy=False)
            for s in sources
        ]


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def _tape_of(*args) -> GradTape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = a.tape
    return tape


def _result(value: np.ndarray, inputs: tuple, backward: Callable):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape._record(value, inputs, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# convolution


def _pad_amount(pad, k: int) -> int:
    if pad == "same":
        return k // 2
    if pad == "valid":
        return 0
    raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")


def conv2d(input, weight, bias=None, stride: int = 1, pad: str = "same"):
    """2-D cross-correlation over NCHW input with an (out, in, k, k) kernel."""
    x = value_of(input)
    w = value_of(weight)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be rank 4, got shape {x.shape}", ("input",))
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d weight must be (out, in, k, k), got {w.shape}", ("weight",))
    n, c, h, wd = x.shape
    o, ci, k, _ = w.shape
    if ci != c:
        raise DimensionError(
            f"conv2d channel mismatch: input channels {c} != weight in-channels {ci}",
            ("input.channel", "weight.in"),
        )
    if k % 2 != 1:
        raise DimensionError(f"conv2d kernel size must be odd, got {k}", ("weight.kernel",))
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    b = None if bias is None else value_of(bias)
    if b is not None and b.shape != (o,):
        raise DimensionError(f"conv2d bias must have shape ({o},), got {b.shape}", ("bias",))

    p = _pad_amount(pad, k)
    if h + 2 * p < k or wd + 2 * p < k:
        raise DimensionError("conv2d kernel larger than padded input", ("input.height", "input.width"))
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.reshape(o, c * k * k)
    out = cols @ wmat.T
    if b is not None:
        out += b
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        gb = None if b is None else gmat.sum(axis=0, dtype=np.float64).astype(b.dtype)
        gx = None
        if isinstance(input, Var):
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += (
                        gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    return _result(out, (input, weight, bias), backward)


# ---------------------------------------------------------------------------
# dense


def linear(input, weight, bias=None):
    """Affine map ``x @ W.T + b`` for ``x`` of shape (batch, in), ``W`` (out, in)."""
    x = value_of(input)
    w = value_of(weight)
    if w.ndim != 2:
        raise DimensionError(f"linear weight must be a matrix, got {w.shape}", ("weight",))
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(
            f"linear inner dimension mismatch: input {x.shape[-1]} vs weight {w.shape[1]}",
            ("input.features", "weight.in"),
        )
    b = None if bias is None else value_of(bias)
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear bias must have shape ({w.shape[0]},)", ("bias",))
    out = x @ w.T
    if b is not None:
        out = out + b

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.reshape(-1, w.shape[1])
        gx = (g @ w) if isinstance(input, Var) else None
        gw = g2.T @ x2
        gb = None if b is None else g2.sum(axis=0, dtype=np.float64).astype(b.dtype)
        return gx, gw, gb

    return _result(out, (input, weight, bias), backward)


# ---------------------------------------------------------------------------
# elementwise


def activation(input, kind: str = "silu"):
    """Elementwise ``relu`` or ``silu``.  relu'(0) is taken as 0."""
    x = value_of(input)
    if kind == "relu":
        out = np.maximum(x, 0)

        def backward(g):
            return (g * (x > 0),)

    elif kind == "silu":
        sig = expit(x)
        out = x * sig

        def backward(g):
            return (g * (sig * (1 + x * (1 - sig))),)

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _result(out.astype(x.dtype, copy=False), (input,), backward)


def add(a, b):
    """Broadcasting sum; either side may be a constant."""
    av, bv = value_of(a), value_of(b)
    # plain Python scalars take the array operand's dtype
    if isinstance(a, (int, float)):
        av = bv.dtype.type(a)
    if isinstance(b, (int, float)):
        bv = av.dtype.type(b)
    out = av + bv

    def backward(g):
        ga = _unbroadcast(g, np.shape(av)) if isinstance(a, Var) else None
        gb = _unbroadcast(g, np.shape(bv)) if isinstance(b, Var) else None
        return ga, gb

    return _result(out, (a, b), backward)


def affine_channels(input, gamma, beta):
    """``gamma * F + beta`` with per-channel (C,) or per-item (N, C) coefficients."""
    f = value_of(input)
    gm, bt = value_of(gamma), value_of(beta)
    if f.ndim != 4:
        raise DimensionError(f"feature map must be rank 4, got {f.shape}", ("input",))
    c = f.shape[1]
    for name, v in (("gamma", gm), ("beta", bt)):
        if v.ndim not in (1, 2) or v.shape[-1] != c or (v.ndim == 2 and v.shape[0] not in (1, f.shape[0])):
            raise DimensionError(
                f"{name} of shape {v.shape} does not match {c} channels", (name, "input.channel")
            )
    g4 = gm.reshape(gm.shape + (1, 1)) if gm.ndim == 2 else gm.reshape(1, c, 1, 1)
    b4 = bt.reshape(bt.shape + (1, 1)) if bt.ndim == 2 else bt.reshape(1, c, 1, 1)
    out = f * g4 + b4

    def backward(g):
        gf = g * g4 if isinstance(input, Var) else None
        if gm.ndim == 2:
            ggm = _unbroadcast((g * f).sum(axis=(2, 3)), gm.shape)
            gbt_full = g.sum(axis=(2, 3))
        else:
            ggm = (g * f).sum(axis=(0, 2, 3))
            gbt_full = g.sum(axis=(0, 2, 3))
        gbt = _unbroadcast(gbt_full, bt.shape) if bt.ndim == 2 else gbt_full
        return gf, ggm, gbt

    return _result(out, (input, gamma, beta), backward)


def split_features(input, parts: int):
    """Split the last axis into ``parts`` equal pieces."""
    x = value_of(input)
    if x.shape[-1] % parts:
        raise DimensionError(f"cannot split {x.shape[-1]} features into {parts}", ("input.features",))
    size = x.shape[-1] // parts
    tape = _tape_of(input)
    pieces = []
    for i in range(parts):
        sl = (Ellipsis, slice(i * size, (i + 1) * size))
        val = x[sl].copy()

        def backward(g, sl=sl):
            full = np.zeros_like(x)
            full[sl] = g
            return (full,)

        pieces.append(val if tape is None else tape._record(val, (input,), backward))
    return pieces


# ---------------------------------------------------------------------------
# spatial


def resample(input, mode: str):
    """``down2-avg`` (2x2 mean pool) or ``up2-nearest`` (pixel replication)."""
    x = value_of(input)
    if x.ndim != 4:
        raise DimensionError(f"resample input must be rank 4, got {x.shape}", ("input",))
    n, c, h, w = x.shape
    if mode == "down2-avg":
        if h % 2 or w % 2:
            raise DimensionError(
                f"down2-avg needs even spatial extents, got {h}x{w}", ("input.height", "input.width")
            )
        out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def backward(g):
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.dtype.type(0.25)
            return (gx,)

    elif mode == "up2-nearest":
        out = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

        def backward(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return _result(out.astype(x.dtype, copy=False), (input,), backward)


def concat_channels(*inputs):
    """Concatenate rank-4 maps along the channel axis."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    vals = [value_of(a) for a in inputs]
    ref = vals[0]
    for v in vals[1:]:
        if v.ndim != 4 or v.shape[0] != ref.shape[0] or v.shape[2:] != ref.shape[2:]:
            raise DimensionError(
                f"concat_channels extent mismatch: {ref.shape} vs {v.shape}",
                ("batch", "height", "width"),
            )
    out = np.concatenate(vals, axis=1)
    bounds = np.cumsum([0] + [v.shape[1] for v in vals])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(vals)))

    return _result(out, tuple(inputs), backward)


# ---------------------------------------------------------------------------
# loss


def mse_loss(pred, target):
    """Mean squared difference, reduced in float64 and returned as a 0-d array."""
    p, t = value_of(pred), value_of(target)
    if p.shape != t.shape:
        raise DimensionError(f"mse_loss shape mismatch: {p.shape} vs {t.shape}", ("pred", "target"))
    diff = p - t
    n = diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=p.dtype)

    def backward(g):
        gp = (2.0 / n) * diff * g
        return gp.astype(p.dtype, copy=False), (-gp).astype(t.dtype, copy=False)

    return _result(out, (pred, target), backward)
