"""Dense tensors with reverse-mode automatic differentiation.

Small by design: exactly the operations needed to assemble residual
CNNs with several classifier heads and the mutual-distillation losses.
Compute runs in float32 by default; every op also works in float64 for
finite-difference verification.

Recording model: ops append to the innermost active ``Tape`` (a plain
ordered list, execution order is already topological).  With no tape
active nothing is recorded, which is the eval path.  A tape and the
tensors flowing through it belong to one thread; independent passes on
separate threads never share state.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class InvalidValueError(ValueError):
    """Non-finite or otherwise unusable numeric input."""


class ContractError(RuntimeError):
    """An API precondition that is not a shape or value problem."""


_FLOAT_DTYPES = (np.float32, np.float64)

# kl_divergence clamps its second argument at this floor instead of
# emitting NaN; every clamp event is counted (see kl_clamp_count).
KL_EPS = 1e-12
_kl_clamp_events = 0


def kl_clamp_count() -> int:
    return _kl_clamp_events


def reset_kl_clamp_count() -> None:
    global _kl_clamp_events
    _kl_clamp_events = 0


class Tensor:
    """n-d array plus gradient buffer.

    Data is immutable by convention after construction (the trainer
    updates parameters through ``data[...] =`` between passes, never
    during one); ``grad`` is the only buffer mutated by backward.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _TapeEntry:
    __slots__ = ("name", "inputs", "output", "grad_fn")

    def __init__(self, name, inputs, output, grad_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        if popped is not self:
            raise ContractError("tapes must be exited in LIFO order")
        return False

    def __len__(self):
        return len(self.entries)


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.entries.append(_TapeEntry(name, tuple(inputs), out, grad_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from loss.

    Gradients accumulate additively, both across multiple uses inside
    the tape and across repeated backward calls (callers zero grads
    between steps).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {loss.data.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = pending.pop(id(entry.output), None)
        if g is None:
            continue
        entry.output.accumulate_grad(g)
        input_grads = entry.grad_fn(g)
        for t, gi in zip(entry.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in pending:
                pending[key] += gi
            else:
                # copy: grad rules may hand the same array to several inputs
                pending[key] = np.array(gi, dtype=t.data.dtype, copy=True)
    # remaining entries are leaves (never an op output on this tape)
    for entry in reversed(tape.entries):
        for t in entry.inputs:
            g = pending.pop(id(t), None)
            if g is not None:
                t.accumulate_grad(g)
    if id(loss) in pending and loss.requires_grad:
        loss.accumulate_grad(pending.pop(id(loss)))


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (t,), t.data * t.dtype.type(c), lambda g: (g * t.dtype.type(c),))


def sum_all(t: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.full_like(t.data, g.reshape(())),)

    return _record("sum", (t,), np.asarray(t.data.sum(), dtype=t.dtype), grad_fn)


def mean_all(t: Tensor) -> Tensor:
    n = t.data.size

    def grad_fn(g):
        return (np.full_like(t.data, g.reshape(()) / n),)

    return _record("mean", (t,), np.asarray(t.data.mean(), dtype=t.dtype), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, x.dtype.type(0)), lambda g: (g * mask,))


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add: shapes {a.shape} and {b.shape} differ")
    return _record("residual_add", (a, b), a.data + b.data, lambda g: (g, g))


# ---------------------------------------------------------------------------
# probability ops


def _softmax_raw(z: np.ndarray) -> np.ndarray:
    # max-subtraction: same value, no overflow for any finite input
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax expects [batch, classes], got {logits.shape}")
    if not np.isfinite(logits.data).all():
        raise InvalidValueError("softmax: non-finite logits")
    p = _softmax_raw(logits.data)

    def grad_fn(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _record("softmax", (logits,), p, grad_fn)


def tempered_softmax(logits: Tensor, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if logits.data.ndim != 2:
        raise ShapeError(f"tempered_softmax expects [batch, classes], got {logits.shape}")
    if not np.isfinite(logits.data).all():
        raise InvalidValueError("tempered_softmax: non-finite logits")
    tau_c = logits.dtype.type(tau)
    p = _softmax_raw(logits.data / tau_c)

    def grad_fn(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot) / tau_c,)

    return _record("tempered_softmax", (logits,), p, grad_fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes], got {logits.shape}")
    labels = np.asarray(labels)
    b, m = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= m:
        raise IndexError(f"labels must lie in [0, {m})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = (logsumexp - shifted[np.arange(b), labels]).mean()

    def grad_fn(g):
        p = _softmax_raw(z)
        p[np.arange(b), labels] -= 1
        return (p * (g.reshape(()) / b),)

    return _record("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), grad_fn)


def _check_distribution(name: str, arr: np.ndarray) -> None:
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be [batch, classes], got {arr.shape}")
    if (arr < 0).any():
        raise InvalidValueError(f"{name} has negative entries")
    if not np.allclose(arr.sum(axis=1), 1.0, atol=1e-5):
        raise InvalidValueError(f"{name} rows must sum to 1 within 1e-5")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Mean over the batch of sum_i p_i * (ln p_i - ln q_i), 0*ln 0 == 0."""
    global _kl_clamp_events
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    _check_distribution("p", p.data)
    _check_distribution("q", q.data)
    b = p.shape[0]
    support = p.data > 0
    clamped = support & (q.data < KL_EPS)
    if clamped.any():
        _kl_clamp_events += int(clamped.sum())
    qc = np.maximum(q.data, p.dtype.type(KL_EPS))
    # log1p of the ratio offset keeps tiny p-q differences exact
    ratio = np.log1p((p.data - qc) / qc, where=support, out=np.zeros_like(qc))
    val = (p.data * ratio).sum() / b

    def grad_fn(g):
        s = g.reshape(()) / b
        dp = np.where(support, np.log(np.maximum(p.data, KL_EPS)) - np.log(qc) + 1.0, 0.0) * s
        dq = np.where(support, -p.data / qc, 0.0) * s
        return (dp.astype(p.dtype, copy=False), dq.astype(q.dtype, copy=False))

    return _record("kl_divergence", (p, q), np.asarray(val, dtype=p.dtype), grad_fn)


def l2_distance_sq(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences, divided by the leading (batch) dim."""
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance_sq: shapes {a.shape} and {b.shape} differ")
    if a.data.ndim < 1:
        raise ShapeError("l2_distance_sq needs a batch dimension")
    n = a.shape[0]
    diff = a.data - b.data
    val = (diff * diff).sum() / n

    def grad_fn(g):
        s = g.reshape(()) * 2.0 / n
        da = diff * s
        return (da.astype(a.dtype, copy=False), (-da).astype(b.dtype, copy=False))

    return _record("l2_distance_sq", (a, b), np.asarray(val, dtype=a.dtype), grad_fn)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} != ({weight.shape[0]},)")
        y = y + bias.data

    def grad_fn(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("linear", inputs, y, grad_fn)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight channels {weight.shape[1]}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d supports stride 1 or 2, got {stride}")
    y = backend.conv2d_forward(x.data, weight.data, stride, padding)
    x_shape = x.shape
    kh, kw = weight.shape[2], weight.shape[3]

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        gx = backend.conv2d_backward_input(g, weight.data, x_shape, stride, padding)
        gw = backend.conv2d_backward_weight(x.data, g, kh, kw, stride, padding)
        return (gx, gw)

    return _record("conv2d", (x, weight), y, grad_fn)


def max_pool(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = kernel if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError("max_pool expects NCHW input")
    y, idx = backend.maxpool2d_forward(x.data, kernel, stride)
    h, w = x.shape[2], x.shape[3]

    def grad_fn(g):
        return (backend.maxpool2d_backward(np.ascontiguousarray(g), idx, h, w),)

    return _record("max_pool", (x,), y, grad_fn)


def avg_pool(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = kernel if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError("avg_pool expects NCHW input")
    y = backend.avgpool2d_forward(x.data, kernel, stride)
    x_shape = x.shape

    def grad_fn(g):
        return (backend.avgpool2d_backward(np.ascontiguousarray(g), x_shape, kernel, stride),)

    return _record("avg_pool", (x,), y, grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects NCHW input")
    area = x.shape[2] * x.shape[3]
    y = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).astype(x.dtype, copy=False),)

    return _record("global_avg_pool", (x,), y, grad_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    Training mode normalizes with batch statistics and folds them into
    the running buffers (running = momentum*running + (1-momentum)*batch);
    eval mode normalizes with the running buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError("batch_norm expects NCHW input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params must have shape ({c},)")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    m = x.shape[0] * x.shape[2] * x.shape[3]

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        scaled = gamma.data * inv_std
        if training:
            gx = (scaled[None, :, None, None] / m) * (
                m * g
                - gbeta[None, :, None, None]
                - xhat * ggamma[None, :, None, None]
            )
        else:
            gx = scaled[None, :, None, None] * g
        return (gx.astype(x.dtype, copy=False),
                ggamma.astype(gamma.dtype, copy=False),
                gbeta.astype(beta.dtype, copy=False))

    return _record("batch_norm", (x, gamma, beta), y, grad_fn)


_LAYER_KINDS = ("linear", "conv2d", "relu", "max_pool", "avg_pool", "global_avg_pool", "residual_add")


def layer_forward(kind: str, params: dict, x: Tensor) -> Tensor:
    """Uniform functional entry point over the supported layer kinds."""
    if kind == "linear":
        return linear(x, params["weight"], params.get("bias"))
    if kind == "conv2d":
        return conv2d(x, params["weight"], params.get("stride", 1), params.get("padding", 0))
    if kind == "relu":
        return relu(x)
    if kind == "max_pool":
        return max_pool(x, params["kernel"], params.get("stride"))
    if kind == "avg_pool":
        return avg_pool(x, params["kernel"], params.get("stride"))
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "residual_add":
        return residual_add(x, params["other"])
    raise ValueError(f"unknown layer kind {kind!r}; expected one of {_LAYER_KINDS}")
