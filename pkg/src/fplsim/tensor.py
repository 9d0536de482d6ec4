"""Dense float32 tensors with a reverse-mode tape, CNN primitives and ADAM.

Operations are plain functions.  Each accepts an optional ``tape``; when one
is given, the op appends a record holding its backward rule, and
``tape.backward(loss)`` replays the records in reverse order.  Without a tape
the op is a pure forward (inference) computation.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, UsageError

DTYPE = np.float32


class Tensor:
    """An n-dimensional float32 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=DTYPE).reshape(self.data.shape)
        if self.grad is None:
            # backward rules may return views of other buffers; keep a private copy then
            self.grad = g if g.flags.owndata and g.flags.writeable else g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A trainable tensor plus its ADAM moment estimates."""

    __slots__ = ("value", "adam_m", "adam_v", "step_count")

    def __init__(self, data):
        self.value = Tensor(data, requires_grad=True)
        self.adam_m = Tensor(np.zeros_like(self.value.data))
        self.adam_v = Tensor(np.zeros_like(self.value.data))
        self.step_count = 0

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, steps={self.step_count})"


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of primitive ops; one per forward pass, never shared across threads."""

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self._records.append(_Record(output, tuple(inputs), backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Seed ``loss`` with ``grad`` (ones by default) and propagate to every input."""
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=DTYPE)
        loss.accumulate_grad(seed)
        for rec in reversed(self._records):
            if rec.output.grad is None:
                continue
            grads = rec.backward(rec.output.grad)
            for inp, g in zip(rec.inputs, grads):
                if g is not None and inp.requires_grad:
                    inp.accumulate_grad(g)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _new(data, inputs: Sequence[Tensor]) -> Tensor:
    return Tensor(data, requires_grad=any(t.requires_grad for t in inputs))


def _same_pad(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x, kernel, bias, padding: str = "same", tape: Optional[Tape] = None) -> Tensor:
    """2-D cross-correlation, stride 1. ``padding`` is ``"same"`` or ``"valid"``."""
    x, w, b = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects input [N,C,H,W] and kernel [O,C,K,K], got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, c_k, kh, kw = w.shape
    if c != c_k:
        raise ConfigurationError(f"conv2d channel mismatch: input C={c}, kernel C={c_k}")
    if kh != kw:
        raise ConfigurationError(f"conv2d kernel must be square, got {kh}x{kw}")
    if b.shape != (o,):
        raise ConfigurationError(f"conv2d bias shape {b.shape} does not match O={o}")
    if padding == "same":
        pad_h, pad_w = _same_pad(kh), _same_pad(kw)
    elif padding == "valid":
        pad_h = pad_w = (0, 0)
    else:
        raise ConfigurationError(f"unknown padding mode {padding!r}")
    hp, wp = h + sum(pad_h), wd + sum(pad_w)
    if kh > hp or kw > wp:
        raise ConfigurationError(f"conv2d kernel K={kh} exceeds padded input H={hp}, W={wp}")

    xp = np.pad(x.data, ((0, 0), (0, 0), pad_h, pad_w)) if padding == "same" else x.data
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T + b.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    result = _new(out, (x, w, b))

    if tape is not None:
        need_x = x.requires_grad

        def backward(g):
            gf = g.transpose(0, 2, 3, 1).reshape(-1, o)
            dw = (gf.T @ cols).reshape(w.shape)
            db = gf.sum(axis=0)
            dx = None
            if need_x:
                dcols = (gf @ wmat).reshape(n, ho, wo, c, kh, kw)
                dxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                dx = dxp[:, :, pad_h[0]:pad_h[0] + h, pad_w[0]:pad_w[0] + wd]
            return dx, dw, db

        tape.record(result, (x, w, b), backward)
    return result


def maxpool2(x, tape: Optional[Tape] = None) -> Tensor:
    """2x2 max pooling with stride 2.

    Odd spatial sizes are padded bottom/right with -inf. On ties the first
    position of the window in row-major order wins and receives the gradient.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ConfigurationError(f"maxpool2 expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf) if ph or pw else x.data
    h2, w2 = (h + ph) // 2, (w + pw) // 2
    win = xp.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]
    result = _new(out, (x,))

    if tape is not None:
        def backward(g):
            gwin = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
            np.put_along_axis(gwin, idx, g[..., None], axis=-1)
            gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h + ph, w + pw)
            return (gx[:, :, :h, :w],)

        tape.record(result, (x,), backward)
    return result


def dense(x, weight, bias, tape: Optional[Tape] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape [N, F_in]."""
    x, w, b = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ConfigurationError(f"dense expects input [N,F_in] and weight [F_in,F_out], got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ConfigurationError(f"dense inner dimension mismatch: input F_in={x.shape[1]}, weight F_in={w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ConfigurationError(f"dense bias shape {b.shape} does not match F_out={w.shape[1]}")
    result = _new(x.data @ w.data + b.data, (x, w, b))

    if tape is not None:
        need_x = x.requires_grad

        def backward(g):
            dx = g @ w.data.T if need_x else None
            return dx, x.data.T @ g, g.sum(axis=0)

        tape.record(result, (x, w, b), backward)
    return result


def relu(x, tape: Optional[Tape] = None) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    result = _new(np.where(mask, x.data, DTYPE(0)), (x,))
    if tape is not None:
        tape.record(result, (x,), lambda g: (g * mask,))
    return result


def flatten(x, tape: Optional[Tape] = None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    result = _new(x.data.reshape(shape[0], -1), (x,))
    if tape is not None:
        tape.record(result, (x,), lambda g: (g.reshape(shape),))
    return result


def concat(xs: Sequence, tape: Optional[Tape] = None) -> Tensor:
    """Concatenate [N, F_k] tensors along the feature axis."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ConfigurationError("concat needs at least one input")
    if len({x.shape[0] for x in xs}) != 1 or any(x.data.ndim != 2 for x in xs):
        raise ConfigurationError(f"concat expects [N,F] inputs with equal N, got {[x.shape for x in xs]}")
    widths = [x.shape[1] for x in xs]
    result = _new(np.concatenate([x.data for x in xs], axis=1), xs)
    if tape is not None:
        bounds = np.cumsum(widths)[:-1]
        tape.record(result, xs, lambda g: tuple(np.split(g, bounds, axis=1)))
    return result


def add(a, b, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    result = _new(a.data + b.data, (a, b))
    if tape is not None:
        tape.record(result, (a, b), lambda g: (g, g.copy()))
    return result


def sum_all(x, tape: Optional[Tape] = None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    result = _new(np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE), (x,))
    if tape is not None:
        tape.record(result, (x,), lambda g: (np.broadcast_to(g, shape),))
    return result


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels, tape: Optional[Tape] = None) -> Tensor:
    """Mean categorical cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ConfigurationError(f"softmax_cross_entropy expects logits [N,C], got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ConfigurationError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise DataError(f"label {bad} outside [0, {c})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    result = _new(np.asarray(nll.mean(), dtype=DTYPE), (logits,))

    if tape is not None:
        def backward(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(n), labels] -= 1.0
            return ((p / n) * np.asarray(g).item()).astype(DTYPE),

        tape.record(result, (logits,), backward)
    return result


def proximal_term(param, anchor, mu: float, tape: Optional[Tape] = None) -> Tensor:
    """FedProx penalty ``(mu / 2) * ||param - anchor||^2`` as a scalar tensor."""
    w = _as_tensor(param)
    anchor = np.asarray(anchor, dtype=DTYPE)
    if anchor.shape != w.shape:
        raise ConfigurationError(f"proximal anchor shape {anchor.shape} does not match parameter {w.shape}")
    diff = w.data - anchor
    val = 0.5 * mu * float(np.dot(diff.reshape(-1).astype(np.float64), diff.reshape(-1).astype(np.float64)))
    result = _new(np.asarray(val, dtype=DTYPE), (w,))
    if tape is not None:
        tape.record(result, (w,), lambda g: ((mu * np.asarray(g).item()) * diff,))
    return result


def adam_step(param: Parameter, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Parameter:
    """Apply one bias-corrected ADAM update in place and clear the gradient."""
    g = param.value.grad
    if g is None:
        raise UsageError(f"adam_step on {param!r} without a gradient")
    param.step_count += 1
    t = param.step_count
    m, v = param.adam_m.data, param.adam_v.data
    m *= DTYPE(beta1)
    m += DTYPE(1.0 - beta1) * g
    np.multiply(g, g, out=g)
    g *= DTYPE(1.0 - beta2)
    v *= DTYPE(beta2)
    v += g
    # lr * m_hat / (sqrt(v_hat) + eps), evaluated in place on the gradient buffer
    step = np.sqrt(v, out=g)
    step *= DTYPE(1.0 / np.sqrt(1.0 - beta2 ** t))
    step += DTYPE(eps)
    np.divide(m, step, out=step)
    step *= DTYPE(lr / (1.0 - beta1 ** t))
    param.value.data -= step
    param.value.grad = None
    return param


def _raw(p) -> np.ndarray:
    if isinstance(p, Parameter):
        return p.value.data
    if isinstance(p, Tensor):
        return p.data
    return np.asarray(p, dtype=DTYPE)


def average_parameters(params: Sequence, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Elementwise mean of same-shape parameters; uniform unless ``weights`` is given.

    Accumulates left to right in float64 and casts once, so averaging n
    copies of one tensor returns it bit-for-bit.
    """
    arrays = [_raw(p) for p in params]
    if not arrays:
        raise ConfigurationError("average_parameters needs at least one parameter")
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise ConfigurationError(f"average_parameters shape mismatch: item 0 is {shape}, item {i} is {a.shape}")
    acc = np.zeros(shape, dtype=np.float64)
    if weights is None:
        for a in arrays:
            acc += a
        acc /= len(arrays)
    else:
        if len(weights) != len(arrays):
            raise ConfigurationError(f"{len(weights)} weights for {len(arrays)} parameters")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigurationError(f"weights must be nonnegative and sum to 1, got {list(weights)}")
        for w, a in zip(weights, arrays):
            acc += float(w) * a.astype(np.float64)  # a bare float times float32 would stay float32
    return acc.astype(DTYPE)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)
