"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the primitives needed by the ranking network are provided. Each op
records its operands and a backward closure on the output tensor; calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every tensor that requires them.

Spatial ops accept a single image ``(C, H, W)`` or a batch ``(N, C, H, W)``.
Convolution follows the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "DimensionError",
    "DomainError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "topological_order",
    "backward",
    "matmul",
    "conv2d",
    "maxpool2d",
    "add_bias",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "scale",
    "log",
    "exp",
    "clip",
    "reshape",
    "transpose",
    "take",
    "sum",
    "mean",
    "gradcheck",
    "GradcheckReport",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class ContractError(ValueError):
    """A caller violated an op's precondition."""


_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current context (thread-local)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """n-d float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; all routes through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every operand before its consumer."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every tracked tensor.

    Gradients of intermediate nodes are scratch space and are released
    afterwards; leaves keep (and keep accumulating) theirs.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# The closures stored in ``_backward`` return one gradient (or None) per parent.


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), "matmul", _bw)


def _spatial(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name} expects (C,H,W) or (N,C,H,W), got {x.shape}")


def conv2d(x, kernels, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` with ``kernels`` of shape (O, C, kh, kw)."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if stride < 1 or pad < 0:
        raise ContractError(f"invalid stride={stride} / pad={pad}")
    xd, single = _spatial(x.data, "conv2d")
    kd = kernels.data
    if kd.ndim != 4:
        raise DimensionError(f"conv2d kernels must be (O,C,kh,kw), got {kd.shape}")
    n, c, h, w = xd.shape
    o, kc, kh, kw = kd.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kd.shape}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d kernel {kd.shape} larger than padded input {x.shape} (pad={pad})")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    # channel-major padded copy; im2col columns are filled by strided slices
    xt = np.zeros((c, n, hp, wp))
    xt[:, :, pad:pad + h, pad:pad + w] = xd.transpose(1, 0, 2, 3)
    rows_i = [slice(i, i + stride * (ho - 1) + 1, stride) for i in range(kh)]
    cols_j = [slice(j, j + stride * (wo - 1) + 1, stride) for j in range(kw)]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, rows_i[i], cols_j[j]]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    kmat = kd.reshape(o, c * kh * kw)
    out = (kmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if single:
        out = out[0]

    def _bw(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gk = (gmat @ cols.T).reshape(kd.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxt = np.zeros((c, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, rows_i[i], cols_j[j]] += gcols[:, i, j]
            gx = gxt[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx[0] if single else gx)
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernels), "conv2d", _bw)


def maxpool2d(x, window: int, stride: int | None = None) -> Tensor:
    """Per-window maximum; ties route the gradient to the first element in row-major order."""
    x = _as_tensor(x)
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ContractError(f"invalid window={window} / stride={stride}")
    xd, single = _spatial(x.data, "maxpool2d")
    n, c, h, w = xd.shape
    if h < window or w < window:
        raise DimensionError(f"maxpool2d window {window} exceeds spatial extent {(h, w)}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    if stride == window:
        # running max over the k*k offsets; strict ">" keeps the first maximum
        out = arg = None
        for k in range(window * window):
            v = xd[:, :, k // window:ho * window:window, k % window:wo * window:window]
            if out is None:
                out, arg = v.copy(), np.zeros(v.shape, dtype=np.intp)
            else:
                better = v > out
                out = np.where(better, v, out)
                arg[better] = k
    else:
        win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        flat = win.reshape(n, c, ho, wo, window * window)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def _bw(g):
        g4 = g[None] if single else g
        gx = np.zeros_like(xd)
        if stride == window:
            for k in range(window * window):
                gx[:, :, k // window:ho * window:window, k % window:wo * window:window] = np.where(arg == k, g4, 0.0)
            return (gx[0] if single else gx,)
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols_ = np.arange(wo)[None, None, None, :] * stride + dj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (np.broadcast_to(nn_, arg.shape), np.broadcast_to(cc, arg.shape), rows, cols_), g4)
        return (gx[0] if single else gx,)

    return _make(np.ascontiguousarray(out), (x,), "maxpool2d", _bw)


def add_bias(x, bias) -> Tensor:
    """Add a per-channel bias along axis 1 (or axis 0 for a single image / vector)."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    xd, bd = x.data, bias.data
    if bd.ndim != 1:
        raise DimensionError(f"bias must be 1-d, got {bd.shape}")
    axis = 0 if xd.ndim in (1, 3) else 1
    if xd.shape[axis] != bd.shape[0]:
        raise DimensionError(f"bias {bd.shape} does not match axis {axis} of {xd.shape}")
    view = [1] * xd.ndim
    view[axis] = bd.shape[0]
    reduce_axes = tuple(i for i in range(xd.ndim) if i != axis)

    def _bw(g):
        return g, g.sum(axis=reduce_axes) if bias.requires_grad else None

    return _make(xd + bd.reshape(view), (x, bias), "add_bias", _bw)


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{name} shape mismatch: {a.shape} vs {b.shape}")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operand broadcast against a full tensor
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _stable_sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _make(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unscalar(g * bd, a) if a.requires_grad else None,
                            _unscalar(g * ad, b) if b.requires_grad else None))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), "scale", lambda g: (g * c,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {x.data.min()!r}); clip first")
    xd = x.data
    return _make(np.log(xd), (x,), "log", lambda g: (g / xd,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), "exp", lambda g: (g * e,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside (lo, hi)."""
    x = _as_tensor(x)
    if not lo < hi:
        raise ContractError(f"clip needs lo < hi, got {lo}, {hi}")
    inside = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), "clip", lambda g: (g * inside,))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return _make(x.data.T, (x,), "transpose", lambda g: (g.T,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(out, (x,), "reshape", lambda g: (g.reshape(old),))


def take(x, index) -> Tensor:
    """Basic indexing / slicing ``x[index]``."""
    x = _as_tensor(x)
    out = np.array(x.data[index], dtype=np.float64)

    def _bw(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)

    return _make(out, (x,), "take", _bw)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), "sum",
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), "mean",
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradcheckReport:
    """Per-parameter max relative error between analytic and numeric gradients."""

    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        if not all(np.isfinite(e) and e < self.tolerance for e in self.errors.values()):
            return False
        # too many kink-straddling coordinates means nothing was really checked
        return all(self.checked[k] > 0 for k in self.checked)

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            flag = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{name}: max_rel_err={err:.3e} checked={self.checked[name]} "
                       f"skipped={self.skipped[name]} {flag}")
        return out


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(fn: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
              tolerance: float = 1e-4, step: float = 1e-5, max_coords: int | None = 20,
              seed: int = 0, floor: float = 1e-6) -> GradcheckReport:
    """Compare backprop gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current values of ``params`` on
    every call. At most ``max_coords`` randomly chosen coordinates per
    parameter are probed (all of them when None). A coordinate whose central
    difference at ``step`` disagrees with the one at ``step / 2`` straddles a
    ReLU / max-pool kink; it is skipped and counted rather than compared.
    """
    if not isinstance(params, dict):
        params = {f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance)

    def central(p: Tensor, idx: tuple, h: float) -> float:
        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + h
            fp = fn().item()
            p.data[idx] = orig - h
            fm = fn().item()
        p.data[idx] = orig
        return (fp - fm) / (2 * h)

    for name, p in params.items():
        flat = np.arange(p.data.size)
        if max_coords is not None and flat.size > max_coords:
            flat = rng.choice(flat, size=max_coords, replace=False)
        worst, checked, skipped = 0.0, 0, 0
        for k in flat:
            idx = np.unravel_index(int(k), p.data.shape)
            n1 = central(p, idx, step)
            n2 = central(p, idx, step / 2)
            if _rel_err(n1, n2, floor) > tolerance:
                skipped += 1
                continue
            worst = max(worst, _rel_err(float(analytic[name][idx]), n1, floor))
            checked += 1
        report.errors[name] = worst
        report.checked[name] = checked
        report.skipped[name] = skipped
    return report
