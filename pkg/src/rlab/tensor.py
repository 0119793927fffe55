"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is taped implicitly: every op records its parents and a closure
that pushes the output gradient back onto them.  `backward` walks the graph
once in reverse topological order.  All storage is 64-bit; forward passes
are bit-deterministic for identical inputs.

Layer ops accept a single sample (conv: [C,H,W], linear: [n]) or a leading
batch axis; gradients keep whichever layout the input used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray


class Tensor:
    """A float64 array plus the autograd bookkeeping attached to it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: Array, parents: tuple["Tensor", ...], op: str,
                vjp: Callable[[Array], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out._parents = parents
            out._vjp = vjp
        return out

    def _accum(self, g: Array) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- introspection --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op}{flag})"

    # -- arithmetic ------------------------------------------------------------

    def _coerce(self, other) -> "Tensor | float":
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape and other.data.size != 1 and self.data.size != 1:
                raise ShapeError(
                    f"elementwise op needs matching shapes, got {self.data.shape} and {other.data.shape}")
            return other
        return float(other)

    def __add__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            def vjp(g, a=self, b=other):
                a._accum(g)
                b._accum(g)
            return Tensor._result(self.data + other.data, (self, other), "add", vjp)

        def vjp(g, a=self):
            a._accum(g)
        return Tensor._result(self.data + other, (self,), "add", vjp)

    __radd__ = __add__

    def __neg__(self):
        def vjp(g, a=self):
            a._accum(-g)
        return Tensor._result(-self.data, (self,), "neg", vjp)

    def __sub__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            def vjp(g, a=self, b=other):
                a._accum(g)
                b._accum(-g)
            return Tensor._result(self.data - other.data, (self, other), "sub", vjp)

        def vjp(g, a=self):
            a._accum(g)
        return Tensor._result(self.data - other, (self,), "sub", vjp)

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            def vjp(g, a=self, b=other):
                a._accum(g * b.data)
                b._accum(g * a.data)
            return Tensor._result(self.data * other.data, (self, other), "mul", vjp)

        def vjp(g, a=self, c=other):
            a._accum(g * c)
        return Tensor._result(self.data * other, (self,), "mul", vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            def vjp(g, a=self, b=other):
                a._accum(g / b.data)
                b._accum(-g * a.data / (b.data * b.data))
            return Tensor._result(self.data / other.data, (self, other), "div", vjp)
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        c = float(other)

        def vjp(g, a=self):
            a._accum(-g * c / (a.data * a.data))
        return Tensor._result(c / self.data, (self,), "rdiv", vjp)

    def __pow__(self, n):
        if not isinstance(n, (int, float)) or isinstance(n, bool):
            raise ContractError("exponent must be a python number")
        n = float(n)

        def vjp(g, a=self):
            a._accum(g * n * a.data ** (n - 1.0))
        return Tensor._result(self.data ** n, (self,), "pow", vjp)

    # -- reductions and shape ops ----------------------------------------------

    def sum(self) -> "Tensor":
        def vjp(g, a=self):
            a._accum(np.broadcast_to(g, a.data.shape))
        return Tensor._result(np.sum(self.data), (self,), "sum", vjp)

    def mean(self) -> "Tensor":
        inv = 1.0 / self.data.size

        def vjp(g, a=self):
            a._accum(np.broadcast_to(g * inv, a.data.shape))
        return Tensor._result(np.mean(self.data), (self,), "mean", vjp)

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0.0):
            raise ContractError("sqrt needs non-negative input")
        out_data = np.sqrt(self.data)

        def vjp(g, a=self, od=out_data):
            a._accum(g * 0.5 / od)
        return Tensor._result(out_data, (self,), "sqrt", vjp)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def vjp(g, a=self):
            a._accum(g.reshape(a.data.shape))
        return Tensor._result(self.data.reshape(shape), (self,), "reshape", vjp)

    # -- backward ----------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad over the whole graph.

        self must be scalar; call sites own grad zeroing between passes.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        graph = trace(self)
        self._accum(np.ones_like(self.data))
        for node in reversed(graph.nodes):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)


@dataclass
class ComputeGraph:
    """Nodes of one backward pass, parents strictly before children."""

    nodes: list[Tensor]


def trace(root: Tensor) -> ComputeGraph:
    """Topologically order every grad-requiring node reachable from root."""
    nodes: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            nodes.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return ComputeGraph(nodes)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along an existing axis; gradient splits back by the input widths."""
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    datas = [t.data for t in tensors]
    widths = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + widths)

    def vjp(g, ts=tuple(tensors), offs=offsets, ax=axis):
        for t, lo, hi in zip(ts, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            t._accum(g[tuple(idx)])
    return Tensor._result(np.concatenate(datas, axis=axis), tuple(tensors), "concat", vjp)


# -- layer ops -------------------------------------------------------------------


def _im2col(x: Array, kh: int, kw: int) -> tuple[Array, int, int]:
    # [N,C,H,W] -> ([N*H'*W', C*kh*kw], H', W') for stride-1 valid windows.
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    n, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _corr2d(x: Array, kern: Array) -> tuple[Array, Array]:
    o, c, kh, kw = kern.shape
    cols, ho, wo = _im2col(x, kh, kw)
    out = cols @ kern.reshape(o, c * kh * kw).T
    return out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Valid cross-correlation, stride 1, no bias.

    x: [C_in,H,W] or [N,C_in,H,W]; kernels: [C_out,C_in,kh,kw].
    Output spatial size is (H-kh+1, W-kw+1).
    """
    if kernels.data.ndim != 4:
        raise ShapeError(f"kernels must be rank 4, got rank {kernels.data.ndim}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"input must be rank 3 or 4, got rank {x.data.ndim}")
    co, ci, kh, kw = kernels.data.shape
    if xd.shape[1] != ci:
        raise ShapeError(f"channel axis mismatch: input has {xd.shape[1]}, kernels expect {ci}")
    if kh > xd.shape[2] or kw > xd.shape[3]:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {xd.shape[2]}x{xd.shape[3]}")

    out, cols = _corr2d(xd, kernels.data)

    def vjp(g, x=x, kernels=kernels, cols=cols, squeeze=squeeze,
            co=co, kh=kh, kw=kw):
        g4 = g[None] if squeeze else g
        if kernels.requires_grad:
            gm = g4.transpose(0, 2, 3, 1).reshape(-1, co)
            kernels._accum((gm.T @ cols).reshape(kernels.data.shape))
        if x.requires_grad:
            gp = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            kt = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dx, _ = _corr2d(gp, np.ascontiguousarray(kt))
            x._accum(dx[0] if squeeze else dx)

    return Tensor._result(out[0] if squeeze else out, (x, kernels), "conv2d", vjp)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Square max pooling, floor output size.

    Gradient routes to the first maximal element of each window in row-major
    order; overlapping windows accumulate.
    """
    if window < 1 or stride < 1:
        raise ContractError(f"window and stride must be >= 1, got {window}, {stride}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"input must be rank 3 or 4, got rank {x.data.ndim}")
    n, c, h, w = xd.shape
    if window > h or window > w:
        raise ShapeError(f"window {window} larger than spatial axes {h}x{w}")

    win = np.lib.stride_tricks.sliding_window_view(xd, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, :: stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g, x=x, idx=idx, squeeze=squeeze, shape=(n, c, h, w),
            window=window, stride=stride):
        if not x.requires_grad:
            return
        n, c, h, w = shape
        g4 = g[None] if squeeze else g
        ni, ci, oi, oj = np.indices(idx.shape)
        src_i = oi * stride + idx // window
        src_j = oj * stride + idx % window
        dx = np.zeros(shape)
        np.add.at(dx, (ni, ci, src_i, src_j), g4)
        x._accum(dx[0] if squeeze else dx)

    return Tensor._result(out[0] if squeeze else out, (x,), "maxpool2d", vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x [n] or [N,n], weight [m,n], bias [m] -> [m] or [N,m]."""
    if weight.data.ndim != 2:
        raise ShapeError(f"weight must be rank 2, got rank {weight.data.ndim}")
    m, nin = weight.data.shape
    if bias.data.shape != (m,):
        raise ShapeError(f"bias must have shape ({m},), got {bias.data.shape}")
    squeeze = x.data.ndim == 1
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 2:
        raise ShapeError(f"input must be rank 1 or 2, got rank {x.data.ndim}")
    if xd.shape[1] != nin:
        raise ShapeError(f"input width {xd.shape[1]} does not match weight width {nin}")

    out = xd @ weight.data.T + bias.data

    def vjp(g, x=x, weight=weight, bias=bias, xd=xd, squeeze=squeeze):
        g2 = g[None] if squeeze else g
        if weight.requires_grad:
            weight._accum(g2.T @ xd)
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            dx = g2 @ weight.data
            x._accum(dx[0] if squeeze else dx)

    return Tensor._result(out[0] if squeeze else out, (x, weight, bias), "linear", vjp)


# -- gradient oracle ---------------------------------------------------------------


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5, sample_limit: int | None = None,
                      seed: int = 0) -> float:
    """Compare autograd against central finite differences.

    loss_fn rebuilds the scalar loss from the current parameter values on
    every call.  Returns max over checked entries of
    |g_auto - g_fd| / max(|g_fd|, 1e-8).

    sample_limit caps the entries checked per parameter tensor (deterministic
    choice per seed); None checks every entry.
    """
    if h <= 0.0:
        raise ContractError("step h must be positive")
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    autos = []
    for i, p in enumerate(params):
        if not p.requires_grad:
            raise ContractError(f"parameter {i} does not require grad")
        autos.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, autos):
        flat = p.data.reshape(-1)
        n = flat.size
        if sample_limit is not None and n > sample_limit:
            coords = np.sort(rng.choice(n, size=sample_limit, replace=False))
        else:
            coords = np.arange(n)
        ga_flat = ga.reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            f_plus = loss_fn().item()
            flat[j] = orig - h
            f_minus = loss_fn().item()
            flat[j] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ga_flat[j] - g_fd) / max(abs(g_fd), 1e-8)
            if rel > worst:
                worst = rel
    zero_grads(params)
    return worst
