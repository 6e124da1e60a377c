"""Dense tensors with a reverse-mode gradient tape.

The op set is deliberately small: exactly what the distillation losses and
the attention blocks in this package need. Data is stored as float64
``numpy`` arrays; 32-bit precision only appears at the file boundary
(see :mod:`vfm4sdg.io`).

Gradients accumulate into leaf tensors (tensors created directly, not by
an op). Repeated :func:`backward` calls keep accumulating until
:func:`zero_grad` resets the leaves, which matches multi-term loss
composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DimensionMismatch

_MODULE = "tensor"

Array = np.ndarray


class Tensor:
    """A dense array plus its position in the gradient tape.

    ``_parents`` and ``_vjp`` describe how this value was computed;
    leaves have neither. ``_vjp`` maps the output gradient to a list of
    ``(parent, gradient_contribution)`` pairs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _vjp: Optional[Callable[[Array], list]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Thin operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    """Wrap ``x`` as a Tensor; passes existing tensors through unchanged."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)


def _node(data: Array, parents: Sequence[Tensor], vjp: Callable[[Array], list]) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(_MODULE, f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: [(a, g), (b, g)])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: [(a, g), (b, -g)])


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a Python scalar."""
    if np.isscalar(a) and not isinstance(a, Tensor):
        return scale(as_tensor(b), float(a))
    if np.isscalar(b) and not isinstance(b, Tensor):
        return scale(as_tensor(a), float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: [(a, g * b.data), (b, g * a.data)])


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _node(a.data * s, (a,), lambda g: [(a, g * s)])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionMismatch(
            _MODULE, f"matmul: expected 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(
            _MODULE, f"matmul: inner dimensions disagree for {a.shape} x {b.shape}"
        )
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: [(a, g @ b.data.T), (b, a.data.T @ g)],
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionMismatch(_MODULE, f"transpose: expected 2-D, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: [(a, g.T)])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: [(a, g.reshape(old))])


def rows(a, start: int, stop: int) -> Tensor:
    """Slice rows ``[start, stop)`` of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionMismatch(_MODULE, f"rows: expected 2-D, got {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return [(a, full)]

    return _node(a.data[start:stop].copy(), (a,), vjp)


def cols(a, start: int, stop: int) -> Tensor:
    """Slice columns ``[start, stop)`` of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionMismatch(_MODULE, f"cols: expected 2-D, got {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return [(a, full)]

    return _node(a.data[:, start:stop].copy(), (a,), vjp)


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def vjp(g):
        return [(p, g[:, offsets[i]: offsets[i + 1]]) for i, p in enumerate(parts)]

    return _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp)


def add_bias(x, b) -> Tensor:
    """Add a length-d bias vector to every row of an n x d tensor."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.shape != (x.shape[1],):
        raise DimensionMismatch(
            _MODULE, f"add_bias: incompatible shapes {x.shape} and {b.shape}"
        )
    return _node(
        x.data + b.data[None, :],
        (x, b),
        lambda g: [(x, g), (b, g.sum(axis=0))],
    )


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return _node(
        np.asarray(a.data.sum()),
        (a,),
        lambda g: [(a, np.full(a.shape, float(g)))],
    )


def clip_passthrough(a, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi] without touching the gradient.

    Intended for snapping floating-point overshoot (a few ulps past a
    mathematically guaranteed range) back inside; the correction is at
    machine-epsilon scale, so the identity gradient is exact to that
    order.
    """
    a = as_tensor(a)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: [(a, g)])


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _node(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: [(a, np.full(a.shape, float(g) / n))],
    )


# ---------------------------------------------------------------------------
# normalizations and losses
# ---------------------------------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row maximum."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionMismatch(_MODULE, f"softmax_rows: expected 2-D, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return [(x, y * (g - dot))]

    return _node(y, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ContractViolation(_MODULE, f"layer_norm: eps must be > 0, got {eps}")
    if x.data.ndim != 2:
        raise DimensionMismatch(_MODULE, f"layer_norm: expected 2-D, got {x.shape}")
    d = x.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionMismatch(
            _MODULE,
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}",
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    y = xhat * gain.data[None, :] + bias.data[None, :]

    def vjp(g):
        dxhat = g * gain.data[None, :]
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return [(x, dx), (gain, (g * xhat).sum(axis=0)), (bias, g.sum(axis=0))]

    return _node(y, (x, gain, bias), vjp)


def l2_normalize_columns(x, eps: float = 1e-12) -> Tensor:
    """Scale each column to unit Euclidean norm; all-zero columns stay zero."""
    x = as_tensor(x)
    if eps <= 0:
        raise ContractViolation(_MODULE, f"l2_normalize_columns: eps must be > 0, got {eps}")
    if x.data.ndim != 2:
        raise DimensionMismatch(
            _MODULE, f"l2_normalize_columns: expected 2-D, got {x.shape}"
        )
    norms = np.sqrt((x.data * x.data).sum(axis=0, keepdims=True))
    denom = np.maximum(norms, eps)
    z = x.data / denom

    def vjp(g):
        # Where the norm is above eps the denominator depends on x; below,
        # it is the constant eps and the map is plain scaling.
        proj = (z * g).sum(axis=0, keepdims=True) * (norms > eps)
        return [(x, (g - z * proj) / denom)]

    return _node(z, (x,), vjp)


def smooth_l1(pred, target, beta: float = 1.0, mask: Optional[Array] = None) -> Tensor:
    """Mean smooth-L1 (Huber-style) loss over all elements.

    Quadratic ``0.5 d^2 / beta`` for ``|d| < beta``, linear
    ``|d| - 0.5 beta`` beyond; both branches agree in value and slope at
    the knee. ``mask`` restricts both the sum and the denominator to the
    selected elements.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if beta <= 0:
        raise ContractViolation(_MODULE, f"smooth_l1: beta must be > 0, got {beta}")
    _same_shape(pred, target, "smooth_l1")
    d = pred.data - target.data
    quad = np.abs(d) < beta
    per = np.where(quad, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)
    if mask is None:
        count = per.size
        value = per.mean()
        dloss = np.where(quad, d / beta, np.sign(d)) / count
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != pred.shape:
            raise DimensionMismatch(
                _MODULE, f"smooth_l1: mask shape {m.shape} does not match {pred.shape}"
            )
        count = int(m.sum())
        if count == 0:
            raise ContractViolation(_MODULE, "smooth_l1: mask selects no elements")
        value = per[m].sum() / count
        dloss = np.where(quad, d / beta, np.sign(d)) * m / count

    def vjp(g):
        gd = float(g) * dloss
        return [(pred, gd), (target, -gd)]

    return _node(np.asarray(value), (pred, target), vjp)


# ---------------------------------------------------------------------------
# spatial resampling (feature maps are C x H x W)
# ---------------------------------------------------------------------------


def _pool_window(i: int, size_in: int, size_out: int) -> tuple:
    lo = (i * size_in) // size_out
    hi = -(-((i + 1) * size_in) // size_out)  # ceil division
    return lo, hi


def adaptive_avg_pool2d(x, out_hw: tuple) -> Tensor:
    """Average-pool a C x H x W map to C x H_out x W_out.

    Output cell (i, j) averages the input window
    [floor(i*H/H_out), ceil((i+1)*H/H_out)) x [floor(j*W/W_out), ceil((j+1)*W/W_out)),
    which tiles the input exactly when the ratios are integer.
    """
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionMismatch(_MODULE, f"adaptive_avg_pool2d: expected 3-D, got {x.shape}")
    c, h, w = x.shape
    ho, wo = int(out_hw[0]), int(out_hw[1])
    if ho < 1 or wo < 1:
        raise ContractViolation(_MODULE, f"adaptive_avg_pool2d: bad target {out_hw}")
    out = np.empty((c, ho, wo), dtype=np.float64)
    windows = []
    for i in range(ho):
        r0, r1 = _pool_window(i, h, ho)
        for j in range(wo):
            c0, c1 = _pool_window(j, w, wo)
            out[:, i, j] = x.data[:, r0:r1, c0:c1].mean(axis=(1, 2))
            windows.append((i, j, r0, r1, c0, c1))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i, j, r0, r1, c0, c1 in windows:
            gx[:, r0:r1, c0:c1] += g[:, i, j][:, None, None] / ((r1 - r0) * (c1 - c0))
        return [(x, gx)]

    return _node(out, (x,), vjp)


def _bilinear_axis(size_in: int, size_out: int) -> tuple:
    # align_corners=False source coordinates, clamped to the valid range.
    src = (np.arange(size_out, dtype=np.float64) + 0.5) * (size_in / size_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0 = np.clip(i0, 0, size_in - 1)
    i1 = np.clip(i0 + 1, 0, size_in - 1)
    # When both neighbours clamp to the same cell the weight is irrelevant;
    # zero it so edge cells are reproduced exactly.
    frac = np.where(i1 == i0, 0.0, np.clip(frac, 0.0, 1.0))
    return i0, i1, frac


def bilinear_resize(x, out_hw: tuple) -> Tensor:
    """Bilinear resampling of a C x H x W map (align_corners=False)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionMismatch(_MODULE, f"bilinear_resize: expected 3-D, got {x.shape}")
    c, h, w = x.shape
    ho, wo = int(out_hw[0]), int(out_hw[1])
    if ho < 1 or wo < 1:
        raise ContractViolation(_MODULE, f"bilinear_resize: bad target {out_hw}")
    r0, r1, fr = _bilinear_axis(h, ho)
    c0, c1, fc = _bilinear_axis(w, wo)
    R0, C0 = r0[:, None], c0[None, :]
    R1, C1 = r1[:, None], c1[None, :]
    WR, WC = fr[:, None], fc[None, :]
    w00 = (1 - WR) * (1 - WC)
    w01 = (1 - WR) * WC
    w10 = WR * (1 - WC)
    w11 = WR * WC
    out = (
        w00 * x.data[:, R0, C0]
        + w01 * x.data[:, R0, C1]
        + w10 * x.data[:, R1, C0]
        + w11 * x.data[:, R1, C1]
    )

    def vjp(g):
        gx = np.zeros_like(x.data)
        ch = np.arange(c)[:, None, None]
        np.add.at(gx, (ch, R0[None], C0[None]), g * w00)
        np.add.at(gx, (ch, R0[None], C1[None]), g * w01)
        np.add.at(gx, (ch, R1[None], C0[None]), g * w10)
        np.add.at(gx, (ch, R1[None], C1[None]), g * w11)
        return [(x, gx)]

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every grad-requiring leaf."""
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise ContractViolation(_MODULE, "backward: loss must be a scalar tensor")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    flow: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            node.grad = g.copy() if node.grad is None else node.grad + g
        elif node._vjp is not None:
            for parent, contrib in node._vjp(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flow:
                    flow[key] = flow[key] + contrib
                else:
                    flow[key] = np.asarray(contrib, dtype=np.float64)


def zero_grad(*tensors: Tensor) -> None:
    for t in tensors:
        t.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_elements: int

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_error) and self.max_rel_error < self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` to central differences.

    ``f`` must map a tensor to a scalar tensor. Returns the maximum
    per-element relative deviation; the check passes when it is below
    ``tol``.
    """
    if step <= 0 or tol <= 0:
        raise ContractViolation(_MODULE, "grad_check: step and tol must be > 0")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.ndim != 0:
        raise ContractViolation(_MODULE, "grad_check: f must produce a scalar tensor")
    backward(out)
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad

    numeric = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        f_plus = float(f(Tensor(leaf.data.copy())).data)
        flat[idx] = orig - step
        f_minus = float(f(Tensor(leaf.data.copy())).data)
        flat[idx] = orig
        num_flat[idx] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel_error=max_rel, tol=tol, n_elements=flat.size)
