"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: each primitive stores its parent tensors and a
backward closure on the output, so the executed-op record is the implicit
DAG of parent links. ``backward()`` on a scalar loss walks that DAG once in
reverse topological order and accumulates gradients into every reachable
``requires_grad`` leaf. Intermediate gradients live in a scratch table
during the walk and are never stored on tensors, which keeps repeated
``backward()`` calls additive on the leaves.

Conventions fixed here because tests depend on them:

* everything is float64;
* ``conv2d`` computes cross-correlation (zero padding, no kernel flip);
* ReLU's subgradient at exactly 0 is 0;
* ``maxpool2x2`` routes the gradient to the first maximum in row-major
  window order when a window has ties.

Tensors and the graphs they form are confined to a single thread; the
grad-enabled flag is thread-local so independent graphs on independent
threads do not interfere.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, ShapeError

_state = threading.local()


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forwards become constants)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """n-dimensional float64 array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A constant tensor sharing this tensor's data."""
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"{what} contains NaN/Inf")
        return self

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _record(out_data, parents, backward_fn):
    out = Tensor(out_data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _toposort(root):
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls accumulate into existing leaf grads.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any requires_grad tensor")
    order = _toposort(loss)
    scratch = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = scratch.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            scratch[key] = pg if key not in scratch else scratch[key] + pg


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# -- elementwise and structural primitives ------------------------------

def add(a, b):
    _check_same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add_scalar(a, s):
    return _record(a.data + s, (a,), lambda g: (g,))


def mul_scalar(a, s):
    return _record(a.data * s, (a,), lambda g: (g * s,))


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def tsum(a, axis=None):
    """Sum over all elements (scalar output) or over one axis."""
    if axis is None:
        shape = a.data.shape
        return _record(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape),))
    ax = int(axis)
    shape = a.data.shape

    def _bwd(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape),)

    return _record(a.data.sum(axis=ax), (a,), _bwd)


def reshape(a, shape):
    in_shape = a.data.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),))


def relu(a):
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# -- network primitives --------------------------------------------------

@dataclass(frozen=True)
class ConvKernel:
    """A conv layer's parameters plus its geometry."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        w, b = self.weight.data, self.bias.data
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d (c_out,c_in,kh,kw), got {w.shape}")
        cout, _, kh, kw = w.shape
        if cout < 1 or kh < 1 or kw < 1:
            raise ShapeError(f"conv weight extents must be positive, got {w.shape}")
        if b.shape != (cout,):
            raise ShapeError(f"conv bias must have shape ({cout},), got {b.shape}")
        if self.stride < 1 or self.pad < 0:
            raise ConfigError(f"illegal stride/pad ({self.stride}, {self.pad})")


def conv2d(x, kernel):
    """Cross-correlate a (B,Ci,H,W) batch with ``kernel``; bias broadcast over space."""
    w, b = kernel.weight, kernel.bias
    stride, pad = kernel.stride, kernel.pad
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (B,C,H,W), got {x.data.shape}")
    bsz, cin, h, win = x.data.shape
    cout, wcin, kh, kw = w.data.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {wcin}")
    for extent, k in ((h, kh), (win, kw)):
        span = extent + 2 * pad - k
        if span < 0 or span % stride != 0:
            raise ConfigError(
                f"conv2d: output extent ({extent} + 2*{pad} - {k})/{stride} + 1 "
                "is not a positive integer"
            )
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = _kernels.conv2d_forward(xd, wd, np.ascontiguousarray(b.data), stride, pad)

    def _bwd(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.conv2d_backward_input(g, wd, xd.shape, stride, pad) if x.requires_grad else None
        gw = _kernels.conv2d_backward_weight(g, xd, wd.shape, stride, pad) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return (gx, gw, gb)

    return _record(out, (x, w, b), _bwd)


def maxpool2x2(x):
    """2x2 max pooling with stride 2; spatial extents must be even."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 input must be 4-d, got {x.data.shape}")
    bsz, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(bsz, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(bsz, c, ho, wo, 4)
    idx = windows.argmax(axis=4)
    out = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]

    def _bwd(g):
        gw = np.zeros((bsz, c, ho, wo, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=4)
        gw = gw.reshape(bsz, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(bsz, c, h, w),)

    return _record(out, (x,), _bwd)


def global_avg_pool(x):
    """(B,C,H,W) -> (B,C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-d, got {x.data.shape}")
    bsz, c, h, w = x.data.shape

    def _bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (bsz, c, h, w)),)

    return _record(x.data.mean(axis=(2, 3)), (x,), _bwd)


def linear(x, weight, bias):
    """x (B,F_in) @ weight (F_out,F_in)^T + bias; >2-d inputs are flattened."""
    xt = x
    if x.data.ndim > 2:
        xt = reshape(x, (x.data.shape[0], -1))
    elif x.data.ndim != 2:
        raise ShapeError(f"linear input must be at least 2-d, got {x.data.shape}")
    fout, fin = weight.data.shape
    if xt.data.shape[1] != fin:
        raise ShapeError(f"linear: input has {xt.data.shape[1]} features but weight expects {fin}")
    if bias.data.shape != (fout,):
        raise ShapeError(f"linear bias must have shape ({fout},), got {bias.data.shape}")
    xd = xt.data

    def _bwd(g):
        gx = g @ weight.data if xt.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return (gx, gw, gb)

    return _record(xd @ weight.data.T + bias.data, (xt, weight, bias), _bwd)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (B,K), got {logits.data.shape}")
    bsz, k = logits.data.shape
    if k < 2:
        raise ShapeError(f"softmax_cross_entropy needs K >= 2 classes, got {k}")
    labels = np.asarray(labels)
    if labels.shape != (bsz,):
        raise ShapeError(f"labels must have shape ({bsz},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(bsz), labels].mean()

    def _bwd(g):
        d = p.copy()
        d[np.arange(bsz), labels] -= 1.0
        return (d * (g / bsz),)

    return _record(np.asarray(loss), (logits,), _bwd)


def softmax_probs(logits_data):
    """Row softmax of a plain (B,K) array (no graph); used for 10-crop averaging."""
    z = logits_data - logits_data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)
