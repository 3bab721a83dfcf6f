"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; every differentiable operation optionally
records a node on the active tape.  The tape is a plain Python list that is
already in topological order (nodes are appended as they are created), so
``backward`` is a single reverse sweep with no graph search.

Broadcasting is deliberately restricted: binary elementwise ops accept a
Python scalar or an exactly-matching shape.  Anything wider must go through
an explicit ``expand``.  This keeps shape bugs loud in the bound-propagation
code, where a silently broadcast axis would produce a wrong-but-plausible
bound.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True

# Stack of active tapes; ops record on the innermost one.
_TAPE_STACK: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from Python data (f64 or f32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every operation."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tape:
    """Append-only record of operations, in creation (= topological) order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


@contextlib.contextmanager
def tape():
    """Context manager that activates a fresh tape for recording."""
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """n-dimensional array of reals, optionally attached to a tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_idx")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._idx: int | None = None
        _check_finite(arr, "tensor construction")

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing --------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def _tracked(self) -> bool:
        return self.requires_grad or (
            self._tape is not None and self._tape is _active_tape()
        )

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        return abs_(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    raise ContractError(f"cannot lift {type(x).__name__} to Tensor")


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    t = _active_tape()
    if t is not None and any(p._tracked() for p in parents):
        out._tape = t
        out._idx = len(t.nodes)
        t.nodes.append(_Node(parents, backward_fn))
    return out


def _will_record(*parents: Tensor) -> bool:
    return _active_tape() is not None and any(p._tracked() for p in parents)


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar recorded on a tape.  Repeated calls without
    zero_grad accumulate.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    t = loss._tape
    if t is None:
        raise ContractError("loss is not attached to a tape; build it inside `with tape():`")
    grads: list[np.ndarray | None] = [None] * len(t.nodes)
    grads[loss._idx] = np.ones_like(loss.data)
    for i in range(loss._idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = t.nodes[i]
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if p._tape is t and p._idx is not None:
                if grads[p._idx] is None:
                    grads[p._idx] = pg
                else:
                    grads[p._idx] = grads[p._idx] + pg
            elif p.requires_grad:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += pg
        grads[i] = None


def detach(t: Tensor) -> Tensor:
    """Same values, gradient flow severed."""
    return t.detach()


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    # scalar-with-tensor or exact-shape only
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    # collapse a gradient onto a scalar operand
    if grad.shape == tuple(shape):
        return grad
    return grad.sum().reshape(shape)


def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(
        out, (a, b),
        lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)),
    )


def div(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _binary_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    return _record(
        out, (a, b),
        lambda g: (
            _reduce_to(g / bd, a.shape),
            _reduce_to(-g * ad / (bd * bd), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def abs_(a: Tensor) -> Tensor:
    """Elementwise |a|; subgradient 0 at 0."""
    out = Tensor(np.abs(a.data))
    if not _will_record(a):
        return out
    s = np.sign(a.data)
    return _record(out, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    """Elementwise max(a, 0); subgradient 0 at 0."""
    out = Tensor(np.maximum(a.data, 0.0))
    if not _will_record(a):
        return out
    mask = (a.data > 0).astype(a.data.dtype)
    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape operations
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))
    old = a.shape
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs ndim >= 2, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes (and missing leading axes) up to ``shape``."""
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise DimensionError(f"expand: {a.shape} -> {shape}: {e}") from None
    out = Tensor(np.ascontiguousarray(data))
    old = a.shape

    def bwd(g):
        extra = g.ndim - len(old)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(old) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record(out, (a,), bwd)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(a.data.sum())
        shape = a.shape
        dtype = a.data.dtype
        return _record(out, (a,), lambda g: (np.full(shape, g, dtype=dtype),))
    out = Tensor(a.data.sum(axis=axis))
    ax = axis if axis >= 0 else axis + a.ndim
    n = a.shape[ax]
    return _record(
        out, (a,),
        lambda g: (np.repeat(np.expand_dims(g, ax), n, axis=ax),),
    )


def mean(a: Tensor) -> Tensor:
    return mul(sum_(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports (m,k)@(k,n), (B,m,k)@(k,n) and (B,m,k)@(B,k,n)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")
    if a.ndim > 3 or b.ndim > 3 or (a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: unsupported batching {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if ga.ndim > len(ad.shape):
            ga = ga.sum(axis=tuple(range(ga.ndim - ad.ndim)))
        if gb.ndim > len(bd.shape):
            gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
        return (ga, gb)

    return _record(out, (a, b), bwd)


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` of x, broadcasting over all other axes."""
    if b.ndim != 1:
        raise DimensionError(f"add_bias: bias must be 1-D, got {b.shape}")
    ax = axis if axis >= 0 else axis + x.ndim
    if x.shape[ax] != b.shape[0]:
        raise DimensionError(f"add_bias: axis {axis} of {x.shape} != bias {b.shape}")
    view = [1] * x.ndim
    view[ax] = b.shape[0]
    out = Tensor(x.data + b.data.reshape(view))
    other_axes = tuple(i for i in range(x.ndim) if i != ax)
    return _record(out, (x, b), lambda g: (g, g.sum(axis=other_axes)))


# ---------------------------------------------------------------------------
# convolution (valid padding, cross-correlation)
# ---------------------------------------------------------------------------

def conv_output_hw(in_hw, kernel_hw, stride: int):
    h = (in_hw[0] - kernel_hw[0]) // stride + 1
    w = (in_hw[1] - kernel_hw[1]) // stride + 1
    if h < 1 or w < 1:
        raise DimensionError(
            f"kernel {kernel_hw} with stride {stride} larger than input {in_hw}"
        )
    return h, w


def _conv_fwd(x: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    n, c, hin, win = x.shape
    f, ck, kh, kw = k.shape
    hout, wout = conv_output_hw((hin, win), (kh, kw), stride)
    out = np.zeros((n, f, hout, wout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride]
            out += np.einsum("nchw,fc->nfhw", patch, k[:, :, i, j], optimize=True)
    return out


def _conv_adj(y: np.ndarray, k: np.ndarray, stride: int, out_hw) -> np.ndarray:
    # exact adjoint of _conv_fwd with the same kernel/stride
    n, f, hout, wout = y.shape
    _, c, kh, kw = k.shape
    hin, win = out_hw
    out = np.zeros((n, c, hin, win), dtype=y.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += (
                np.einsum("nfhw,fc->nchw", y, k[:, :, i, j], optimize=True)
            )
    return out


def _conv_kgrad(x: np.ndarray, gy: np.ndarray, stride: int, kh: int, kw: int) -> np.ndarray:
    n, c, hin, win = x.shape
    _, f, hout, wout = gy.shape
    gk = np.zeros((f, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride]
            gk[:, :, i, j] = np.einsum("nfhw,nchw->fc", gy, patch, optimize=True)
    return gk


def conv2d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Strided valid cross-correlation of [N,C,H,W] with [F,C,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D input/kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: channels {x.shape[1]} != kernel {kernel.shape[1]}")
    stride = int(stride)
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    out = Tensor(_conv_fwd(x.data, kernel.data, stride))
    xd, kd = x.data, kernel.data
    in_hw = (x.shape[2], x.shape[3])
    kh, kw = kernel.shape[2], kernel.shape[3]
    return _record(
        out, (x, kernel),
        lambda g: (_conv_adj(g, kd, stride, in_hw), _conv_kgrad(xd, g, stride, kh, kw)),
    )


def conv2d_transpose(y: Tensor, kernel: Tensor, stride: int, out_hw) -> Tensor:
    """Exact adjoint of conv2d: [N,F,H',W'] x [F,C,kh,kw] -> [N,C,H,W]."""
    if y.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d_transpose: need 4-D input/kernel, got {y.shape}, {kernel.shape}")
    if y.shape[1] != kernel.shape[0]:
        raise DimensionError(f"conv2d_transpose: filters {y.shape[1]} != kernel {kernel.shape[0]}")
    stride = int(stride)
    out_hw = (int(out_hw[0]), int(out_hw[1]))
    expect = conv_output_hw(out_hw, (kernel.shape[2], kernel.shape[3]), stride)
    if expect != (y.shape[2], y.shape[3]):
        raise DimensionError(
            f"conv2d_transpose: out_hw {out_hw} is inconsistent with input {y.shape}"
        )
    out = Tensor(_conv_adj(y.data, kernel.data, stride, out_hw))
    yd, kd = y.data, kernel.data
    kh, kw = kernel.shape[2], kernel.shape[3]

    def bwd(g):
        gy = _conv_fwd(g, kd, stride)
        gk = _conv_kgrad(g, yd, stride, kh, kw)
        return (gy, gk)

    return _record(out, (y, kernel), bwd)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[y], max-subtracted."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [N, n], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    out = Tensor(-logp[np.arange(n), labels].mean())
    softmax = ez / sez

    def bwd(g):
        gl = softmax.copy()
        gl[np.arange(n), labels] -= 1.0
        return (gl * (g / n),)

    return _record(out, (logits,), bwd)
