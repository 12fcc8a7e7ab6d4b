"""Reverse-mode automatic differentiation on numpy arrays.

A small tape: every operation on `Tensor` records its parents and a
vector-Jacobian product closure. `backward` walks the recorded graph in
reverse topological order and fills gradients on the requested leaves.
All math is float64; non-differentiable kinks (ReLU at 0, clamps) use
subgradient 0 at the kink.

The module-level functions (`exp`, `sum_`, `stack`, ...) dispatch on the
argument type, so the same forward code runs on plain numpy arrays (no
recording) or on Tensors (recorded).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NotRecorded(Exception):
    """Raised when backward() is asked for a value outside any recorded graph."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the autodiff graph wrapping a float64 numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # make `ndarray <op> Tensor` defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None

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

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- graph construction helpers ----------------------------------------
    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def _make(self, data, parents, vjp):
        return Tensor(data, parents=parents, vjp=vjp)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        out_data = self.data + other.data

        def vjp(g):
            return (_unbroadcast(g, self.data.shape),
                    _unbroadcast(g, other.data.shape))

        return self._make(out_data, (self, other), vjp)

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._lift(other)
        out_data = self.data - other.data

        def vjp(g):
            return (_unbroadcast(g, self.data.shape),
                    _unbroadcast(-g, other.data.shape))

        return self._make(out_data, (self, other), vjp)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data

        def vjp(g):
            return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))

        return self._make(a * b, (self, other), vjp)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data

        def vjp(g):
            return (_unbroadcast(g / b, a.shape),
                    _unbroadcast(-g * a / (b * b), b.shape))

        return self._make(a / b, (self, other), vjp)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        out = a ** exponent

        def vjp(g):
            return (g * exponent * a ** (exponent - 1),)

        return self._make(out, (self,), vjp)

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul requires >= 2-d operands")
        out = a @ b

        def vjp(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return self._make(out, (self, other), vjp)

    def __rmatmul__(self, other):
        return self._lift(other).__matmul__(self)

    # -- elementwise functions ------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return self._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return self._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return self._make(out, (self,), lambda g: (g * 0.5 / out,))

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return self._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self):
        mask = self.data > 0.0
        return self._make(self.data * mask, (self,), lambda g: (g * mask,))

    def abs(self):
        sign = np.sign(self.data)
        return self._make(np.abs(self.data), (self,), lambda g: (g * sign,))

    def clip(self, lo, hi):
        inside = (self.data >= lo) & (self.data <= hi)
        out = np.clip(self.data, lo, hi)
        return self._make(out, (self,), lambda g: (g * inside,))

    # -- reductions / shaping ---------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self.data
        out = a.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._make(out, (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        a = self.data
        if axis is None:
            count = a.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([a.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / count

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self.data
        return self._make(a.reshape(shape), (self,),
                          lambda g: (g.reshape(a.shape),))

    def ravel(self):
        return self.reshape(-1)

    def swapaxes(self, ax1, ax2):
        return self._make(np.swapaxes(self.data, ax1, ax2), (self,),
                          lambda g: (np.swapaxes(g, ax1, ax2),))

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ValueError(".T only supported for 2-d tensors")
        return self.swapaxes(0, 1)

    def __getitem__(self, idx):
        a = self.data

        def vjp(g):
            full = np.zeros_like(a)
            np.add.at(full, idx, g)
            return (full,)

        return self._make(a[idx], (self,), vjp)

    # -- backward -----------------------------------------------------------
    def backward(self, seed=None):
        """Accumulate gradients into `.grad` of every requiring node."""
        if not self.requires_grad:
            raise NotRecorded("value does not depend on any recorded parameter")
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar loss")
            seed = np.ones_like(self.data)

        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# ---------------------------------------------------------------------------
# Dispatching functional API: works on Tensors (recorded) and numpy (plain).
# ---------------------------------------------------------------------------

def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def asdata(x) -> np.ndarray:
    """Underlying numpy array of a Tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def exp(x):
    return x.exp() if is_tensor(x) else np.exp(x)


def log(x):
    return x.log() if is_tensor(x) else np.log(x)


def sqrt(x):
    return x.sqrt() if is_tensor(x) else np.sqrt(x)


def sigmoid(x):
    if is_tensor(x):
        return x.sigmoid()
    return 1.0 / (1.0 + np.exp(-x))


def relu(x):
    return x.relu() if is_tensor(x) else np.maximum(x, 0.0)


def absval(x):
    return x.abs() if is_tensor(x) else np.abs(x)


def clip(x, lo, hi):
    return x.clip(lo, hi) if is_tensor(x) else np.clip(x, lo, hi)


def sum_(x, axis=None, keepdims=False):
    return x.sum(axis=axis, keepdims=keepdims) if is_tensor(x) \
        else np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return x.mean(axis=axis, keepdims=keepdims) if is_tensor(x) \
        else np.mean(x, axis=axis, keepdims=keepdims)


def reshape(x, shape):
    return x.reshape(shape) if is_tensor(x) else np.reshape(x, shape)


def where(cond, a, b):
    """Select by a boolean (non-differentiated) condition."""
    cond = np.asarray(cond, dtype=bool)
    if not (is_tensor(a) or is_tensor(b)):
        return np.where(cond, a, b)
    a_t, b_t = Tensor._lift(a), Tensor._lift(b)
    out = np.where(cond, a_t.data, b_t.data)

    def vjp(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a_t.data.shape),
                _unbroadcast(np.where(cond, 0.0, g), b_t.data.shape))

    return Tensor(out, parents=(a_t, b_t), vjp=vjp)


def concatenate(parts, axis=0):
    if not any(is_tensor(p) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [Tensor._lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, parents=tuple(parts), vjp=vjp)


def stack(parts, axis=0):
    if not any(is_tensor(p) for p in parts):
        return np.stack(parts, axis=axis)
    parts = [Tensor._lift(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return Tensor(out, parents=tuple(parts), vjp=vjp)


def matmul(a, b):
    if is_tensor(a) or is_tensor(b):
        return Tensor._lift(a) @ Tensor._lift(b)
    return a @ b


def bmv(mats, vecs):
    """Batched matrix-vector product: (..., m, n) x (..., n) -> (..., m).

    Batch dims broadcast. The VJP contracts broadcast dims with einsum
    instead of materializing the full outer product, which matters when a
    small parameter tensor feeds a large pose batch.
    """
    m_d, v_d = asdata(mats), asdata(vecs)
    out = np.matmul(m_d, v_d[..., None])[..., 0]
    if not (is_tensor(mats) or is_tensor(vecs)):
        return out
    mats_t, vecs_t = Tensor._lift(mats), Tensor._lift(vecs)

    def vjp(g):
        g_vecs = _unbroadcast(np.matmul(np.swapaxes(m_d, -1, -2),
                                        g[..., None])[..., 0], v_d.shape)
        vb = np.broadcast_to(v_d, g.shape[:-1] + v_d.shape[-1:])
        extra = g.ndim + 1 - m_d.ndim
        if extra > 0:
            lead = int(np.prod(g.shape[:extra], dtype=np.int64))
            g2 = g.reshape((lead,) + g.shape[extra:])
            v2 = vb.reshape((lead,) + vb.shape[extra:])
            g_mats = _unbroadcast(np.einsum("e...m,e...d->...md", g2, v2),
                                  m_d.shape)
        else:
            g_mats = _unbroadcast(g[..., :, None] * vb[..., None, :], m_d.shape)
        return g_mats, g_vecs

    return Tensor(out, parents=(mats_t, vecs_t), vjp=vjp)


def gather_rows(x, idx: np.ndarray):
    """Row gather x[idx] for a 1-D *unique* index array; the VJP scatters
    with direct fancy-index assignment (much faster than np.add.at)."""
    idx = np.asarray(idx, dtype=np.intp)
    if not is_tensor(x):
        return x[idx]
    data = x.data

    def vjp(g):
        full = np.zeros_like(data)
        full[idx] = g
        return (full,)

    return Tensor(data[idx], parents=(x,), vjp=vjp)


def dot(a, b, axis=-1, keepdims=False):
    return sum_(a * b, axis=axis, keepdims=keepdims)


def norm(x, axis=-1, keepdims=False, eps=0.0):
    """L2 norm along an axis; `eps` guards the sqrt subgradient at zero."""
    q = sum_(x * x, axis=axis, keepdims=keepdims)
    if eps:
        q = q + eps
    return sqrt(q)


def cross(a, b):
    """Cross product on the last axis (size 3)."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by,
                  az * bx - ax * bz,
                  ax * by - ay * bx], axis=-1)


def constant(x):
    """Detach: a plain array copy of the current value."""
    return asdata(x).copy()


# ---------------------------------------------------------------------------
# Parameter sets and the finite-difference validator.
# ---------------------------------------------------------------------------

class ParamSet:
    """Named groups of leaf tensors, e.g. ``{"mu": Tensor, "sh": Tensor}``.

    Leaves keep their insertion order, which fixes the (deterministic)
    iteration order of optimizers and of the finite-difference sweep.
    """

    def __init__(self, leaves: dict | None = None):
        self.leaves: dict[str, Tensor] = {}
        if leaves:
            for name, value in leaves.items():
                self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self.leaves[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.leaves[name]

    def __contains__(self, name: str) -> bool:
        return name in self.leaves

    def __iter__(self):
        return iter(self.leaves.items())

    def names(self):
        return list(self.leaves)

    def zero_grad(self):
        for t in self.leaves.values():
            t.zero_grad()

    def num_scalars(self) -> int:
        return sum(t.size for t in self.leaves.values())


def backward(loss, params: ParamSet) -> ParamSet:
    """Fill gradients of `params` from a recorded scalar `loss`.

    Leaves that do not influence the loss get an exact-zero gradient.
    Raises NotRecorded if `loss` was not produced from recorded tensors.
    """
    if not isinstance(loss, Tensor):
        raise NotRecorded("loss is not a recorded tensor")
    params.zero_grad()
    loss.backward()
    return params


@dataclass
class FdLeafReport:
    name: str
    max_rel_err: float
    max_abs_analytic: float
    zero_grad: bool


@dataclass
class FdReport:
    """Result of a finite-difference validation sweep."""
    leaves: list[FdLeafReport] = field(default_factory=list)
    worst_leaf: str = ""
    max_rel_err: float = 0.0

    @property
    def zero_grad_leaves(self):
        return [r.name for r in self.leaves if r.zero_grad]


def fd_check(loss_fn, params: ParamSet, h: float = 1e-5) -> FdReport:
    """Compare analytic gradients against central finite differences.

    `loss_fn(params)` must rebuild the forward pass from the current leaf
    values and return a scalar Tensor. Relative error per scalar is
    |g - g_fd| / max(1, |g|, |g_fd|); the report carries the worst leaf and
    flags leaves whose analytic gradient is identically zero (e.g. blocked
    by a ReLU sitting at 0) instead of failing on them.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    loss = loss_fn(params)
    backward(loss, params)
    analytic = {name: t.grad.copy() for name, t in params}

    report = FdReport()
    for name, leaf in params:
        flat = leaf.data.ravel()
        g_ana = analytic[name].ravel()
        max_rel = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            lo_hi = float(asdata(loss_fn(params)))
            flat[i] = keep - h
            lo_lo = float(asdata(loss_fn(params)))
            flat[i] = keep
            g_fd = (lo_hi - lo_lo) / (2.0 * h)
            rel = abs(g_ana[i] - g_fd) / max(1.0, abs(g_ana[i]), abs(g_fd))
            max_rel = max(max_rel, rel)
        rep = FdLeafReport(
            name=name,
            max_rel_err=max_rel,
            max_abs_analytic=float(np.max(np.abs(g_ana))) if g_ana.size else 0.0,
            zero_grad=bool(np.all(g_ana == 0.0)),
        )
        report.leaves.append(rep)
        if max_rel >= report.max_rel_err:
            report.max_rel_err = max_rel
            report.worst_leaf = name
    return report
