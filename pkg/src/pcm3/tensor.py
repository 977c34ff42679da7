"""A small float64 reverse-mode autodiff engine.

Every op returns a new :class:`Tensor`.  When grad recording is enabled and
any input requires grad, the output keeps a reference to its parents and a
closure mapping the output gradient to per-parent gradients.  Each recorded
node carries a monotonically increasing sequence number, so the tape of a
loss is simply the set of reachable nodes sorted by that number, and
:func:`backward` walks it in exact reverse recording order.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from .errors import ContractError, NumericDomainError, ShapeError

NORMALIZE_EPS = 1e-12

_seq = itertools.count()
_grad_enabled = True
# Fault-injection hook used by the verification suite: op kind -> grad multiplier.
_grad_faults: dict[str, float] = {}


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_grad_fault(kind: str, factor: float = 1.5):
    """Scale the backward rule of one op kind (verification harness only)."""
    _grad_faults[kind] = factor
    try:
        yield
    finally:
        _grad_faults.pop(kind, None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "kind", "_parents", "_backward", "_seq", "name")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected Tensor operator

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.kind = "leaf"
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, kind={self.kind})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind, data, parents, backward):
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericDomainError(f"non-finite value produced by op '{kind}'")
    out = Tensor(data)
    out.kind = kind
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scalar-mul", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by _record
        y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log of non-positive value")
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def stop_gradient(a) -> Tensor:
    """Identity forward; the result is a fresh leaf, so nothing flows back."""
    a = as_tensor(a)
    out = Tensor(a.data)
    out.kind = "stop_gradient"
    return out


# -- linear algebra and shape ----------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., n, k) or (k,) and ``b`` of shape (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def slice_(a, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    try:
        y = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None

    def backward(g):
        out = np.zeros_like(a.data)
        out[idx] += g
        return (out,)

    return _record("slice", y.copy(), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _record("reshape", y, (a,), lambda g: (g.reshape(a.shape),))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", y, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    y = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean", y, (a,), backward)


# -- last-axis reductions ---------------------------------------------------------


def rowdot(a, b) -> Tensor:
    """Dot products over the last axis, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"rowdot: shapes differ {a.shape} vs {b.shape}")
    return _record("rowdot", np.einsum("...i,...i->...", a.data, b.data), (a, b),
                   lambda g: (g[..., None] * b.data, g[..., None] * a.data))


def norm(a) -> Tensor:
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    a = as_tensor(a)
    n = np.sqrt(np.einsum("...i,...i->...", a.data, a.data))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n[..., None] > 0, a.data / safe[..., None], 0.0) * g[..., None],)

    return _record("norm", n, (a,), backward)


def l2_normalize(a) -> Tensor:
    a = as_tensor(a)
    sq = np.einsum("...i,...i->...", a.data, a.data)
    if np.any(np.sqrt(sq) <= NORMALIZE_EPS):
        raise NumericDomainError("l2_normalize of a zero-norm vector")
    n = np.sqrt(sq + NORMALIZE_EPS)[..., None]
    y = a.data / n

    def backward(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / n,)

    return _record("l2_normalize", y, (a,), backward)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", y, (a,), backward)


# -- fused recurrent op -------------------------------------------------------------


def gru(x, wx, wh, bx, bh, h0=None) -> Tensor:
    """Run a GRU over ``x`` of shape (B, T, D); returns all hidden states (B, T, H).

    Gate layout along the 3H axis is [reset, update, candidate]:
    ``h' = (1 - z) * n + z * h`` with ``n = tanh(Wx_n x + b + r * (Wh_n h + b))``.
    Recorded as one node with a hand-written backprop-through-time rule.
    """
    x, wx, wh, bx, bh = (as_tensor(t) for t in (x, wx, wh, bx, bh))
    if x.ndim != 3 or wx.ndim != 2 or wx.shape[0] != x.shape[2]:
        raise ShapeError(f"gru: input {x.shape} incompatible with Wx {wx.shape}")
    B, T, _ = x.shape
    H = wh.shape[0]
    if wh.shape != (H, 3 * H) or wx.shape[1] != 3 * H or bx.shape != (3 * H,) or bh.shape != (3 * H,):
        raise ShapeError("gru: inconsistent weight shapes")
    parents = [x, wx, wh, bx, bh]
    if h0 is not None:
        h0 = as_tensor(h0)
        if h0.shape != (B, H):
            raise ShapeError(f"gru: h0 shape {h0.shape} != {(B, H)}")
        parents.append(h0)
        h = h0.data
    else:
        h = np.zeros((B, H))

    gx = x.data @ wx.data + bx.data
    out = np.empty((B, T, H))
    hs_prev = np.empty((T, B, H))
    rs = np.empty((T, B, H))
    zs = np.empty((T, B, H))
    ns = np.empty((T, B, H))
    ghn = np.empty((T, B, H))
    for t in range(T):
        gh = h @ wh.data + bh.data
        r = _sigmoid(gx[:, t, :H] + gh[:, :H])
        z = _sigmoid(gx[:, t, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[:, t, 2 * H:] + r * gh[:, 2 * H:])
        hs_prev[t], rs[t], zs[t], ns[t], ghn[t] = h, r, z, n, gh[:, 2 * H:]
        h = (1.0 - z) * n + z * h
        out[:, t] = h

    def backward(g):
        dgx = np.empty((B, T, 3 * H))
        dwh = np.zeros_like(wh.data)
        dbh = np.zeros(3 * H)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            r, z, n, hp = rs[t], zs[t], ns[t], hs_prev[t]
            dan = dh * (1.0 - z) * (1.0 - n * n)
            daz = dh * (hp - n) * z * (1.0 - z)
            dar = dan * ghn[t] * r * (1.0 - r)
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
            dgx[:, t] = np.concatenate([dar, daz, dan], axis=1)
            dwh += hp.T @ dgh
            dbh += dgh.sum(axis=0)
            dh = dh * z + dgh @ wh.data.T
        grads = [
            dgx @ wx.data.T,
            x.data.reshape(-1, x.shape[2]).T @ dgx.reshape(-1, 3 * H),
            dwh,
            dgx.sum(axis=(0, 1)),
            dbh,
        ]
        if h0 is not None:
            grads.append(dh)
        return tuple(grads)

    return _record("gru", out, parents, backward)


# -- backward and optimizer -----------------------------------------------------------


def tape_of(loss: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``loss`` in recording order."""
    seen = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen or node._backward is None:
            continue
        seen[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    return sorted(seen.values(), key=lambda t: t._seq)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate additively (across uses and across calls).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape_of(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        fault = _grad_faults.get(node.kind)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if fault is not None:
                pg = pg * fault
            if p._backward is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


class SGD:
    """SGD with classical momentum and L2 weight decay folded into the velocity."""

    def __init__(self, params, lr=0.02, momentum=0.9, weight_decay=1e-4):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"sgd_step: no gradient for {missing}")
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad + self.weight_decay * p.data
            p.data -= self.lr * v
            p.grad = None

    def state_dict(self):
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state_dict(self, state):
        for name, v in state.items():
            self.velocity[name] = np.array(v, dtype=np.float64)


def sgd_step(params, state: SGD) -> None:
    """Functional alias: ``state`` already owns ``params``."""
    state.step()


def grad_check(build, params, n_coords=20, h=1e-5, seed=0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build`` is a zero-argument callable returning a scalar Tensor; ``params``
    are leaf tensors it reads.  Up to ``n_coords`` coordinates are sampled per
    parameter.
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    backward(build())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > n_coords:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = build().item()
                flat[i] = orig - h
                fm = build().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(ga.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
