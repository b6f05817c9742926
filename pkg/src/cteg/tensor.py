"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic tape: every op that touches a grad-requiring tensor records its
parents and a closure that routes the output gradient back to them.
``backward`` walks the recorded graph once in reverse topological order,
resetting gradients of reachable nodes before filling them (call with
``accumulate=True`` to add onto existing gradients instead).

Ops that only see constant inputs produce constants, so frozen inputs (text
embeddings, positional encodings, masks) never grow the tape.
"""

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        # Leaves that require grad always expose a buffer, so a parameter not
        # reached by any backward pass reads as all-zero gradient.
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def backward(self, accumulate=False):
        backward(self, accumulate=accumulate)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Record an op node, or a constant if no parent needs gradients."""
    if not any(p.requires_grad or p._parents for p in parents):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def back(g, out):
        if a.grad is not None:
            a.grad += _unbroadcast(g, a.shape)
        if b.grad is not None:
            b.grad += _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def back(g, out):
        if a.grad is not None:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.grad is not None:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _make(out_data, (a, b), back)


def power(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    out_data = a.data ** e

    def back(g, out):
        if a.grad is not None:
            a.grad += g * e * a.data ** (e - 1.0)

    return _make(out_data, (a,), back)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def back(g, out):
        if a.grad is not None:
            a.grad += g * out.data

    return _make(out_data, (a,), back)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def back(g, out):
        if a.grad is not None:
            a.grad += g / a.data

    return _make(out_data, (a,), back)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def back(g, out):
        if a.grad is not None:
            a.grad += g * (1.0 - out.data * out.data)

    return _make(out_data, (a,), back)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a):
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def back(g, out):
        if a.grad is not None:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
            a.grad += g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)

    return _make(out_data, (a,), back)


def masked_fill(a, mask, value):
    """Replace entries where mask is False by a constant (no grad there)."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    out_data = np.where(m, a.data, value)

    def back(g, out):
        if a.grad is not None:
            a.grad += _unbroadcast(np.where(m, g, 0.0), a.shape)

    return _make(out_data, (a,), back)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def back(g, out):
        if a.grad is not None:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.grad += _unbroadcast(ga, a.shape)
        if b.grad is not None:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.grad += _unbroadcast(gb, b.shape)

    return _make(out_data, (a, b), back)


# -- reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g, out):
        if a.grad is not None:
            if axis is None:
                a.grad += g
            elif keepdims:
                a.grad += np.broadcast_to(g, a.shape)
            else:
                a.grad += np.broadcast_to(np.expand_dims(g, axis), a.shape)

    return _make(out_data, (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def back(g, out):
        if a.grad is not None:
            a.grad += g.reshape(a.shape)

    return _make(out_data, (a,), back)


def transpose(a, axes=None):
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)

    def back(g, out):
        if a.grad is not None:
            inv = None if axes is None else np.argsort(axes)
            a.grad += np.transpose(g, inv)

    return _make(out_data, (a,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g, out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.grad is not None:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.grad += g[tuple(idx)]

    return _make(out_data, tuple(tensors), back)


def take(a, idx):
    """Basic indexing (ints/slices); gradient scatters back into place."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def back(g, out):
        if a.grad is not None:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            a.grad += buf

    return _make(out_data, (a,), back)


# -- fused numerical primitives ------------------------------------------------

def softmax_lastdim(x):
    """Softmax over the last dimension, stabilized by max subtraction."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def back(g, out):
        if x.grad is not None:
            y = out.data
            x.grad += (g - (g * y).sum(axis=-1, keepdims=True)) * y

    return _make(out_data, (x,), back)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last dim to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} must match last dim of {x.shape}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gain.data * xhat + bias.data

    def back(g, out):
        d = x.shape[-1]
        gg = g * gain.data
        if x.grad is not None:
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            x.grad += inv * (gg - m1 - xhat * m2)
        if gain.grad is not None:
            gain.grad += (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.grad is not None:
            bias.grad += g.reshape(-1, d).sum(axis=0)

    return _make(out_data, (x, gain, bias), back)


def mse(pred, target):
    """Mean over all elements of squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ: {pred.shape} vs {target.shape}")
    return tmean(power(pred - target, 2.0))


# -- backward pass ---------------------------------------------------------------

def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, accumulate=False):
    """Populate gradients of everything reachable from a scalar loss.

    By default gradients of the reachable set are reset before filling;
    ``accumulate=True`` adds onto whatever is already there.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    for node in order:
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            elif not (accumulate and not node._parents):
                # op outputs always reset; leaves keep their gradient only
                # in accumulate mode
                node.grad[...] = 0.0
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad, node)


# -- gradient verification ----------------------------------------------------

def grad_check(f, params, eps=1e-5, max_entries_per_param=None):
    """Max relative error between analytic gradients and central differences.

    ``f`` takes no arguments, reads the given parameter tensors, and returns a
    scalar Tensor.  It must be deterministic: any sampling has to come from a
    stream re-seeded identically on every call.  ``max_entries_per_param``
    caps how many entries of each tensor are perturbed (evenly strided),
    which keeps large checks inside a time budget.

    Relative error per entry: |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    params = list(params)
    base = f().item()
    if not np.isfinite(base):
        raise ContractError("grad_check: objective is non-finite at the base point")
    if abs(f().item() - base) > 0.0:
        raise ContractError(
            "grad_check: objective is not deterministic across calls; "
            "fresh random sampling per call is a contract violation")

    out = f()
    backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is None or n <= max_entries_per_param:
            entries = range(n)
        else:
            entries = np.linspace(0, n - 1, max_entries_per_param).astype(int)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ContractError(
                    f"grad_check: non-finite objective when perturbing entry {i} "
                    f"of parameter with shape {p.shape}")
            numeric = (fp - fm) / (2.0 * eps)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            worst = max(worst, err)
    return worst
