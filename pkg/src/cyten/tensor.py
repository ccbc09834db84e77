"""Reverse-mode autodiff tensor, named parameters, Adam, and gradient checking.

A Tensor wraps a dense row-major numpy array and remembers how it was
produced; calling ``backward()`` on a scalar walks the tape and
accumulates gradients into every tensor created with
``requires_grad=True``. Training runs in float32, gradient checks in
float64.
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype.name}, grad={'set' if self.grad is not None else 'none'})"

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep seeded with d(self)/d(self) = 1.

        Only defined for scalar outputs (losses). Gradient buffers of
        reachable ``requires_grad`` tensors are accumulated, not reset.
        """
        if self.data.size != 1:
            raise ValidationError("non-scalar loss", f"backward() needs a scalar, got shape {list(self.shape)}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self):
        return float(self.data.reshape(()))


def needs_graph(*tensors):
    return any(t.requires_grad for t in tensors)


def result(data, parents, backward):
    """Wrap an op output, attaching the tape entry only when some input tracks gradients."""
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


class Parameter:
    """Named trainable tensor, e.g. ``dwinet.block1.conv0.weight``."""

    def __init__(self, name, value):
        self.name = name
        self.value = Tensor(np.asarray(value), requires_grad=True)

    @property
    def grad(self):
        return self.value.grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.value.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={list(self.shape)})"


class AdamState:
    """First/second moment buffers plus hyperparameters for one parameter."""

    def __init__(self, shape, dtype=np.float32, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @classmethod
    def for_param(cls, param, **hp):
        return cls(param.shape, dtype=param.value.dtype, **hp)


def adam_step(param, state):
    """One bias-corrected Adam update, in place.

    value -= lr * m_hat / (sqrt(v_hat) + eps)
    """
    g = param.grad
    if g is None:
        raise ValidationError("missing gradient", f"{param.name} has no gradient; run backward() first")
    if g.shape != state.m.shape:
        raise ValidationError("shape mismatch", f"Adam state shape {state.m.shape} vs grad {g.shape} for {param.name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * np.square(g)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    param.value.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _sample_coords(params, max_coords, rng):
    """Pick up to max_coords flat coordinates spread over all parameter tensors.

    Quotas are proportional to tensor size with at least one coordinate
    per tensor; all coordinates are used when the total fits the budget.
    """
    sizes = [p.value.size for p in params]
    total = sum(sizes)
    if total <= max_coords:
        return [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    quotas = [max(1, (max_coords * n) // total) for n in sizes]
    while sum(quotas) > max_coords:
        k = int(np.argmax(quotas))
        quotas[k] -= 1
    while sum(quotas) < max_coords:
        deficit = [q / n for q, n in zip(quotas, sizes)]
        k = int(np.argmin(deficit))
        quotas[k] += 1
    coords = []
    for i, (n, q) in enumerate(zip(sizes, quotas)):
        picked = rng.choice(n, size=min(q, n), replace=False)
        coords.extend((i, int(j)) for j in picked)
    return coords


def grad_check(params, loss_fn, eps=1e-4, max_coords=64, seed=0):
    """Compare reverse-mode gradients against central finite differences.

    params: parameters the loss depends on (float64 required).
    loss_fn: zero-argument callable rebuilding the scalar loss from the
        current parameter values.
    Returns the max relative error |a - n| / (|a| + |n|) over the sampled
    coordinates, skipping dead coordinates where |a| + |n| <= 1e-8 (both
    routes agree the gradient vanishes, e.g. inactive relu units).
    """
    for p in params:
        if p.value.dtype != np.float64:
            raise ValidationError("binary64 required", f"grad_check needs float64 parameters, {p.name} is {p.value.dtype}")
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.size != 1:
        raise ValidationError("non-scalar loss", "grad_check needs a scalar loss")
    loss.backward()
    analytic = [np.zeros_like(p.value.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for pi, flat in _sample_coords(params, max_coords, rng):
        buf = params[pi].value.data.reshape(-1)
        orig = buf[flat]
        buf[flat] = orig + eps
        f_plus = loss_fn().item()
        buf[flat] = orig - eps
        f_minus = loss_fn().item()
        buf[flat] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[pi].reshape(-1)[flat]
        denom = abs(a) + abs(numeric)
        if denom <= 1e-8:
            continue
        worst = max(worst, abs(a - numeric) / denom)
    return worst
