"""Forward operations with reverse-mode gradients for the 3D networks.

Layout conventions: activations are [N, C, D, H, W] row-major (W fastest),
dense inputs [N, K]. Convolution is cross-correlation (no kernel flip)
with zero padding; output extents follow floor((X + 2p - k) / s) + 1.
All reductions use numpy's fixed summation order, so results are
deterministic for a given build and thread count.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError
from .tensor import Tensor, result

BCE_CLAMP_EPS = 1e-7
CONV_BUFFER_BYTES = 192 * 1024 * 1024  # above this the conv falls back to offset accumulation


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv3d(x, weight, bias, stride=1, padding=0):
    """3D cross-correlation: [N,C,D,H,W] * [F,C,k,k,k] + [F] -> [N,F,D',H',W']."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ValidationError("shape mismatch", f"conv3d expects 5D input and weight, got {list(x.shape)} and {list(weight.shape)}")
    n, c, d, h, w = x.shape
    f, cw, k1, k2, k3 = weight.shape
    if not (k1 == k2 == k3):
        raise ValidationError("shape mismatch", f"conv3d kernel must be cubic, weight shape {list(weight.shape)}")
    k = k1
    if cw != c:
        raise ValidationError("shape mismatch", f"conv3d channels differ: input {list(x.shape)} vs weight {list(weight.shape)}")
    if bias.shape != (f,):
        raise ValidationError("shape mismatch", f"conv3d bias shape {list(bias.shape)} != [{f}]")
    if stride < 1:
        raise ValidationError("bad stride", f"stride must be >= 1, got {stride}")
    outs = []
    for extent in (d, h, w):
        padded = extent + 2 * padding
        if k > padded:
            raise ValidationError("shape mismatch", f"kernel {k} exceeds padded extent {padded} (input {list(x.shape)})")
        o = (padded - k) // stride + 1
        if o <= 0:
            raise ValidationError("non-positive output extent", f"conv3d output extent {o} for input {list(x.shape)}, k={k}, stride={stride}, pad={padding}")
        outs.append(o)
    do, ho, wo = outs

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    npos = do * ho * wo
    offsets = [(dz, dy, dx) for dz in range(k) for dy in range(k) for dx in range(k)]

    def window(arr, dz, dy, dx):
        return arr[:, :,
                   dz:dz + stride * (do - 1) + 1:stride,
                   dy:dy + stride * (ho - 1) + 1:stride,
                   dx:dx + stride * (wo - 1) + 1:stride]

    buffered = n * len(offsets) * c * npos * x.data.itemsize <= CONV_BUFFER_BYTES
    if buffered:
        # gather windows with cheap strided copies, then one GEMM per item
        cols = np.empty((n, len(offsets), c, do, ho, wo), dtype=x.data.dtype)
        for o, (dz, dy, dx) in enumerate(offsets):
            cols[:, o] = window(xp, dz, dy, dx)
        cols_mat = cols.reshape(n, len(offsets) * c, npos)
        w2 = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 4, 1)).reshape(f, len(offsets) * c)
        out = np.matmul(w2, cols_mat)
        out += bias.data.reshape(1, f, 1)
    else:
        # low-memory path: accumulate one kernel offset at a time
        w_by_offset = weight.data.reshape(f, c, len(offsets))
        out = np.empty((n, f, npos), dtype=x.data.dtype)
        out[:] = bias.data.reshape(1, f, 1)
        for o, (dz, dy, dx) in enumerate(offsets):
            xo = np.ascontiguousarray(window(xp, dz, dy, dx)).reshape(n, c, npos)
            out += np.matmul(w_by_offset[:, :, o], xo)
    y = out.reshape(n, f, do, ho, wo)

    def backward(g):
        gm = g.reshape(n, f, npos)
        if bias.requires_grad:
            bias.accumulate_grad(gm.sum(axis=(0, 2)))
        need_dx = x.requires_grad
        gxp = np.zeros_like(xp) if need_dx else None
        if buffered:
            if weight.requires_grad:
                dw2 = np.matmul(gm, cols_mat.transpose(0, 2, 1)).sum(axis=0)
                weight.accumulate_grad(
                    dw2.reshape(f, k, k, k, c).transpose(0, 4, 1, 2, 3))
            if need_dx:
                dcols = np.matmul(w2.T, gm).reshape(n, len(offsets), c, do, ho, wo)
                for o, (dz, dy, dx) in enumerate(offsets):
                    window(gxp, dz, dy, dx)[...] += dcols[:, o]
        else:
            w_by_offset = weight.data.reshape(f, c, len(offsets))
            dw = np.zeros_like(weight.data).reshape(f, c, len(offsets)) if weight.requires_grad else None
            for o, (dz, dy, dx) in enumerate(offsets):
                if weight.requires_grad:
                    xo = np.ascontiguousarray(window(xp, dz, dy, dx)).reshape(n, c, npos)
                    dw[:, :, o] = np.matmul(gm, xo.transpose(0, 2, 1)).sum(axis=0)
                if need_dx:
                    dxo = np.matmul(w_by_offset[:, :, o].T, gm)
                    window(gxp, dz, dy, dx)[...] += dxo.reshape(n, c, do, ho, wo)
            if weight.requires_grad:
                weight.accumulate_grad(dw.reshape(weight.shape))
        if need_dx:
            x.accumulate_grad(gxp[:, :, p:p + d, p:p + h, p:p + w] if p else gxp)

    return result(y, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def pool3d(x, kind, window=2, stride=2):
    """Pooling over [N,C,D,H,W]. kind: "max" | "avg" | "global_avg".

    No padding; max ties route gradient to the lowest flat index inside
    the window; avg spreads gradient uniformly. global_avg ignores
    window/stride and returns [N,C,1,1,1].
    """
    x = _as_tensor(x)
    if x.data.ndim != 5:
        raise ValidationError("shape mismatch", f"pool3d expects 5D input, got {list(x.shape)}")
    n, c, d, h, w = x.shape

    if kind == "global_avg":
        y = x.data.mean(axis=(2, 3, 4), keepdims=True)

        def backward_g(g):
            if x.requires_grad:
                x.accumulate_grad(np.broadcast_to(g / (d * h * w), x.shape))

        return result(y, (x,), backward_g)

    if kind not in ("max", "avg"):
        raise ValidationError("bad pool kind", f"unknown pooling kind {kind!r}")
    if stride < 1:
        raise ValidationError("bad stride", f"stride must be >= 1, got {stride}")
    for extent in (d, h, w):
        if window > extent:
            raise ValidationError("window exceeds extent", f"pool window {window} > extent {extent} (input {list(x.shape)})")
    wv = sliding_window_view(x.data, (window, window, window), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    do, ho, wo = wv.shape[2:5]
    wf = np.ascontiguousarray(wv).reshape(n, c, do, ho, wo, window ** 3)

    if kind == "max":
        am = wf.argmax(axis=-1)
        y = np.take_along_axis(wf, am[..., None], axis=-1)[..., 0]

        def backward_max(g):
            if not x.requires_grad:
                return
            oz, oy, ox = np.unravel_index(am, (window, window, window))
            d_idx = oz + (np.arange(do) * stride)[None, None, :, None, None]
            h_idx = oy + (np.arange(ho) * stride)[None, None, None, :, None]
            w_idx = ox + (np.arange(wo) * stride)[None, None, None, None, :]
            nc = np.arange(n * c).reshape(n, c, 1, 1, 1)
            flat = ((nc * d + d_idx) * h + h_idx) * w + w_idx
            gx = np.zeros(n * c * d * h * w, dtype=x.data.dtype)
            np.add.at(gx, flat.ravel(), g.ravel())
            x.accumulate_grad(gx.reshape(x.shape))

        return result(y, (x,), backward_max)

    y = wf.mean(axis=-1)

    def backward_avg(g):
        if not x.requires_grad:
            return
        share = g / window ** 3
        gx = np.zeros_like(x.data)
        for dz in range(window):
            for dy in range(window):
                for dx in range(window):
                    gx[:, :,
                       dz:dz + stride * (do - 1) + 1:stride,
                       dy:dy + stride * (ho - 1) + 1:stride,
                       dx:dx + stride * (wo - 1) + 1:stride] += share
        x.accumulate_grad(gx)

    return result(y, (x,), backward_avg)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running mean/variance for one normalized channel axis."""

    def __init__(self, channels, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm(x, gamma, beta, state, mode="train", eps=1e-5, momentum=0.1):
    """Normalize over all non-channel axes of [N,C,...].

    Train mode uses batch statistics (biased variance) and updates the
    running buffers as new = (1 - momentum) * old + momentum * batch.
    Eval mode normalizes with the running buffers.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValidationError("bad eps", f"batch_norm eps must be > 0, got {eps}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValidationError("shape mismatch", f"batch_norm gamma/beta {list(gamma.shape)}/{list(beta.shape)} vs channels {c}")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, c) + (1,) * (x.data.ndim - 2)

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        state.running_mean *= 1.0 - momentum
        state.running_mean += momentum * mu
        state.running_var *= 1.0 - momentum
        state.running_var += momentum * var
    elif mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv.reshape(bshape)
    else:
        raise ValidationError("bad mode", f"batch_norm mode must be train or eval, got {mode!r}")
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                x.accumulate_grad(inv.reshape(bshape) * (
                    dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)))
            else:
                x.accumulate_grad(dxhat * inv.reshape(bshape))

    return result(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# dense / activations / loss
# ---------------------------------------------------------------------------

def dense(x, weight, bias):
    """Affine map: [N,K] @ [M,K].T + [M] -> [N,M]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValidationError("shape mismatch", f"dense: input {list(x.shape)} vs weight {list(weight.shape)}")
    if bias.shape != (weight.shape[0],):
        raise ValidationError("shape mismatch", f"dense bias {list(bias.shape)} vs weight rows {weight.shape[0]}")
    y = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return result(y, (x, weight, bias), backward)


def relu(x):
    x = _as_tensor(x)
    y = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return result(y, (x,), backward)


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ey = np.exp(d[~pos])
    y[~pos] = ey / (1.0 + ey)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * y * (1.0 - y))

    return result(y, (x,), backward)


def softmax_lastaxis(x):
    """Shift-invariant softmax along the last axis (max subtraction)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return result(y, (x,), backward)


def activation(x, kind):
    """Dispatch: kind in {"relu", "sigmoid", "softmax_lastaxis"}."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_lastaxis":
        return softmax_lastaxis(x)
    raise ValidationError("bad activation", f"unknown activation kind {kind!r}")


def bce_loss(prob_pos, label):
    """Mean binary cross-entropy on positive-class probabilities.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log; the
    gradient is (p - y) / (p (1 - p)) / N evaluated at the clamped value.
    """
    prob_pos = _as_tensor(prob_pos)
    y = np.asarray(label)
    if y.shape != prob_pos.shape:
        raise ValidationError("shape mismatch", f"bce_loss: probs {list(prob_pos.shape)} vs labels {list(y.shape)}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("bad label", "bce_loss labels must be 0 or 1")
    y = y.astype(prob_pos.data.dtype)
    n = max(prob_pos.data.size, 1)
    pc = np.clip(prob_pos.data, BCE_CLAMP_EPS, 1.0 - BCE_CLAMP_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean()

    def backward(g):
        if prob_pos.requires_grad:
            prob_pos.accumulate_grad(g * (pc - y) / (pc * (1.0 - pc)) / n)

    return result(np.asarray(loss, dtype=prob_pos.data.dtype), (prob_pos,), backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x, shape):
    x = _as_tensor(x)
    y = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return result(y, (x,), backward)


def take_column(x, idx):
    """Select one column of a 2D tensor: [N,M] -> [N]."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValidationError("shape mismatch", f"take_column expects 2D input, got {list(x.shape)}")
    y = x.data[:, idx].copy()

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, idx] = g
            x.accumulate_grad(gx)

    return result(y, (x,), backward)


def add(a, b):
    """Elementwise sum of two same-shape tensors (residual connections)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValidationError("shape mismatch", f"add: {list(a.shape)} vs {list(b.shape)}")
    y = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return result(y, (a, b), backward)
