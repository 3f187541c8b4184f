"""Differentiable operators over :class:`~subnetdp.autograd.Tensor`.

Every operator validates shapes, computes the forward value with numpy,
and (when a tape is given and some input requires a gradient) records a
backward rule on the tape. Passing ``tape=None`` gives a plain forward
pass with no recording, which is how evaluation runs.
"""

from __future__ import annotations

import numpy as np

from .autograd import Array, Tape, Tensor, check_finite
from .errors import ConfigError, InputError, ShapeError

__all__ = [
    "matmul",
    "linear",
    "conv2d",
    "group_norm",
    "relu",
    "add",
    "mul",
    "scale",
    "bias_add",
    "global_avg_pool",
    "flatten",
    "sum_all",
    "softmax_cross_entropy",
]


def _emit(tape, name, inputs, out_data, backward) -> Tensor:
    check_finite(name, out_data)
    grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=grad)
    if tape is not None and grad:
        tape.record(tuple(inputs), out, backward)
    return out


def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects [m,k] x [k,n], got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def back(g: Array):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit(tape, "matmul", (a, b), out, back)


def linear(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[B,F_in] @ w[F_out,F_in]^T + b[F_out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects x[B,Fin] and w[Fout,Fin], got {x.shape} and {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear bias shape {b.shape} does not match out features {w.shape[0]}")
    out = x.data @ w.data.T + b.data

    def back(g: Array):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _emit(tape, "linear", (x, w, b), out, back)


def conv2d(
    tape: Tape | None,
    x: Tensor,
    w: Tensor,
    b: Tensor,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Direct cross-correlation of x[B,Cin,H,W] with w[Cout,Cin,k,k]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin_w != cin:
        raise ShapeError(f"conv2d kernel expects {cin_w} input channels, input has {cin}")
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels only, got {kh}x{kw}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {cout} output channels")
    k = kh
    if (h + 2 * pad - k) % stride != 0 or (wd + 2 * pad - k) % stride != 0:
        raise ConfigError(
            f"conv2d output size is not integral for input {h}x{wd}, "
            f"kernel {k}, stride {stride}, pad {pad}"
        )
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output size {ho}x{wo} is not positive")

    if pad:
        xp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
        xp[:, :, pad : pad + h, pad : pad + wd] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    # Direct cross-correlation: gather the k*k shifted input planes once
    # and contract them against the flattened kernel with one batched
    # matmul. The gathered windows also serve the weight gradient.
    cols = np.empty((bsz, cin, k, k, ho, wo), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
    cols_flat = cols.reshape(bsz, cin * k * k, ho * wo)
    wmat = w.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols_flat).reshape(bsz, cout, ho, wo)
    out += b.data[None, :, None, None]

    def back(g: Array):
        g_flat = np.ascontiguousarray(g).reshape(bsz, cout, ho * wo)
        gw = None
        if w.requires_grad:
            gw = np.matmul(g_flat, cols_flat.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g_flat).reshape(bsz, cin, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    gxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                        gcols[:, :, u, v]
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    return _emit(tape, "conv2d", (x, w, b), out, back)


def group_norm(
    tape: Tape | None,
    x: Tensor,
    groups: int,
    gamma: Tensor,
    beta: Tensor,
    active: Array,
    eps: float = 1e-5,
) -> Tensor:
    """Group normalization over the active channels only.

    Statistics for each (sample, group) are computed over the channels
    flagged in ``active``; inactive channels produce exact zeros so that
    masked computation paths stay dead downstream.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects x[B,C,H,W], got {x.shape}")
    bsz, c, h, wd = x.shape
    if c % groups != 0:
        raise ConfigError(f"group_norm: {groups} groups do not divide {c} channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    active = np.asarray(active, dtype=bool)
    if active.shape != (c,):
        raise ShapeError(f"group_norm active flags shape {active.shape} do not match {c} channels")
    gsize = c // groups

    out = np.zeros_like(x.data)
    saved = []  # per group: (channel index or slice, xhat, inv_std)
    for gi in range(groups):
        flags = active[gi * gsize : (gi + 1) * gsize]
        if flags.all():
            idx: slice | np.ndarray = slice(gi * gsize, (gi + 1) * gsize)
        else:
            chans = np.nonzero(flags)[0]
            if chans.size == 0:
                raise ConfigError(f"group_norm: group {gi} has no active channels")
            idx = chans + gi * gsize
        sub = x.data[:, idx]
        mu = sub.mean(axis=(1, 2, 3), keepdims=True)
        centered = sub - mu
        var = (centered * centered).mean(axis=(1, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        out[:, idx] = xhat * gamma.data[idx][None, :, None, None] + beta.data[idx][None, :, None, None]
        saved.append((idx, xhat, inv_std))

    def back(g: Array):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        ggamma = np.zeros(c) if gamma.requires_grad else None
        gbeta = np.zeros(c) if beta.requires_grad else None
        for idx, xhat, inv_std in saved:
            gsub = g[:, idx]
            if ggamma is not None:
                ggamma[idx] = (gsub * xhat).sum(axis=(0, 2, 3))
            if gbeta is not None:
                gbeta[idx] = gsub.sum(axis=(0, 2, 3))
            if gx is not None:
                dxhat = gsub * gamma.data[idx][None, :, None, None]
                mean_d = dxhat.mean(axis=(1, 2, 3), keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
                gx[:, idx] = inv_std * (dxhat - mean_d - xhat * mean_dx)
        return gx, ggamma, gbeta

    return _emit(tape, "group_norm", (x, gamma, beta), out, back)


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def back(g: Array):
        return (g * (x.data > 0.0) if x.requires_grad else None,)

    return _emit(tape, "relu", (x,), out, back)


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add expects matching shapes, got {a.shape} and {b.shape}")
    out = a.data + b.data

    def back(g: Array):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _emit(tape, "add", (a, b), out, back)


def mul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul expects matching shapes, got {a.shape} and {b.shape}")
    out = a.data * b.data

    def back(g: Array):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _emit(tape, "mul", (a, b), out, back)


def scale(tape: Tape | None, x: Tensor, alpha: float) -> Tensor:
    out = x.data * alpha

    def back(g: Array):
        return (g * alpha if x.requires_grad else None,)

    return _emit(tape, "scale", (x,), out, back)


def bias_add(tape: Tape | None, x: Tensor, b: Tensor) -> Tensor:
    """x[B,F] + b[F], broadcast over the batch."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"bias_add expects x[B,F] and b[F], got {x.shape} and {b.shape}")
    out = x.data + b.data

    def back(g: Array):
        gx = g if x.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gb

    return _emit(tape, "bias_add", (x, b), out, back)


def global_avg_pool(tape: Tape | None, x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects x[B,C,H,W], got {x.shape}")
    _, _, h, wd = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g: Array):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape).copy(),)

    return _emit(tape, "global_avg_pool", (x,), out, back)


def flatten(tape: Tape | None, x: Tensor) -> Tensor:
    bsz = x.shape[0]
    out = x.data.reshape(bsz, -1)

    def back(g: Array):
        return (g.reshape(x.shape) if x.requires_grad else None,)

    return _emit(tape, "flatten", (x,), out.copy(), back)


def sum_all(tape: Tape | None, x: Tensor) -> Tensor:
    out = x.data.sum()

    def back(g: Array):
        return (np.full(x.shape, g, dtype=np.float64) if x.requires_grad else None,)

    return _emit(tape, "sum_all", (x,), np.float64(out), back)


def softmax_cross_entropy(tape: Tape | None, logits: Tensor, labels: Array) -> Tensor:
    """Mean cross-entropy over the batch, stabilized with log-sum-exp."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects logits[B,K], got {logits.shape}")
    labels = np.asarray(labels)
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise InputError(f"labels shape {labels.shape} does not match batch size {bsz}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(bsz), labels].mean()

    def back(g: Array):
        if not logits.requires_grad:
            return (None,)
        grad = np.exp(log_probs)
        grad[np.arange(bsz), labels] -= 1.0
        return (grad * (g / bsz),)

    return _emit(tape, "softmax_cross_entropy", (logits,), np.float64(loss), back)
