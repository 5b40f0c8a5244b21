"""Differentiable operations used by the segmentation network and the Siamese head."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, _as_tensor

COSINE_EPS = 1e-8
PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


# -- elementwise -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), backward, "sigmoid")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1; every other extent must agree."""
    if not tensors:
        raise ShapeError("nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {t.shape} with {ref} along channels")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=1))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward, "concat")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` of a 2-D tensor; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.intp)
    rows = x.shape[0]

    def backward(g):
        out = np.zeros((rows,) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(x.data[index], (x,), backward, "take_rows")


# -- dense layers ----------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the trailing axis."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = (g @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


def _offsets(k: int):
    for a in range(k):
        for b in range(k):
            for c in range(k):
                yield a, b, c


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation over a ``(B, C, D, H, W)`` input."""
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and kernel, got {x.shape} and {kernel.shape}")
    cout, cin, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d kernel must be cubic, got {kernel.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias {bias.shape} does not match {cout} output channels")
    if k % 2 == 0 or stride < 1 or padding < 0:
        raise ValueError(f"conv3d: need odd kernel, stride >= 1, padding >= 0 (k={k}, stride={stride}, padding={padding})")
    if any(n + 2 * padding < k for n in x.shape[2:]):
        raise ShapeError(f"conv3d: padded extent of {x.shape} smaller than kernel {k}")

    B = x.shape[0]
    s = stride
    wd = kernel.data
    # channel-major copy of the padded input: (Cin, B, Dp, Hp, Wp)
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4))
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    od, oh, ow = ((n - k) // s + 1 for n in xt.shape[2:])
    # columns laid out as (Cin, k, k, k, B, D', H', W')
    cols = np.empty((cin, k, k, k, B, od, oh, ow), dtype=xt.dtype)
    for a, b, c in _offsets(k):
        cols[:, a, b, c] = xt[:, :, a : a + s * od : s, b : b + s * oh : s, c : c + s * ow : s]
    cols = cols.reshape(cin * k**3, -1)
    wmat = wd.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, B, od, oh, ow).transpose(1, 0, 2, 3, 4))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        gcols = (wmat.T @ g2).reshape(cin, k, k, k, B, od, oh, ow)
        gxt = np.zeros(xt.shape, dtype=xt.dtype)
        for a, b, c in _offsets(k):
            gxt[:, :, a : a + s * od : s, b : b + s * oh : s, c : c + s * ow : s] += gcols[:, a, b, c]
        if padding:
            p = padding
            gxt = gxt[:, :, p:-p, p:-p, p:-p]
        gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3, 4))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, backward, "conv3d")


def maxpool3d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element of a block."""
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects 5-D input, got {x.shape}")
    B, C, D, H, W = x.shape
    w = window
    if w < 1 or D % w or H % w or W % w:
        raise ShapeError(f"maxpool3d: window {w} does not divide spatial extents {x.shape[2:]}")
    blocks = (
        x.data.reshape(B, C, D // w, w, H // w, w, W // w, w)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(B, C, D // w, H // w, W // w, w**3)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(B, C, D // w, H // w, W // w, w, w, w)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(B, C, D, H, W)
        )
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool3d")


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear resampling weights (align-corners off) as an ``(n_out, n_in)`` matrix."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        A[i, i0] += 1.0 - lam
        A[i, i1] += lam
    return A


def upsample_trilinear(x: Tensor, target: Sequence[int]) -> Tensor:
    """Trilinear resize of the three trailing axes to ``target``."""
    target = tuple(int(t) for t in target)
    if x.ndim != 5 or len(target) != 3:
        raise ShapeError(f"upsample_trilinear expects 5-D input and 3 target extents, got {x.shape}, {target}")
    if any(t <= 0 for t in target):
        raise ValueError(f"upsample_trilinear: target extents must be positive, got {target}")
    if any(t < s for t, s in zip(target, x.shape[2:])):
        raise ValueError(f"upsample_trilinear: target {target} smaller than source {x.shape[2:]}")
    if target == x.shape[2:]:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,), "upsample")
    mats = [interpolation_matrix(s, t, x.dtype) for s, t in zip(x.shape[2:], target)]
    out = x.data
    for axis, A in zip((2, 3, 4), mats):
        out = np.moveaxis(np.tensordot(A, out, axes=([1], [axis])), 0, axis)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        for axis, A in zip((2, 3, 4), mats):
            g = np.moveaxis(np.tensordot(A.T, g, axes=([1], [axis])), 0, axis)
        return (np.ascontiguousarray(g, dtype=x.dtype),)

    return Tensor._from_op(out, (x,), backward, "upsample")


# -- losses ----------------------------------------------------------------------


def cosine_similarity(u: Tensor, v: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Row-wise cosine over the trailing axis, each norm floored at ``eps``, clamped to [-1, 1]."""
    u = _as_tensor(u)
    v = _as_tensor(v, u.dtype)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: shapes differ {u.shape} vs {v.shape}")
    ud, vd = u.data, v.data
    nu = np.linalg.norm(ud, axis=-1, keepdims=True)
    nv = np.linalg.norm(vd, axis=-1, keepdims=True)
    a = np.maximum(nu, eps)
    b = np.maximum(nv, eps)
    dot = (ud * vd).sum(axis=-1, keepdims=True)
    raw = dot / (a * b)
    # rounding can push |cos| just past 1; those points are extrema with zero slope
    cos = np.clip(raw, -1.0, 1.0)
    exact = raw == cos

    def backward(g):
        g = g[..., None] * exact
        gu = vd / (a * b)
        gu = gu - np.where(nu > eps, cos * ud / (a * a), 0.0)
        gv = ud / (a * b)
        gv = gv - np.where(nv > eps, cos * vd / (b * b), 0.0)
        return (g * gu).astype(ud.dtype), (g * gv).astype(vd.dtype)

    return Tensor._from_op(cos[..., 0], (u, v), backward, "cosine")


def bce_loss(probs: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if probs.shape != t.shape:
        raise ShapeError(f"bce_loss: probs {probs.shape} vs target {t.shape}")
    p = probs.data.astype(np.float64)
    t = t.astype(np.float64)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    loss = -np.mean(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    inside = (p >= PROB_CLAMP) & (p <= 1.0 - PROB_CLAMP)

    def backward(g):
        gp = -(t / pc - (1.0 - t) / (1.0 - pc)) / n * inside
        return ((g * gp).astype(probs.dtype),)

    return Tensor._from_op(np.asarray(loss, dtype=probs.dtype), (probs,), backward, "bce")
