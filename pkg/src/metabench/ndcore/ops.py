"""Differentiable primitive operations.

Every primitive takes TensorNodes (plus plain scalars/integer label arrays
where noted), validates its shape rule, computes the forward value with
numpy, and records a reverse rule on the tape. The primitive set is exactly
what the bundled backbones and episodic losses need; anything fancier is out
of scope.

Image batches use NCHW layout; matrix ops treat rows as examples.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tape import NumericError, ShapeError, Tape, TensorNode, all_finite

_NORM_EPS_FLOOR = 1e-300  # rows with norm at or below this are rejected


def _value(node: TensorNode) -> np.ndarray:
    if not isinstance(node, TensorNode):
        raise TypeError(f"expected TensorNode, got {type(node).__name__}")
    return node.value


def _finite(arr: np.ndarray, kind: str) -> np.ndarray:
    if not all_finite(arr):
        raise NumericError(f"{kind} produced non-finite values")
    return arr


def add(a: TensorNode, b: TensorNode) -> TensorNode:
    """Elementwise sum. Also accepts a trailing-axis bias: (B,N)+(N,) or
    (B,C,H,W)+(C,)."""
    av, bv = _value(a), _value(b)
    na, nb = a.needs_grad, b.needs_grad
    if av.shape == bv.shape:
        out = av + bv

        def backward(g):
            return (g if na else None), (g if nb else None)

    elif av.ndim == 2 and bv.shape == (av.shape[1],):
        out = av + bv[None, :]

        def backward(g):
            return (g if na else None), (g.sum(axis=0) if nb else None)

    elif av.ndim == 4 and bv.shape == (av.shape[1],):
        out = av + bv[None, :, None, None]

        def backward(g):
            return (g if na else None), (g.sum(axis=(0, 2, 3)) if nb else None)

    else:
        raise ShapeError(f"add: incompatible shapes {av.shape} and {bv.shape}")
    return a.tape._record(_finite(out, "add"), (a, b), backward)


def sub(a: TensorNode, b: TensorNode) -> TensorNode:
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"sub: incompatible shapes {av.shape} and {bv.shape}")
    na, nb = a.needs_grad, b.needs_grad
    out = av - bv

    def backward(g):
        return (g if na else None), (-g if nb else None)

    return a.tape._record(_finite(out, "sub"), (a, b), backward)


def scalar_mul(a: TensorNode, scalar: float) -> TensorNode:
    s = float(scalar)
    if not np.isfinite(s):
        raise NumericError(f"scalar-mul: non-finite scalar {scalar}")
    out = _value(a) * s

    def backward(g):
        return (g * s,)

    return a.tape._record(_finite(out, "scalar-mul"), (a,), backward)


def elementwise_mul(a: TensorNode, b: TensorNode) -> TensorNode:
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise ShapeError(
            f"elementwise-mul: incompatible shapes {av.shape} and {bv.shape}"
        )
    na, nb = a.needs_grad, b.needs_grad
    out = av * bv

    def backward(g):
        return (g * bv if na else None), (g * av if nb else None)

    return a.tape._record(_finite(out, "elementwise-mul"), (a, b), backward)


def matmul(a: TensorNode, b: TensorNode) -> TensorNode:
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    na, nb = a.needs_grad, b.needs_grad
    out = av @ bv

    def backward(g):
        return (g @ bv.T if na else None), (av.T @ g if nb else None)

    return a.tape._record(_finite(out, "matmul"), (a, b), backward)


def relu(a: TensorNode) -> TensorNode:
    av = _value(a)
    out = np.maximum(av, 0.0)

    def backward(g):
        return (g * (av > 0.0),)

    return a.tape._record(out, (a,), backward)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # x: (B, C, H, W) zero-padded to keep the output spatial size.
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,C,H,W,kh,kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, h * w, c * kh * kw
    )


def conv2d(x: TensorNode, w: TensorNode) -> TensorNode:
    """Stride-1 cross-correlation with zero padding preserving H and W.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw) with odd kh, kw.
    """
    xv, wv = _value(x), _value(w)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {xv.shape} and {wv.shape}")
    b, cin, h, wdt = xv.shape
    cout, cin_w, kh, kw = wv.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: channel mismatch {xv.shape} vs {wv.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {(kh, kw)}")
    cols = _im2col(xv, kh, kw)  # (B, H*W, Cin*kh*kw)
    wmat = wv.reshape(cout, -1)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(b, cout, h, wdt)
    nx, nw = x.needs_grad, w.needs_grad

    def backward(g):
        gmat = np.ascontiguousarray(
            g.reshape(b, cout, h * wdt).transpose(0, 2, 1)
        ).reshape(b * h * wdt, cout)
        dw = None
        if nw:
            cols2 = cols.reshape(b * h * wdt, -1)
            dw = (gmat.T @ cols2).reshape(wv.shape)
        dx = None
        if nx:
            dcols = (gmat @ wmat).reshape(b, h, wdt, cin, kh, kw)
            ph, pw = (kh - 1) // 2, (kw - 1) // 2
            dxp = np.zeros((b, cin, h + 2 * ph, wdt + 2 * pw))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + h, j : j + wdt] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph : ph + h, pw : pw + wdt]
        return dx, dw

    return x.tape._record(_finite(out, "conv2d"), (x, w), backward)


def max_pool_2x2(x: TensorNode) -> TensorNode:
    """2x2 max pooling with stride 2; ties go to the first window position."""
    xv = _value(x)
    if xv.ndim != 4 or xv.shape[2] % 2 or xv.shape[3] % 2:
        raise ShapeError(f"max-pool-2x2: need even spatial extents, got {xv.shape}")
    b, c, h, w = xv.shape
    h2, w2 = h // 2, w // 2
    win = xv.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h2, w2, 4
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        return (
            dwin.reshape(b, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w),
        )

    return x.tape._record(out, (x,), backward)


def global_average_pool(x: TensorNode) -> TensorNode:
    xv = _value(x)
    if xv.ndim != 4:
        raise ShapeError(f"global-average-pool: need 4-d input, got {xv.shape}")
    b, c, h, w = xv.shape
    out = xv.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), xv.shape).copy(),)

    return x.tape._record(out, (x,), backward)


def flatten(x: TensorNode) -> TensorNode:
    xv = _value(x)
    if xv.ndim < 2:
        raise ShapeError(f"flatten: need at least 2-d input, got {xv.shape}")
    out = xv.reshape(xv.shape[0], -1)

    def backward(g):
        return (g.reshape(xv.shape),)

    return x.tape._record(out, (x,), backward)


def row_softmax(x: TensorNode) -> TensorNode:
    xv = _value(x)
    if xv.ndim != 2:
        raise ShapeError(f"row-softmax: need 2-d input, got {xv.shape}")
    z = xv - xv.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return x.tape._record(out, (x,), backward)


def l2_normalize_rows(x: TensorNode) -> TensorNode:
    xv = _value(x)
    if xv.ndim != 2:
        raise ShapeError(f"l2-normalize-rows: need 2-d input, got {xv.shape}")
    norms = np.linalg.norm(xv, axis=1, keepdims=True)
    if np.any(norms <= _NORM_EPS_FLOOR):
        raise NumericError("l2-normalize-rows: zero-norm row")
    out = xv / norms

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * dot) / norms,)

    return x.tape._record(out, (x,), backward)


def pairwise_squared_euclidean(a: TensorNode, b: TensorNode) -> TensorNode:
    """All-pairs squared distances between rows of a (m,d) and b (n,d)."""
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeError(
            f"pairwise-squared-euclidean: incompatible shapes {av.shape} and {bv.shape}"
        )
    aa = (av * av).sum(axis=1)[:, None]
    bb = (bv * bv).sum(axis=1)[None, :]
    out = np.maximum(aa + bb - 2.0 * (av @ bv.T), 0.0)

    na, nb = a.needs_grad, b.needs_grad

    def backward(g):
        da = db = None
        if na:
            da = 2.0 * (av * g.sum(axis=1, keepdims=True) - g @ bv)
        if nb:
            db = 2.0 * (bv * g.sum(axis=0)[:, None] - g.T @ av)
        return da, db

    return a.tape._record(_finite(out, "pairwise-squared-euclidean"), (a, b), backward)


def pairwise_cosine_similarity(a: TensorNode, b: TensorNode) -> TensorNode:
    """All-pairs cosine similarity between rows of a (m,d) and b (n,d)."""
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeError(
            f"pairwise-cosine-similarity: incompatible shapes {av.shape} and {bv.shape}"
        )
    na = np.linalg.norm(av, axis=1, keepdims=True)
    nb = np.linalg.norm(bv, axis=1, keepdims=True)
    if np.any(na <= _NORM_EPS_FLOOR) or np.any(nb <= _NORM_EPS_FLOOR):
        raise NumericError("pairwise-cosine-similarity: zero-norm row")
    ah = av / na
    bh = bv / nb
    out = ah @ bh.T

    ga, gb = a.needs_grad, b.needs_grad

    def backward(g):
        da = db = None
        if ga:
            dah = g @ bh
            da = (dah - ah * (dah * ah).sum(axis=1, keepdims=True)) / na
        if gb:
            dbh = g.T @ ah
            db = (dbh - bh * (dbh * bh).sum(axis=1, keepdims=True)) / nb
        return da, db

    return a.tape._record(out, (a, b), backward)


def softmax_cross_entropy(logits: TensorNode, labels) -> TensorNode:
    """Mean cross-entropy of row-softmax(logits) against integer labels."""
    lv = _value(logits)
    y = np.asarray(labels)
    if lv.ndim != 2:
        raise ShapeError(f"softmax-cross-entropy: need 2-d logits, got {lv.shape}")
    if y.shape != (lv.shape[0],):
        raise ShapeError(
            f"softmax-cross-entropy: labels shape {y.shape} does not match "
            f"logits rows {lv.shape[0]}"
        )
    if not np.issubdtype(y.dtype, np.integer):
        raise ShapeError("softmax-cross-entropy: labels must be integers")
    if y.min() < 0 or y.max() >= lv.shape[1]:
        raise ShapeError(
            f"softmax-cross-entropy: labels outside [0, {lv.shape[1]})"
        )
    n = lv.shape[0]
    z = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), y] - lse
    out = np.asarray(-logp.mean())
    probs = np.exp(z - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (float(g) / n),)

    return logits.tape._record(out, (logits,), backward)


def mean(x: TensorNode) -> TensorNode:
    xv = _value(x)
    out = np.asarray(xv.mean())

    def backward(g):
        return (np.full(xv.shape, float(g) / xv.size),)

    return x.tape._record(out, (x,), backward)


#: Registry of primitives keyed by operation kind, for generic dispatch.
PRIMITIVES = {
    "add": add,
    "sub": sub,
    "scalar-mul": scalar_mul,
    "elementwise-mul": elementwise_mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "max-pool-2x2": max_pool_2x2,
    "global-average-pool": global_average_pool,
    "flatten": flatten,
    "row-softmax": row_softmax,
    "l2-normalize-rows": l2_normalize_rows,
    "pairwise-squared-euclidean": pairwise_squared_euclidean,
    "pairwise-cosine-similarity": pairwise_cosine_similarity,
    "softmax-cross-entropy": softmax_cross_entropy,
    "mean": mean,
}


def forward(kind: str, *operands):
    """Apply a primitive by kind name; unknown kinds raise KeyError."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise KeyError(f"unknown op kind {kind!r}") from None
    return fn(*operands)
