"""Dense float64 tensor kernels shared by every other module.

All kernels are pure functions over numpy arrays: 64-bit throughout,
deterministic, and guarded so that NaN/Inf never escapes a kernel silently.
Row reductions that feed token scores (``l2norm_rows``, ``dot`` and the
matrix-vector form of ``matmul``) accumulate in a canonical sorted order,
which makes their results invariant to permutations of the input layout.

Structured kernels are written against single-sample shapes, e.g.
``(C, H, W)`` for convolution and ``(N, D)`` for token matrices, and also
accept one extra leading batch axis; batched results equal the stacked
per-sample results.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "as_f64",
    "conv2d",
    "col2im_add",
    "maxpool2d",
    "unfold",
    "fold",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "softplus",
    "matmul",
    "dot",
    "sum",
    "mean",
    "l2norm_rows",
    "row_norms",
    "cross_entropy_logits",
    "softmax",
    "bilinear_resize",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


def as_f64(x) -> np.ndarray:
    """Coerce to a float64 ndarray (no copy when already float64)."""
    return np.asarray(x, dtype=np.float64)


def _guard(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite values in output")
    return out


def _sorted_sum(x: np.ndarray) -> np.ndarray:
    # Sorting canonicalizes the accumulation order along the last axis, so
    # the sum does not depend on how the summands were laid out.
    return np.sort(x, axis=-1).sum(axis=-1)


# ---------------------------------------------------------------------------
# convolution / pooling


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    h, w = x.shape[-2:]
    xp = np.zeros(x.shape[:-2] + (h + 2 * pad, w + 2 * pad))
    xp[..., pad : pad + h, pad : pad + w] = x
    return xp


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    c = x.shape[-3]
    xp = _pad2d(x, pad)
    h_out = (xp.shape[-2] - k) // stride + 1
    w_out = (xp.shape[-1] - k) // stride + 1
    cols = np.empty(x.shape[:-3] + (c, k, k, h_out * w_out))
    for dr in range(k):
        for dc in range(k):
            cols[..., dr, dc, :] = xp[
                ..., dr : dr + stride * h_out : stride, dc : dc + stride * w_out : stride
            ].reshape(x.shape[:-3] + (c, h_out * w_out))
    return cols.reshape(x.shape[:-3] + (c * k * k, h_out * w_out)), (h_out, w_out)


def _conv2d_impl(x, kernels, bias, stride, pad):
    x, kernels, bias = as_f64(x), as_f64(kernels), as_f64(bias)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be (C, H, W) or (B, C, H, W), got {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be (C_out, C_in, k, k), got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernels must be square, got {kh}x{kw}")
    if c_in != x.shape[-3]:
        raise ShapeError(f"conv2d kernel C_in {c_in} does not match input channels {x.shape[-3]}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be ({c_out},), got {bias.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d pad must be >= 0, got {pad}")
    h, w = x.shape[-2:]
    if kh > h + 2 * pad or kh > w + 2 * pad:
        raise ShapeError(f"conv2d kernel {kh} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    cols, (h_out, w_out) = _im2col(x, kh, stride, pad)
    y = np.matmul(kernels.reshape(c_out, -1), cols) + bias[:, None]
    return y.reshape(x.shape[:-3] + (c_out, h_out, w_out)), cols, (h_out, w_out)


def conv2d(x, kernels, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation with zero padding.

    ``x`` is (C_in, H, W), ``kernels`` is (C_out, C_in, k, k), ``bias`` is
    (C_out,). Output spatial extent is floor((H + 2*pad - k) / stride) + 1.
    """
    y, _, _ = _conv2d_impl(x, kernels, bias, stride, pad)
    return _guard(y, "conv2d")


def col2im_add(cols: np.ndarray, in_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add im2col columns back onto the input grid (adjoint of the
    patch extraction used by :func:`conv2d`)."""
    c, h, w = in_shape[-3:]
    lead = tuple(in_shape[:-3])
    hp, wp = h + 2 * pad, w + 2 * pad
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    g = np.zeros(lead + (c, hp, wp))
    cr = cols.reshape(lead + (c, k, k, h_out, w_out))
    for dr in range(k):
        for dc in range(k):
            g[..., dr : dr + stride * h_out : stride, dc : dc + stride * w_out : stride] += cr[..., dr, dc, :, :]
    return g[..., pad : hp - pad, pad : wp - pad] if pad else g


def maxpool2d(x, window: int):
    """Non-overlapping max pooling over (C, H, W).

    Returns ``(pooled, argmax)`` where ``argmax`` holds flat indices into
    ``x`` for the backward pass; ties go to the lowest flat index.
    """
    x = as_f64(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"maxpool2d input must be (C, H, W) or (B, C, H, W), got {x.shape}")
    if window < 1:
        raise ValueError(f"maxpool2d window must be >= 1, got {window}")
    c, h, w = x.shape[-3:]
    if h % window or w % window:
        raise ShapeError(f"maxpool2d extents {h}x{w} not divisible by window {window}")
    lead = x.shape[:-3]
    ho, wo = h // window, w // window
    xb = x.reshape((-1, c, h, w))
    b = xb.shape[0]
    v = xb.reshape(b, c, ho, window, wo, window)
    if window == 2:
        # explicit pairwise comparisons; strict > keeps the first (lowest
        # flat index) element on ties, matching the generic path exactly
        a0, a1 = v[:, :, :, 0, :, 0], v[:, :, :, 0, :, 1]
        a2, a3 = v[:, :, :, 1, :, 0], v[:, :, :, 1, :, 1]
        top = np.maximum(a0, a1)
        bottom = np.maximum(a2, a3)
        pooled = np.maximum(top, bottom)
        local = np.where(bottom > top, 2 + (a3 > a2), (a1 > a0).astype(np.int64))
    else:
        # row-major order inside a window coincides with flat order in x, so
        # argmax's first-occurrence rule is the lowest-flat-index tiebreak
        vw = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 3, 5)).reshape(b, c, ho, wo, window * window)
        local = vw.argmax(axis=-1)
        pooled = vw.max(axis=-1)
    gr = np.arange(ho)[None, None, :, None] * window + local // window
    gc = np.arange(wo)[None, None, None, :] * window + local % window
    off = np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]
    flat = (off * h + gr) * w + gc
    return (
        _guard(pooled.reshape(lead + (c, ho, wo)), "maxpool2d"),
        flat.reshape(lead + (c, ho, wo)),
    )


# ---------------------------------------------------------------------------
# patch unfold / fold


def unfold(x, d: int) -> np.ndarray:
    """Partition (C, H, W) into non-overlapping d x d patches.

    Row i holds the patch at grid position (i // G_w, i % G_w), flattened
    channel-major then patch-row-major, so each row has D = C * d * d values.
    Lossless: :func:`fold` inverts it bitwise.
    """
    x = as_f64(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"unfold input must be (C, H, W) or (B, C, H, W), got {x.shape}")
    if d < 1:
        raise ValueError(f"unfold patch size must be >= 1, got {d}")
    c, h, w = x.shape[-3:]
    if h % d or w % d:
        raise ShapeError(f"unfold extents {h}x{w} not divisible by patch size {d}")
    lead = x.shape[:-3]
    gh, gw = h // d, w // d
    xb = x.reshape((-1, c, gh, d, gw, d))
    t = xb.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(t).reshape(lead + (gh * gw, c * d * d))


def fold(tokens, geometry) -> np.ndarray:
    """Inverse of :func:`unfold`; ``geometry`` is ``(C, H, W, d)``."""
    tokens = as_f64(tokens)
    c, h, w, d = geometry
    if tokens.ndim not in (2, 3):
        raise ShapeError(f"fold tokens must be (N, D) or (B, N, D), got {tokens.shape}")
    if d < 1 or h % d or w % d:
        raise ShapeError(f"fold geometry {geometry} inconsistent with patch size {d}")
    gh, gw = h // d, w // d
    if tokens.shape[-2:] != (gh * gw, c * d * d):
        raise ShapeError(
            f"fold tokens {tokens.shape} inconsistent with geometry {geometry} "
            f"(expected ({gh * gw}, {c * d * d}))"
        )
    lead = tokens.shape[:-2]
    tb = tokens.reshape((-1, gh, gw, c, d, d))
    x = tb.transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x).reshape(lead + (c, h, w))


# ---------------------------------------------------------------------------
# elementwise suite


def _binary(ufunc, a, b, op: str) -> np.ndarray:
    a, b = as_f64(a), as_f64(b)
    try:
        out = ufunc(a, b)
    except ValueError as err:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from err
    return _guard(out, op)


def add(a, b) -> np.ndarray:
    return _binary(np.add, a, b, "add")


def sub(a, b) -> np.ndarray:
    return _binary(np.subtract, a, b, "sub")


def mul(a, b) -> np.ndarray:
    return _binary(np.multiply, a, b, "mul")


def scale(x, s: float) -> np.ndarray:
    return _guard(as_f64(x) * float(s), "scale")


def relu(x) -> np.ndarray:
    return np.maximum(as_f64(x), 0.0)


def sigmoid(x) -> np.ndarray:
    """Logistic function, computed on the stable branch for either sign."""
    x = as_f64(x)
    t = np.exp(-np.abs(x))
    return _guard(np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t)), "sigmoid")


def softplus(x) -> np.ndarray:
    """ln(1 + e^x) with overflow-safe tails: x for x > 30, e^x for x < -30."""
    x = as_f64(x)
    out = np.log1p(np.exp(np.clip(x, -30.0, 30.0)))
    out = np.where(x > 30.0, x, out)
    out = np.where(x < -30.0, np.exp(np.minimum(x, -30.0)), out)
    return _guard(out, "softplus")


def matmul(a, b) -> np.ndarray:
    """Matrix product: (M, K) @ (K, N) -> (M, N) or (..., M, K) @ (K,) -> (..., M).

    The matrix-vector form accumulates each row in sorted order so scores are
    invariant to coordinate permutations shared by both operands.
    """
    a, b = as_f64(a), as_f64(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} do not match")
        y = a @ b
    elif a.ndim >= 2 and b.ndim == 1:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} do not match")
        y = _sorted_sum(a * b)
    else:
        raise ShapeError(f"matmul supports (M,K)@(K,N) or (...,M,K)@(K,), got {a.shape} @ {b.shape}")
    return _guard(y, "matmul")


def dot(a, b) -> np.float64:
    """Inner product of two equal-length vectors, order-canonical."""
    a, b = as_f64(a), as_f64(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot requires equal-length vectors, got {a.shape} and {b.shape}")
    out = _sorted_sum(a * b)
    if not np.isfinite(out):
        raise NonFiniteError("dot: non-finite output")
    return np.float64(out)


def sum(x, axis=None) -> np.ndarray:
    return _guard(np.sum(as_f64(x), axis=axis), "sum")


def mean(x, axis=None) -> np.ndarray:
    return _guard(np.mean(as_f64(x), axis=axis), "mean")


def row_norms(x) -> np.ndarray:
    """Euclidean norm of each last-axis row, order-canonical."""
    x = as_f64(x)
    if x.ndim < 2:
        raise ShapeError(f"row_norms input must be at least 2-D, got {x.shape}")
    return np.sqrt(_sorted_sum(x * x))


def l2norm_rows(x, eps: float = 1e-8) -> np.ndarray:
    """Divide each row by (||row||_2 + eps); zero rows map to zero for eps > 0."""
    x = as_f64(x)
    if x.ndim < 2:
        raise ShapeError(f"l2norm_rows input must be at least 2-D, got {x.shape}")
    if eps < 0:
        raise ValueError(f"l2norm_rows eps must be >= 0, got {eps}")
    return _guard(x / (row_norms(x) + eps)[..., None], "l2norm_rows")


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis, max-shifted for stability."""
    logits = as_f64(logits)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return _guard(e / e.sum(axis=-1, keepdims=True), "softmax")


def cross_entropy_logits(logits, label):
    """Softmax cross-entropy from raw logits, log-sum-exp stabilized.

    ``logits`` of shape (K,) with an int label gives a scalar; (B, K) with a
    length-B label sequence gives the per-sample vector.
    """
    logits = as_f64(logits)
    if logits.ndim == 1:
        label = int(label)
        if not 0 <= label < logits.shape[0]:
            raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
        picked = logits[label]
    elif logits.ndim == 2:
        label = np.asarray(label, dtype=np.int64)
        if label.shape != (logits.shape[0],):
            raise ShapeError(f"labels {label.shape} do not match logits {logits.shape}")
        if label.size and (label.min() < 0 or label.max() >= logits.shape[1]):
            raise ValueError(f"label out of range for {logits.shape[1]} classes")
        picked = logits[np.arange(logits.shape[0]), label]
    else:
        raise ShapeError(f"cross_entropy_logits expects (K,) or (B, K), got {logits.shape}")
    m = logits.max(axis=-1)
    lse = m + np.log(np.exp(logits - m[..., None]).sum(axis=-1))
    return _guard(np.asarray(lse - picked), "cross_entropy_logits")


# ---------------------------------------------------------------------------
# resampling


def bilinear_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a 2-D array with half-pixel-centered
    coordinates and edge clamping."""
    img = as_f64(img)
    if img.ndim != 2:
        raise ShapeError(f"bilinear_resize input must be 2-D, got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize output extents must be >= 1")
    h, w = img.shape
    sy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    out = (
        img[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + img[np.ix_(y0, x1)] * (1 - wy) * wx
        + img[np.ix_(y1, x0)] * wy * (1 - wx)
        + img[np.ix_(y1, x1)] * wy * wx
    )
    return _guard(out, "bilinear_resize")
