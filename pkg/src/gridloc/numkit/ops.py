"""
Differentiable primitives.

Every function takes Tensors, computes its forward result with numpy and
records a backward closure on the active tape. Convolutions use an
im2col-style gather per kernel tap; ``reference`` holds the nested-loop
oracles they are tested against.
"""

from typing import Sequence

import numpy as np

from ..errors import InputError, ShapeError
from .tensor import Tensor, record


def _require_ndim(op: str, name: str, t: Tensor, ndim: int) -> None:
    if t.ndim != ndim:
        raise ShapeError(f"{op}: {name} must be {ndim}-D, got shape {t.shape}")


def _require_same_shape(op: str, a: Tensor, b) -> None:
    shape_b = b.shape
    if a.shape != shape_b:
        for dim, (x, y) in enumerate(zip(a.shape, shape_b)):
            if x != y:
                raise ShapeError(f"{op}: shapes {a.shape} and {shape_b} differ at dim {dim} ({x} != {y})")
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {shape_b}")


# =============================================================================
# ELEMENTWISE AND STRUCTURAL
# =============================================================================

def add(*tensors: Tensor) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    if not tensors:
        raise InputError("add: need at least one tensor")
    for t in tensors[1:]:
        _require_same_shape("add", tensors[0], t)
    result = tensors[0].data.copy()
    for t in tensors[1:]:
        result += t.data

    def backward(g):
        return [g] * len(tensors)

    return record("add", tensors, result, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return record("scale", (x,), x.data * factor, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return record("relu", (x,), x.data * mask, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return record("reshape", (x,), x.data.reshape(shape), backward)


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[:, start:stop]``."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"take_channels: range [{start}, {stop}) outside dim 1 of size {x.shape[1]}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return record("take_channels", (x,), x.data[:, start:stop], backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (R, D) and weight (O, D)."""
    _require_ndim("linear", "input", x, 2)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features (dim 1) {x.shape[1]} != weight in-features {weight.shape[1]}")
    result = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return record("linear", (x, weight, bias), result, backward)


def grouped_pointwise(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Per-group 1x1 output heads.

    x: (R, G, C, H, W), weight: (G, C), bias: (G,) -> (R, G, H, W). Group g
    only sees its own C channels.
    """
    _require_ndim("grouped_pointwise", "input", x, 5)
    if x.shape[1:3] != weight.shape:
        raise ShapeError(f"grouped_pointwise: input groups/channels {x.shape[1:3]} != weight shape {weight.shape}")
    result = np.einsum("rgchw,gc->rghw", x.data, weight.data) + bias.data[None, :, None, None]

    def backward(g):
        gx = np.einsum("rghw,gc->rgchw", g, weight.data)
        gw = np.einsum("rghw,rgchw->gc", g, x.data)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("grouped_pointwise", (x, weight, bias), result, backward)


# =============================================================================
# CONVOLUTIONS
# =============================================================================

def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _gather_taps(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, :, i, j] = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
    return cols


def _check_conv_args(op: str, x: Tensor, weight: Tensor, bias: Tensor, in_dim: int, out_dim: int,
                     stride: int, padding: int, dilation: int = 1) -> None:
    _require_ndim(op, "input", x, 4)
    _require_ndim(op, "weight", weight, 4)
    if x.shape[1] != weight.shape[in_dim]:
        raise ShapeError(f"{op}: input channels (dim 1) {x.shape[1]} != weight dim {in_dim} ({weight.shape[in_dim]})")
    if bias.shape != (weight.shape[out_dim],):
        raise ShapeError(f"{op}: bias shape {bias.shape} != ({weight.shape[out_dim]},)")
    if stride < 1 or padding < 0 or dilation < 1:
        raise InputError(f"{op}: need stride >= 1, padding >= 0, dilation >= 1; got {stride}, {padding}, {dilation}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """
    2-D cross-correlation with dilation.

    x: (N, C, H, W), weight: (O, C, kh, kw), bias: (O,).
    Output size per axis: floor((H + 2p - d(k-1) - 1) / s) + 1.
    """
    _check_conv_args("conv2d", x, weight, bias, 1, 0, stride, padding, dilation)
    n, c, h, w = x.shape
    _, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1:
        raise ShapeError(f"conv2d: kernel does not fit along dim 2 (H={h}, k={kh}, d={dilation}, p={padding})")
    if wo < 1:
        raise ShapeError(f"conv2d: kernel does not fit along dim 3 (W={w}, k={kw}, d={dilation}, p={padding})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _gather_taps(xp, kh, kw, ho, wo, stride, dilation)
    out = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(weight.data, g, axes=([0], [1]))  # (C, kh, kw, N, Ho, Wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            r0 = i * dilation
            for j in range(kw):
                c0 = j * dilation
                dxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += (
                    dcols[:, i, j].transpose(1, 0, 2, 3)
                )
        gx = dxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv2d", (x, weight, bias), np.ascontiguousarray(out), backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Transposed convolution (the input-gradient of conv2d under matching config).

    x: (N, Cin, H, W), weight: (Cin, Cout, k, k), bias: (Cout,).
    Output size per axis: (H - 1) * s - 2p + k.
    """
    _check_conv_args("conv_transpose2d", x, weight, bias, 0, 1, stride, padding)
    if stride not in (1, 2):
        raise InputError(f"conv_transpose2d: stride must be 1 or 2, got {stride}")
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} leaves no output for input {h}x{w}")

    full = np.zeros((n, cout, (h - 1) * stride + kh, (w - 1) * stride + kw), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x.data, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            full[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride] += contrib
    out = full[:, :, padding:padding + ho, padding:padding + wo] + bias.data[None, :, None, None]

    def backward(g):
        gfull = np.zeros_like(full)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                taps = gfull[:, :, i:i + stride * (h - 1) + 1:stride, j:j + stride * (w - 1) + 1:stride]
                gx += np.tensordot(taps, weight.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                gw[:, :, i, j] = np.tensordot(x.data, taps, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv_transpose2d", (x, weight, bias), np.ascontiguousarray(out), backward)


# =============================================================================
# BILINEAR SAMPLING
# =============================================================================

def bilinear_taps(xs: np.ndarray, ys: np.ndarray, height: int, width: int):
    """
    The four interpolation taps of every point.

    Returns a list of (row_index, col_index, weight) triples; taps that fall
    outside the map get weight 0 (their indices are clipped so they stay
    addressable).
    """
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    lx = xs - x0
    ly = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dy, wy in ((0, 1.0 - ly), (1, ly)):
        for dx, wx in ((0, 1.0 - lx), (1, lx)):
            rows = y0 + dy
            cols = x0 + dx
            inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
            taps.append((np.clip(rows, 0, height - 1), np.clip(cols, 0, width - 1), wy * wx * inside))
    return taps


def _sample(feature: np.ndarray, taps) -> np.ndarray:
    out = np.zeros((feature.shape[0],) + taps[0][0].shape, dtype=feature.dtype)
    for rows, cols, weights in taps:
        out += feature[:, rows, cols] * weights.astype(feature.dtype)
    return out


def _scatter(grad_feature: np.ndarray, taps, g: np.ndarray) -> None:
    """Accumulate ``g`` (C, ...) back onto ``grad_feature`` (C, H, W) through the taps."""
    view = grad_feature.transpose(1, 2, 0)
    channels = g.shape[0]
    for rows, cols, weights in taps:
        contrib = (g * weights.astype(g.dtype)).reshape(channels, -1).T
        np.add.at(view, (rows.reshape(-1), cols.reshape(-1)), contrib)


def bilinear_sample(feature: Tensor, points) -> Tensor:
    """
    Sample a (C, H, W) map at real-valued (x, y) points -> (C, P).

    Pixel centers sit on integer coordinates; neighbors outside the map
    contribute zero.
    """
    _require_ndim("bilinear_sample", "feature", feature, 3)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    _, height, width = feature.shape
    taps = bilinear_taps(pts[:, 0], pts[:, 1], height, width)

    def backward(g):
        gf = np.zeros_like(feature.data)
        _scatter(gf, taps, g)
        return (gf,)

    return record("bilinear_sample", (feature,), _sample(feature.data, taps), backward)


def roi_sample_points(box, out_size: int, stride: int):
    """
    Feature-space bin centers of an out x out grid over an image-space box.

    Feature cell k holds image pixels [k*stride, (k+1)*stride) with its value at
    the cell center, hence the half-cell shift after dividing by the stride.
    """
    x_l, y_u, x_r, y_b = box
    steps = (np.arange(out_size, dtype=np.float64) + 0.5) / out_size
    xs = (x_l + steps * (x_r - x_l)) / stride - 0.5
    ys = (y_u + steps * (y_b - y_u)) / stride - 0.5
    return np.meshgrid(xs, ys)


def roi_align(features: Tensor, rois: np.ndarray, out_size: int, stride: int) -> Tensor:
    """
    Batched RoI feature extraction with one bilinear sample per bin.

    features: (N, C, H, W); rois: (R, 5) rows of (batch_index, x_l, y_u, x_r, y_b)
    in image coordinates. Image coordinates are divided by the stride and
    shifted by half a cell so feature cell centers land on integer positions.
    Returns (R, C, out_size, out_size); samples outside the map are zero.
    """
    _require_ndim("roi_align", "features", features, 4)
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    n, channels, height, width = features.shape
    all_taps = []
    out = np.zeros((len(rois), channels, out_size, out_size), dtype=features.data.dtype)
    for r, roi in enumerate(rois):
        b = int(roi[0])
        if not 0 <= b < n:
            raise ShapeError(f"roi_align: batch index {b} outside dim 0 of size {n}")
        xs, ys = roi_sample_points(roi[1:], out_size, stride)
        taps = bilinear_taps(xs, ys, height, width)
        all_taps.append((b, taps))
        out[r] = _sample(features.data[b], taps)

    def backward(g):
        gf = np.zeros_like(features.data)
        for r, (b, taps) in enumerate(all_taps):
            _scatter(gf[b], taps, g[r])
        return (gf,)

    return record("roi_align", (features,), out, backward)


# =============================================================================
# LOSSES
# =============================================================================

def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _bce_terms(logits: Tensor, targets: np.ndarray) -> np.ndarray:
    _require_same_shape("sigmoid_bce", logits, targets)
    if not np.all((targets == 0) | (targets == 1)):
        raise InputError("sigmoid_bce: targets must be 0 or 1")
    z = logits.data
    return np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on logits, in the stable log-sum-exp form."""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    terms = _bce_terms(logits, targets)
    count = terms.size

    def backward(g):
        return ((_sigmoid(logits.data) - targets) * (g / count),)

    return record("sigmoid_bce", (logits,), np.asarray(terms.mean(), dtype=logits.data.dtype), backward)


def weighted_sigmoid_bce(logits: Tensor, targets, weights) -> Tensor:
    """``sum(weights * bce)``; weights select and normalize the elements that count."""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    weights = np.broadcast_to(np.asarray(weights, dtype=logits.data.dtype), logits.shape)
    terms = _bce_terms(logits, targets)

    def backward(g):
        return ((_sigmoid(logits.data) - targets) * weights * g,)

    return record("weighted_sigmoid_bce", (logits,), np.asarray((terms * weights).sum(), dtype=logits.data.dtype), backward)


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Smooth-L1 summed over the last axis, averaged over rows."""
    target = np.asarray(target, dtype=pred.data.dtype)
    _require_same_shape("smooth_l1", pred, target)
    diff = pred.data - target
    absd = np.abs(diff)
    terms = np.where(absd < beta, 0.5 * diff ** 2 / beta, absd - 0.5 * beta)
    rows = max(pred.shape[0], 1)

    def backward(g):
        return (np.where(absd < beta, diff / beta, np.sign(diff)) * (g / rows),)

    return record("smooth_l1", (pred,), np.asarray(terms.sum() / rows, dtype=pred.data.dtype), backward)


def sigmoid(x: Tensor) -> np.ndarray:
    """Probabilities for inference; not recorded on the tape."""
    return _sigmoid(x.data)


def constant(value: float, like: Tensor) -> Tensor:
    """A scalar that carries no gradient, in the dtype of ``like``."""
    return Tensor.wrap(np.asarray(value, dtype=like.data.dtype))
