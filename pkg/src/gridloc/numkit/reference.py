"""Nested-loop convolution oracles. Slow on purpose; tests only."""

import numpy as np


def conv2d_loops(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                 stride: int = 1, padding: int = 0, dilation: int = 1) -> np.ndarray:
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for y in range(ho):
                for xo in range(wo):
                    acc = float(bias[oc])
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                r = y * stride - padding + i * dilation
                                col = xo * stride - padding + j * dilation
                                if 0 <= r < h and 0 <= col < w:
                                    acc += float(x[b, ic, r, col]) * float(weight[oc, ic, i, j])
                    out[b, oc, y, xo] = acc
    return out


def conv_transpose2d_loops(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Scatter form: every input pixel spreads its kernel onto the output."""
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    out += np.asarray(bias, dtype=np.float64)[None, :, None, None]
    for b in range(n):
        for ic in range(cin):
            for y in range(h):
                for xi in range(w):
                    for oc in range(cout):
                        for i in range(kh):
                            for j in range(kw):
                                r = y * stride - padding + i
                                col = xi * stride - padding + j
                                if 0 <= r < ho and 0 <= col < wo:
                                    out[b, oc, r, col] += float(x[b, ic, y, xi]) * float(weight[ic, oc, i, j])
    return out


def bilinear_point(feature: np.ndarray, x: float, y: float) -> np.ndarray:
    """Four-neighbor weighting of a single point, zero outside the map."""
    _, h, w = feature.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    out = np.zeros(feature.shape[0], dtype=np.float64)
    for r, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for c, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= r < h and 0 <= c < w:
                out += wy * wx * feature[:, r, c]
    return out
