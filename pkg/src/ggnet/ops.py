"""Differentiable kernels: convolution, activations, bilinear sampling, weighted
deformable aggregation, and the small glue ops the heads and losses need.

Every op follows the same pattern: compute the forward value (reductions
accumulate in float64, storage stays float32), and if a tape is active, record
a closure that reads ``out.grad`` and accumulates into the inputs' ``grad``
buffers. ``maxpool_nms`` and ``topk`` are inference-only and record nothing.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ConfigError, ShapeError, Tensor, active_tape

# Running tally of op invocations, used by the inference-graph audit.
op_counts: dict[str, int] = {}


def reset_op_counts() -> None:
    op_counts.clear()


def _count(name: str) -> None:
    op_counts[name] = op_counts.get(name, 0) + 1


class ConvParams:
    """Square-kernel convolution parameters.

    ``weight`` is (out_ch, in_ch, k, k); ``bias`` is stored as a (1, out_ch, 1, 1)
    tensor so it rides the same gradient/checkpoint machinery as weights.
    """

    __slots__ = ("weight", "bias", "stride", "padding")

    def __init__(self, weight: Tensor, bias, stride: int = 1, padding: int = 0):
        if weight.shape[2] != weight.shape[3]:
            raise ConfigError(f"kernels must be square, got {weight.shape[2]}x{weight.shape[3]}")
        self.weight = weight
        out_ch = weight.shape[0]
        if isinstance(bias, Tensor):
            if bias.shape != (1, out_ch, 1, 1):
                raise ShapeError(f"bias shape {bias.shape} != (1, {out_ch}, 1, 1)")
            self.bias = bias
        else:
            arr = np.asarray(bias, dtype=np.float32).reshape(-1)
            if arr.size != out_ch:
                raise ShapeError(f"bias needs {out_ch} values, got {arr.size}")
            self.bias = Tensor((1, out_ch, 1, 1), arr)
        if stride < 1:
            raise ConfigError(f"stride must be positive, got {stride}")
        if padding < 0:
            raise ConfigError(f"padding must be nonnegative, got {padding}")
        self.stride = int(stride)
        self.padding = int(padding)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def tensors(self):
        return [("weight", self.weight), ("bias", self.bias)]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Unfold (B, C, H, W) into patch rows (B, C*k*k, ho*wo), float32 copy."""
    b, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = x.strides
    win = as_strided(x, (b, c, k, k, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return win.reshape(b, c * k * k, ho * wo)


def _col2im(gcol: np.ndarray, b, c, h, w, k, stride, padding, ho, wo) -> np.ndarray:
    """Fold patch-row gradients back onto the (B, C, H, W) input."""
    gx = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    g6 = gcol.reshape(b, c, k, k, ho, wo)
    for ky in range(k):
        for kx in range(k):
            gx[:, :, ky:ky + ho * stride:stride, kx:kx + wo * stride:stride] += g6[:, :, ky, kx]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def _contract(patches64: np.ndarray, params: ConvParams) -> np.ndarray:
    """Shared contraction for conv2d and deform_aggregate: (B,CKK,N) -> (B,out,N).

    Both paths must run through here so the zero-offset/unit-weight degeneration
    is bitwise exact.
    """
    w = params.weight.data.reshape(params.out_channels, -1).astype(np.float64)
    out = np.matmul(w[None], patches64)
    out += params.bias.data.reshape(1, -1, 1).astype(np.float64)
    return out


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation with the given params; output (B, out_ch, Ho, Wo)."""
    _count("conv2d")
    b, c, h, w = x.shape
    if c != params.in_channels:
        raise ShapeError(f"input has {c} channels, kernel expects {params.in_channels}")
    k, stride, pad = params.kernel_size, params.stride, params.padding
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv output would be {ho}x{wo} for input {h}x{w}")
    patches = _im2col(x.data, k, stride, pad, ho, wo).astype(np.float64)
    out64 = _contract(patches, params)
    out = Tensor.from_array(out64.reshape(b, params.out_channels, ho, wo).astype(np.float32))

    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None:
                return
            go = out.grad.reshape(b, params.out_channels, ho * wo).astype(np.float64)
            if params.bias.requires_grad:
                params.bias.add_grad(go.sum(axis=(0, 2)).reshape(1, -1, 1, 1))
            if params.weight.requires_grad:
                p64 = _im2col(x.data, k, stride, pad, ho, wo).astype(np.float64)
                gw = np.einsum("bon,bkn->ok", go, p64, optimize=True)
                params.weight.add_grad(gw.reshape(params.weight.shape))
            if x.requires_grad:
                wt = params.weight.data.reshape(params.out_channels, -1).astype(np.float64)
                gcol = np.matmul(wt.T[None], go)
                x.add_grad(_col2im(gcol, b, c, h, w, k, stride, pad, ho, wo))
        t.record(backward)
    return out


def relu(x: Tensor) -> Tensor:
    _count("relu")
    out = Tensor.from_array(np.maximum(x.data, 0))
    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None or not x.requires_grad:
                return
            x.add_grad(out.grad * (x.data > 0))
        t.record(backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    _count("sigmoid")
    out = Tensor.from_array(1.0 / (1.0 + np.exp(-x.data.astype(np.float64))))
    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None or not x.requires_grad:
                return
            s = out.data
            x.add_grad(out.grad * s * (1.0 - s))
        t.record(backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor.from_array(a.data + b.data)
    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None:
                return
            if a.requires_grad:
                a.add_grad(out.grad)
            if b.requires_grad:
                b.add_grad(out.grad)
        t.record(backward)
    return out


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"channel slice [{lo}:{hi}] out of range for {x.shape[1]} channels")
    out = Tensor.from_array(x.data[:, lo:hi].copy())
    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None or not x.requires_grad:
                return
            x.ensure_grad()
            x.grad[:, lo:hi] += out.grad
        t.record(backward)
    return out


def group_mean_channels(x: Tensor, groups: int) -> Tensor:
    """Mean over `groups` equal channel blocks: (B, G*S, H, W) -> (B, S, H, W)."""
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels do not split into {groups} groups")
    s = c // groups
    out64 = x.data.reshape(b, groups, s, h, w).astype(np.float64).mean(axis=1)
    out = Tensor.from_array(out64.astype(np.float32))
    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None or not x.requires_grad:
                return
            g = np.broadcast_to(out.grad[:, None] / groups, (b, groups, s, h, w))
            x.add_grad(g.reshape(b, c, h, w))
        t.record(backward)
    return out


def weighted_sum(x: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Scalar projection sum(x * weights); weights default to ones."""
    if weights is None:
        w = None
        val = x.data.sum(dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(x.shape)
        val = float((x.data.astype(np.float64) * w).sum())
    out = Tensor((1, 1, 1, 1), [val])
    out.exact = float(val)
    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None or not x.requires_grad:
                return
            g = float(out.grad.reshape(-1)[0])
            x.add_grad(np.full(x.shape, g, np.float64) if w is None else g * w)
        t.record(backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    return weighted_sum(x)


def combine_scalars(terms: list[tuple[float, Tensor]]) -> Tensor:
    """Weighted sum of scalar tensors: sum(coef_i * term_i)."""
    total = 0.0
    for coef, term in terms:
        if term.size != 1:
            raise ShapeError("combine_scalars takes scalar tensors")
        total += float(coef) * term.scalar()
    out = Tensor((1, 1, 1, 1), [total])
    out.exact = float(total)
    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None:
                return
            g = float(out.grad.reshape(-1)[0])
            for coef, term in terms:
                if term.requires_grad:
                    term.add_grad(np.full((1, 1, 1, 1), coef * g, np.float64))
        t.record(backward)
    return out


# ===== Bilinear sampling =====

def bilinear_sample(featmap: Tensor, x: float, y: float, channel: int, batch: int = 0) -> float:
    """Bilinear read of one channel at continuous (x, y); zero outside the map."""
    _, _, h, w = featmap.shape
    plane = featmap.data[batch, channel]
    x0 = int(np.ceil(x)) - 1
    y0 = int(np.ceil(y)) - 1
    fx = float(x) - x0
    fy = float(y) - y0
    val = 0.0
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        if 0 <= yi < h and 0 <= xi < w:
            val += wt * float(plane[yi, xi])
    return val


def _sample_corners(data: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Gather the 4 bilinear corners for coords (B, n, P) against (B, C, H, W).

    The cell is chosen as ceil(coord)-1: identical to floor off the integer
    grid, and yields the left-cell subgradient exactly on it. Returns the
    interpolated values (B, C, n, P) float64 plus the pieces the gradients
    need: per-corner values, in-cell fractions, corner indices and validity.
    """
    b, c, h, w = data.shape
    x0 = np.ceil(xs) - 1.0
    y0 = np.ceil(ys) - 1.0
    fx = xs - x0
    fy = ys - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    flat = data.reshape(b, c, h * w)
    corners = []
    valids = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0i + dx
            yi = y0i + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(valid, yi * w + xi, 0).reshape(b, -1)
            v = np.take_along_axis(flat, idx[:, None, :], axis=2)
            v = v.reshape(b, c, *xs.shape[1:]).astype(np.float64)
            v *= valid[:, None]
            corners.append(v)
            valids.append(valid)
    v00, v01, v10, v11 = corners
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    vals = (w00[:, None] * v00 + w01[:, None] * v01
            + w10[:, None] * v10 + w11[:, None] * v11)
    return vals, (corners, valids, (w00, w01, w10, w11), fx, fy, x0i, y0i)


def _tap_grid(k: int, stride: int, padding: int, ho: int, wo: int):
    """Regular sampling positions: (n, ho, wo) x and y, tap-major row order."""
    tx = np.tile(np.arange(k, dtype=np.float64), k)
    ty = np.repeat(np.arange(k, dtype=np.float64), k)
    ox = np.arange(wo, dtype=np.float64) * stride - padding
    oy = np.arange(ho, dtype=np.float64) * stride - padding
    gx = tx[:, None, None] + ox[None, None, :] + np.zeros((1, ho, 1))
    gy = ty[:, None, None] + oy[None, :, None] + np.zeros((1, 1, wo))
    return gx, gy


def deform_aggregate(featmap: Tensor, offsets: Tensor, weights: Tensor,
                     params: ConvParams) -> Tensor:
    """Weighted deformable aggregation.

    For each output pixel and each of the n = k*k taps, sample ``featmap``
    bilinearly at (regular grid position + per-pixel offset), scale by the
    tap's per-pixel weight, then contract with the kernel exactly like conv2d.
    Offsets channel layout: [2t] = tap t's x offset, [2t+1] = its y offset,
    taps in row-major kernel order.
    """
    _count("deform_aggregate")
    b, c, h, w = featmap.shape
    if c != params.in_channels:
        raise ShapeError(f"featmap has {c} channels, kernel expects {params.in_channels}")
    k, stride, pad = params.kernel_size, params.stride, params.padding
    n = k * k
    if offsets.shape[1] != 2 * n or weights.shape[1] != n:
        raise ConfigError(
            f"kernel area {n} needs {2 * n} offset / {n} weight channels, "
            f"got {offsets.shape[1]} / {weights.shape[1]}")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigError(f"deform output would be {ho}x{wo} for input {h}x{w}")
    if offsets.shape != (b, 2 * n, ho, wo) or weights.shape != (b, n, ho, wo):
        raise ShapeError(
            f"offset/weight fields {offsets.shape} / {weights.shape} do not match "
            f"(batch {b}, taps {n}, out {ho}x{wo})")
    p = ho * wo

    def sample_positions():
        gx, gy = _tap_grid(k, stride, pad, ho, wo)
        xs = (gx[None] + offsets.data[:, 0::2].astype(np.float64)).reshape(b, n, p)
        ys = (gy[None] + offsets.data[:, 1::2].astype(np.float64)).reshape(b, n, p)
        return xs, ys

    xs, ys = sample_positions()
    vals, _ = _sample_corners(featmap.data, xs, ys)
    mw = weights.data.astype(np.float64).reshape(b, 1, n, p)
    patches = (vals * mw).reshape(b, c * n, p)
    out64 = _contract(patches, params)
    out = Tensor.from_array(out64.reshape(b, params.out_channels, ho, wo).astype(np.float32))

    t = active_tape()
    if t is not None:
        def backward():
            if out.grad is None:
                return
            go = out.grad.reshape(b, params.out_channels, p).astype(np.float64)
            xs2, ys2 = sample_positions()
            vals2, (corners, valids, cw, fx, fy, x0i, y0i) = _sample_corners(featmap.data, xs2, ys2)
            mw2 = weights.data.astype(np.float64).reshape(b, 1, n, p)
            if params.bias.requires_grad:
                params.bias.add_grad(go.sum(axis=(0, 2)).reshape(1, -1, 1, 1))
            if params.weight.requires_grad:
                patches2 = (vals2 * mw2).reshape(b, c * n, p)
                gw = np.einsum("bon,bkn->ok", go, patches2, optimize=True)
                params.weight.add_grad(gw.reshape(params.weight.shape))
            wt = params.weight.data.reshape(params.out_channels, -1).astype(np.float64)
            gpatch = np.matmul(wt.T[None], go).reshape(b, c, n, p)
            if weights.requires_grad:
                gm = (gpatch * vals2).sum(axis=1)
                weights.add_grad(gm.reshape(b, n, ho, wo))
            gs = gpatch * mw2  # grad w.r.t. each sampled value
            if featmap.requires_grad:
                # Scatter each corner's weighted grad; bincount per channel is
                # far faster than ufunc.at here.
                gflat = np.zeros((b, c, h * w), dtype=np.float64)
                base = (np.arange(b, dtype=np.int64) * (h * w))[:, None, None]
                idx_parts = []
                contrib_parts = []
                for ci in range(4):
                    dy, dx = divmod(ci, 2)
                    xi = x0i + dx
                    yi = y0i + dy
                    wz = cw[ci] * valids[ci]
                    contrib = gs * wz[:, None]  # (b, c, n, p)
                    idx = (np.where(valids[ci], yi * w + xi, 0) + base).reshape(-1)
                    idx_parts.append(idx)
                    contrib_parts.append(contrib.transpose(0, 2, 3, 1).reshape(-1, c))
                all_idx = np.concatenate(idx_parts)
                all_contrib = np.concatenate(contrib_parts, axis=0)
                for ch in range(c):
                    bc = np.bincount(all_idx, weights=all_contrib[:, ch],
                                     minlength=b * h * w)
                    gflat[:, ch] += bc.reshape(b, h * w)
                featmap.add_grad(gflat.reshape(b, c, h, w))
            if offsets.requires_grad:
                v00, v01, v10, v11 = corners
                dvdx = (1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
                dvdy = (1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
                gx = (gs * dvdx).sum(axis=1).reshape(b, n, ho, wo)
                gy = (gs * dvdy).sum(axis=1).reshape(b, n, ho, wo)
                offsets.ensure_grad()
                offsets.grad[:, 0::2] += gx
                offsets.grad[:, 1::2] += gy
        t.record(backward)
    return out


# ===== Peak extraction (inference only) =====

def maxpool_nms(heatmap: Tensor) -> Tensor:
    """Keep values equal to their 3x3 neighborhood max, zero the rest."""
    x = heatmap.data
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (b, c, h, w, 3, 3), (s0, s1, s2, s3, s2, s3))
    local_max = win.max(axis=(-2, -1))
    return Tensor.from_array(np.where(x == local_max, x, 0.0))


def topk(heatmap: Tensor, k: int, batch: int = 0) -> list[tuple[float, int, int, int]]:
    """Top-k entries of one batch item as (score, channel, y, x), descending.

    Ties break by ascending linear index over (channel, y, x), so output is
    deterministic.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    _, c, h, w = heatmap.shape
    flat = heatmap.data[batch].reshape(-1)
    order = np.argsort(-flat, kind="stable")[:min(k, flat.size)]
    out = []
    for i in order:
        i = int(i)
        ch, rest = divmod(i, h * w)
        y, x = divmod(rest, w)
        out.append((float(flat[i]), ch, y, x))
    return out
