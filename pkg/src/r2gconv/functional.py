"""Convolution, sampling, pooling and normalization ops on :class:`Tensor`.

All spatial ops use NCHW layout and cross-correlation (no kernel flip), the
same convention as the mainstream frameworks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_op


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding, groups, transposed=False):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"conv expects 4-d input and weight, got {x_shape} and {w_shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"bad conv config stride={stride} padding={padding} groups={groups}")
    co, cig = w_shape[:2]
    if co % groups:
        raise ValueError(f"groups={groups} does not divide {co} output channels")
    cin = x_shape[1]
    expected = co if transposed else cig * groups
    if cin != expected:
        raise ValueError(f"input has {cin} channels, weight {w_shape} with groups={groups} expects {expected}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_fwd(x, w, stride, padding, groups):
    b, ci, h, wd = x.shape
    co, cig, kh, kw = w.shape
    ho, wo = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = _pad(x, padding)
    if cig == 1 and co == groups:
        out = np.zeros((b, co, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                out += patch * w[None, :, 0, i, j, None, None]
        return out
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    if groups == 1:
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # b, ho, wo, co
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    cols = cols.reshape(b, groups, cig, ho, wo, kh, kw)
    wg = w.reshape(groups, co // groups, cig, kh, kw)
    out = np.einsum("bgchwkl,gockl->bgohw", cols, wg, optimize=True)
    return out.reshape(b, co, ho, wo)


def _conv_grad_input(gout, w, x_shape, stride, padding, groups):
    b, ci, h, wd = x_shape
    co, cig, kh, kw = w.shape
    ho, wo = gout.shape[2:]
    hp, wp = h + 2 * padding, wd + 2 * padding
    gxp = np.zeros((b, ci, hp, wp), dtype=gout.dtype)
    depthwise = cig == 1 and co == groups
    if groups == 1:
        dcols = np.tensordot(gout, w, axes=([1], [0]))  # b, ho, wo, ci, kh, kw
    elif not depthwise:
        gg = gout.reshape(b, groups, co // groups, ho, wo)
        wg = w.reshape(groups, co // groups, cig, kh, kw)
        dcols = np.einsum("bgohw,gockl->bhwgckl", gg, wg, optimize=True).reshape(b, ho, wo, ci, kh, kw)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))
            if depthwise:
                gxp[sl] += gout * w[None, :, 0, i, j, None, None]
            else:
                gxp[sl] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gxp)


def _conv_grad_weight(gout, x, w_shape, stride, padding, groups):
    co, cig, kh, kw = w_shape
    b = x.shape[0]
    ho, wo = gout.shape[2:]
    xp = _pad(x, padding)
    if cig == 1 and co == groups:
        gw = np.zeros(w_shape, dtype=gout.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                gw[:, 0, i, j] = (patch * gout).sum(axis=(0, 2, 3))
        return gw
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    if groups == 1:
        return np.tensordot(gout, cols, axes=([0, 2, 3], [0, 2, 3]))
    cols = cols.reshape(b, groups, cig, ho, wo, kh, kw)
    gg = gout.reshape(b, groups, co // groups, ho, wo)
    return np.einsum("bgohw,bgchwkl->gockl", gg, cols, optimize=True).reshape(w_shape)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation. ``w`` has shape (co, ci/groups, kh, kw)."""
    _check_conv(x.shape, w.shape, stride, padding, groups)
    xd, wdat = x.data, w.data
    out = _conv_fwd(xd, wdat, stride, padding, groups)

    def vjp(g):
        gx = _conv_grad_input(g, wdat, xd.shape, stride, padding, groups) if x.requires_grad else None
        gw = _conv_grad_weight(g, xd, wdat.shape, stride, padding, groups) if w.requires_grad else None
        return gx, gw

    return make_op("conv2d", out, (x, w), vjp)


def conv2d_transposed(y: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``w`` uses the conv2d layout (co, ci/groups, kh, kw); ``y`` carries co
    channels and the result carries ci channels with spatial size
    (h - 1) * stride - 2 * padding + k.
    """
    _check_conv(y.shape, w.shape, stride, padding, groups, transposed=True)
    yd, wdat = y.data, w.data
    b, _, h, wd = yd.shape
    co, cig, kh, kw = wdat.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError("transposed conv output would be empty")
    x_shape = (b, cig * groups, ho, wo)
    out = _conv_grad_input(yd, wdat, x_shape, stride, padding, groups)

    def vjp(g):
        gy = _conv_fwd(g, wdat, stride, padding, groups) if y.requires_grad else None
        gw = _conv_grad_weight(yd, g, wdat.shape, stride, padding, groups) if w.requires_grad else None
        return gy, gw

    return make_op("conv2d_transposed", out, (y, w), vjp)


# ----------------------------------------------------------------------
# affine grids and bilinear sampling (corner-aligned)
# ----------------------------------------------------------------------

def lattice(n: int, dtype) -> np.ndarray:
    """Corner-aligned normalized coordinates of n points; exactly symmetric about 0."""
    if n == 1:
        return np.zeros(1, dtype=dtype)
    u = np.arange(n, dtype=dtype) * 2 - (n - 1)
    return u / dtype(n - 1)


def affine_grid(theta: Tensor, out_shape) -> Tensor:
    """Sampling grid (n, h, w, 2) holding (x, y) = theta @ (x_out, y_out, 1).

    x indexes columns and y indexes rows; the extreme lattice points sit at
    exactly -1 and +1.
    """
    n, _, h, w = out_shape
    if h < 1 or w < 1:
        raise ValueError(f"grid size must be positive, got {h}x{w}")
    if theta.shape != (n, 2, 3):
        raise ValueError(f"theta must have shape ({n}, 2, 3), got {theta.shape}")
    dt = theta.dtype.type
    xs, ys = lattice(w, dt), lattice(h, dt)
    base = np.empty((h, w, 3), dtype=theta.dtype)
    base[..., 0] = xs[None, :]
    base[..., 1] = ys[:, None]
    base[..., 2] = 1
    td = theta.data
    out = np.einsum("hwk,njk->nhwj", base, td)

    def vjp(g):
        return (np.einsum("nhwj,hwk->njk", g, base),)

    return make_op("affine_grid", out, (theta,), vjp)


def _unnormalize(coord: np.ndarray, size: int) -> np.ndarray:
    pix = ((coord + 1) * (size - 1)) / 2
    # lattice points must land exactly on pixels; rounding error would otherwise
    # smear an exact rotation across neighbours
    snapped = np.rint(pix)
    tol = 32 * np.finfo(coord.dtype).eps * max(size, 1)
    return np.where(np.abs(pix - snapped) <= tol, snapped, pix)


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``x`` (n, c, hi, wi) at ``grid`` (n, ho, wo, 2).

    Corner-aligned; samples outside the input read zeros. Differentiable with
    respect to both the input and the grid.
    """
    xd, gd = x.data, grid.data
    if xd.ndim != 4 or gd.ndim != 4 or gd.shape[-1] != 2 or gd.shape[0] != xd.shape[0]:
        raise ValueError(f"grid_sample shape mismatch: input {xd.shape}, grid {gd.shape}")
    if not np.all(np.isfinite(gd)):
        raise ValueError("grid coordinates must be finite")
    n, c, hi, wi = xd.shape
    _, ho, wo, _ = gd.shape
    ix = _unnormalize(gd[..., 0], wi)
    iy = _unnormalize(gd[..., 1], hi)
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    fx = (ix - x0).astype(xd.dtype)
    fy = (iy - y0).astype(xd.dtype)
    nidx = np.arange(n)[:, None, None]

    corners = []
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < hi) & (xx >= 0) & (xx < wi)
            yc, xc = np.clip(yy, 0, hi - 1), np.clip(xx, 0, wi - 1)
            vals = xd[nidx, :, yc, xc] * valid[..., None]  # n, ho, wo, c
            corners.append((dy, dx, wy, wx, valid, yc, xc, vals))

    out = np.zeros((n, ho, wo, c), dtype=xd.dtype)
    for _, _, wy, wx, _, _, _, vals in corners:
        out += (wy * wx)[..., None] * vals
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1)  # n, ho, wo, c
        gx = None
        if x.requires_grad:
            flat = np.zeros((n * hi * wi, c), dtype=xd.dtype)
            for _, _, wy, wx, valid, yc, xc, _ in corners:
                lin = (nidx * hi + yc) * wi + xc
                contrib = gt * (wy * wx * valid)[..., None]
                np.add.at(flat, lin.reshape(-1), contrib.reshape(-1, c))
            gx = flat.reshape(n, hi, wi, c).transpose(0, 3, 1, 2).copy()
        ggrid = None
        if grid.requires_grad:
            d_fx = np.zeros((n, ho, wo), dtype=xd.dtype)
            d_fy = np.zeros((n, ho, wo), dtype=xd.dtype)
            for dy, dx, wy, wx, _, _, _, vals in corners:
                s = (gt * vals).sum(axis=-1)
                d_fx += s * wy * (1 if dx else -1)
                d_fy += s * wx * (1 if dy else -1)
            ggrid = np.stack([d_fx * (wi - 1) / 2, d_fy * (hi - 1) / 2], axis=-1).astype(gd.dtype)
        return gx, ggrid

    return make_op("grid_sample", out, (x, grid), vjp)


# ----------------------------------------------------------------------
# pooling and normalization
# ----------------------------------------------------------------------

def max_pool2d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling over the last two axes of a tensor of any rank >= 2.

    Padding reads -inf. Ties go to the lowest linear index inside the window.
    """
    stride = k if stride is None else stride
    xd = x.data
    lead = xd.shape[:-2]
    h, w = xd.shape[-2:]
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"pool window {k} larger than input {h}x{w}")
    flat = xd.reshape((-1, 1, h, w))
    if padding:
        flat = np.pad(flat, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                      constant_values=-np.inf)
    win = sliding_window_view(flat, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(win.shape[:4] + (k * k,))
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    hp, wp = flat.shape[-2:]

    def vjp(g):
        g = g.reshape(arg.shape)
        gp = np.zeros((arg.shape[0], 1, hp, wp), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                mask = arg == i * k + j
                gp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * mask
        if padding:
            gp = gp[:, :, padding:padding + h, padding:padding + w]
        return (np.ascontiguousarray(gp).reshape(xd.shape),)

    return make_op("max_pool2d", out.reshape(lead + (ho, wo)), (x,), vjp)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None,
               running_var: np.ndarray | None, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm; channels on axis 1, statistics over every other axis.

    For a group feature map (b, c, 4, h, w) the group axis is pooled together
    with batch and space, so gamma/beta have length c. In training mode the
    running buffers are updated in place (unbiased variance, like PyTorch).
    """
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    m = xd.size // c
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            unbiased = var * (m / max(m - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise RuntimeError("batch norm in eval mode needs populated running statistics")
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd, bd = gamma.data, beta.data
    out = xhat * gd.reshape(bshape) + bd.reshape(bshape)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gd.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_op("batch_norm", out.astype(xd.dtype), (x, gamma, beta), vjp)
