"""Spatial ops on unbatched (C, H, W) tensors: convolution, normalization,
adaptive pooling and bilinear sampling, all with analytic gradients."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, _as_tensor, apply_op
from .errors import ContractError


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """All kh x kw patches of a padded (C, Hp, Wp) array, subsampled by stride."""
    view = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return view[:, ::stride, ::stride]


def _col2im_add(dcols: np.ndarray, shape: tuple, stride: int) -> np.ndarray:
    """Scatter-add per-patch gradients (C, Ho, Wo, kh, kw) back to (C, Hp, Wp)."""
    c, ho, wo, kh, kw = dcols.shape
    out = np.zeros(shape)
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[
                :, :, :, ki, kj
            ]
    return out


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of (C_in, H, W) with (C_out, C_in/groups, kh, kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ContractError(f"conv2d expects 3-D input and 4-D weight, got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ContractError(
            f"conv2d channel/group mismatch: in={cin} out={cout} groups={groups} w={w.shape}"
        )
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ContractError(f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[1], win.shape[2]
    bias = b.data if b is not None else None

    depthwise = groups == cin and cout == cin
    if depthwise:
        out = np.einsum("chwkl,ckl->chw", win, w.data[:, 0], optimize=True)
    elif groups == 1:
        cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
        out = (w.data.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
    else:
        cg_out = cout // groups
        out = np.empty((cout, ho, wo))
        for g in range(groups):
            wg = w.data[g * cg_out : (g + 1) * cg_out].reshape(cg_out, -1)
            colg = (
                win[g * cin_g : (g + 1) * cin_g]
                .transpose(0, 3, 4, 1, 2)
                .reshape(cin_g * kh * kw, ho * wo)
            )
            out[g * cg_out : (g + 1) * cg_out] = (wg @ colg).reshape(cg_out, ho, wo)
    if bias is not None:
        out = out + bias[:, None, None]

    def bw(dy):
        if depthwise:
            dw = np.einsum("chw,chwkl->ckl", dy, win, optimize=True)[:, None]
            dcols = dy[:, :, :, None, None] * w.data[:, 0][:, None, None]
            dxp = _col2im_add(dcols, xp.shape, stride)
        elif groups == 1:
            cols_b = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
            dy_mat = dy.reshape(cout, -1)
            dw = (dy_mat @ cols_b.T).reshape(w.shape)
            dcols = (w.data.reshape(cout, -1).T @ dy_mat).reshape(cin, kh, kw, ho, wo)
            dxp = _col2im_add(dcols.transpose(0, 3, 4, 1, 2), xp.shape, stride)
        else:
            cg_out = cout // groups
            dw = np.empty(w.shape)
            dxp = np.zeros(xp.shape)
            for g in range(groups):
                sl_o = slice(g * cg_out, (g + 1) * cg_out)
                sl_i = slice(g * cin_g, (g + 1) * cin_g)
                colg = win[sl_i].transpose(0, 3, 4, 1, 2).reshape(cin_g * kh * kw, ho * wo)
                dy_mat = dy[sl_o].reshape(cg_out, -1)
                dw[sl_o] = (dy_mat @ colg.T).reshape(cg_out, cin_g, kh, kw)
                dcolg = (w.data[sl_o].reshape(cg_out, -1).T @ dy_mat).reshape(
                    cin_g, kh, kw, ho, wo
                )
                dxp[sl_i] = _col2im_add(dcolg.transpose(0, 3, 4, 1, 2), xp[sl_i].shape, stride)
        dx = dxp[:, padding : padding + h, padding : padding + wd] if padding else dxp
        db = dy.sum(axis=(1, 2)) if bias is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    inputs = (x, w, b) if b is not None else (x, w)
    return apply_op("conv2d", out, inputs, bw)


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5
) -> Tensor:
    """Normalize over one axis with per-entry scale and shift.

    For token matrices (N, C) use axis=-1; for feature maps (C, H, W) use
    axis=0, which normalizes each spatial position over its channels.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axis = axis % x.ndim
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractError(f"gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = c
    gb = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gb * xhat + beta.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def bw(dy):
        dxhat = dy * gb
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = (dy * xhat).sum(axis=reduce_axes)
        dbeta = dy.sum(axis=reduce_axes)
        return (dx, dgamma, dbeta)

    return apply_op("layer_norm", out, (x, gamma, beta), bw)


def avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling whose bins tile the input exactly."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ContractError(f"avg_pool2d expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ContractError(f"output {out_h}x{out_w} must be within input {h}x{w}")
    starts_h = (np.arange(out_h) * h) // out_h
    starts_w = (np.arange(out_w) * w) // out_w
    lens_h = np.diff(np.append(starts_h, h))
    lens_w = np.diff(np.append(starts_w, w))
    sums = np.add.reduceat(np.add.reduceat(x.data, starts_h, axis=1), starts_w, axis=2)
    counts = lens_h[:, None] * lens_w[None, :]
    out = sums / counts

    def bw(dy):
        scaled = dy / counts
        return (np.repeat(np.repeat(scaled, lens_h, axis=1), lens_w, axis=2),)

    return apply_op("avg_pool2d", out, (x,), bw)


def grid_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Bilinear sampling of (C, H, W) at absolute pixel coords (2, Ho, Wo).

    coords[0] holds x (column) and coords[1] holds y (row) positions.
    Out-of-range coordinates clamp to the border pixel.
    """
    x, coords = _as_tensor(x), _as_tensor(coords)
    if x.ndim != 3 or coords.ndim != 3 or coords.shape[0] != 2:
        raise ContractError(f"grid_sample expects (C,H,W) and (2,Ho,Wo), got {x.shape}, {coords.shape}")
    c, h, w = x.shape
    cx, cy = coords.data[0], coords.data[1]
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    fx = cx - x0
    fy = cy - y0
    x0i = np.clip(x0.astype(np.int64), 0, w - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    v00 = x.data[:, y0i, x0i]
    v01 = x.data[:, y0i, x1i]
    v10 = x.data[:, y1i, x0i]
    v11 = x.data[:, y1i, x1i]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(dy):
        dx_grad = None
        if x._tracked:
            dx_grad = np.zeros((c, h * w))
            flat_idx = [
                (y0i * w + x0i).ravel(),
                (y0i * w + x1i).ravel(),
                (y1i * w + x0i).ravel(),
                (y1i * w + x1i).ravel(),
            ]
            weights = [w00, w01, w10, w11]
            idx_all = np.concatenate(flat_idx)
            for ch in range(c):
                contrib = np.concatenate([(wt * dy[ch]).ravel() for wt in weights])
                dx_grad[ch] = np.bincount(idx_all, weights=contrib, minlength=h * w)
            dx_grad = dx_grad.reshape(c, h, w)
        dc_grad = None
        if coords._tracked:
            ddx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * dy
            ddy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * dy
            dc_grad = np.stack([ddx.sum(axis=0), ddy.sum(axis=0)])
        return (dx_grad, dc_grad)

    return apply_op("grid_sample", out, (x, coords), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear upsampling to double resolution (half-pixel aligned centers)."""
    x = _as_tensor(x)
    c, h, w = x.shape
    ys = (np.arange(2 * h) + 0.5) / 2.0 - 0.5
    xs = (np.arange(2 * w) + 0.5) / 2.0 - 0.5
    coords = Tensor(np.stack(np.meshgrid(xs, ys, indexing="xy")))
    return grid_sample(x, coords)
