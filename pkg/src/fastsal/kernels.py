"""CNN kernels over 4-D (N,C,H,W) tensors: convolution, normalization,
resampling, and channel rearrangement, each with a taped backward pass.

Convolution uses the cross-correlation convention (no kernel flip) with zero
padding. 1x1 stride-1 convolutions take a pure matmul fast path; depthwise
convolutions vectorize over channels; other grouped cases fall back to a
per-group loop.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericDomainError, ShapeError
from .tensor import Tensor, apply_op

__all__ = [
    "conv2d", "batch_norm", "softmax_spatial", "bilinear_resize",
    "pixel_shuffle", "space_to_depth", "concat_channels", "avg_pool2d",
    "minmax_normalize",
]


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _require_4d(t, name):
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N,C,H,W), got {t.data.ndim}-D")


def _im2col(xp, kh, kw, sh, sw, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + ho * sh:sh, v:v + wo * sw:sw]
    return cols


def _col2im(gcols, n, c, hp, wp, kh, kw, sh, sw, ho, wo, dtype):
    dxp = np.zeros((n, c, hp, wp), dtype=dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + ho * sh:sh, v:v + wo * sw:sw] += gcols[:, :, u, v]
    return dxp


def conv2d(x, weight, bias=None, stride=(1, 1), padding=(0, 0), groups=1):
    """2-D cross-correlation. weight is (C_out, C_in/groups, K_h, K_w); bias,
    when present, is a length-C_out vector."""
    _require_4d(x, "conv2d input")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {weight.data.ndim}-D")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1:
        raise ConfigError(f"groups must be positive, got {groups}")
    if cin % groups or cout % groups:
        raise ConfigError(
            f"groups={groups} must divide in_channels={cin} and out_channels={cout}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight channel axis is {cin_g}, expected in_channels/groups = {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit padded input {h + 2 * ph}x{w + 2 * pw}")

    xd, wd = x.data, weight.data
    depthwise = groups == cin and cout == cin

    if kh == 1 and kw == 1 and (sh, sw) == (1, 1) and (ph, pw) == (0, 0) and groups == 1:
        # pointwise fast path: per-pixel matrix multiply
        xm = xd.reshape(n, cin, h * w)
        out = np.matmul(wd.reshape(cout, cin), xm).reshape(n, cout, h, w)

        def bwd(g):
            gm = g.reshape(n, cout, h * w)
            dx = np.matmul(wd.reshape(cout, cin).T, gm).reshape(n, cin, h, w)
            dw = np.einsum("ncp,nkp->ck", gm, xm).reshape(cout, cin, 1, 1)
            db = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (dx, dw, db) if bias is not None else (dx, dw)

    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
        hp, wp = xp.shape[2:]
        cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
        if depthwise:
            out = np.einsum("nckuhw,ciku->nchw", cols, wd, optimize=True)
        elif groups == 1:
            cmat = cols.reshape(n, cin * kh * kw, ho * wo)
            out = np.matmul(wd.reshape(cout, -1), cmat).reshape(n, cout, ho, wo)
        else:
            out = np.empty((n, cout, ho, wo), dtype=xd.dtype)
            cg, og = cin // groups, cout // groups
            for gi in range(groups):
                cmat = cols[:, gi * cg:(gi + 1) * cg].reshape(n, cg * kh * kw, ho * wo)
                wg = wd[gi * og:(gi + 1) * og].reshape(og, -1)
                out[:, gi * og:(gi + 1) * og] = np.matmul(wg, cmat).reshape(n, og, ho, wo)

        def bwd(g):
            if depthwise:
                dw = np.einsum("nckuhw,nchw->cku", cols,
                               g.reshape(n, cout, ho, wo),
                               optimize=True).reshape(wd.shape)
                gcols = np.einsum("nchw,ciku->nckuhw", g, wd, optimize=True)
            elif groups == 1:
                gm = g.reshape(n, cout, ho * wo)
                cmat = cols.reshape(n, cin * kh * kw, ho * wo)
                dw = np.einsum("ncp,nkp->ck", gm, cmat).reshape(wd.shape)
                gcols = np.matmul(wd.reshape(cout, -1).T, gm).reshape(cols.shape)
            else:
                dw = np.empty_like(wd)
                gcols = np.empty_like(cols)
                cg, og = cin // groups, cout // groups
                for gi in range(groups):
                    gm = g[:, gi * og:(gi + 1) * og].reshape(n, og, ho * wo)
                    cmat = cols[:, gi * cg:(gi + 1) * cg].reshape(n, cg * kh * kw, ho * wo)
                    dw[gi * og:(gi + 1) * og] = np.einsum(
                        "ncp,nkp->ck", gm, cmat).reshape(og, cg, kh, kw)
                    gcols[:, gi * cg:(gi + 1) * cg] = np.matmul(
                        wd[gi * og:(gi + 1) * og].reshape(og, -1).T, gm
                    ).reshape(n, cg, kh, kw, ho, wo)
            dxp = _col2im(gcols, n, cin, hp, wp, kh, kw, sh, sw, ho, wo, xd.dtype)
            dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
            db = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return (dx, dw, db) if bias is not None else (dx, dw)

    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
        return apply_op("conv2d", (x, weight, bias), out, bwd)
    return apply_op("conv2d", (x, weight), out, bwd)


def batch_norm(x, gamma, beta, running_mean, running_var, eps=1e-5,
               momentum=0.1, training=False):
    """Per-channel normalize, scale, shift. Training mode normalizes with batch
    statistics and updates the running buffers in place (momentum-weighted);
    eval mode uses the running buffers."""
    _require_4d(x, "batch_norm input")
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError(f"batch_norm {name} must have shape ({c},), got {v.shape}")
    if eps <= 0:
        raise NumericDomainError(f"batch_norm eps must be > 0, got {eps}")
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean.data[:] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[:] = (1 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data
    if np.any(var + eps <= 0):
        raise NumericDomainError("batch_norm: var + eps <= 0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gscaled = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            # batch statistics participate in the graph
            dx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gscaled
                - gscaled.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gscaled * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            dx = gscaled * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta, None, None

    return apply_op("batch_norm", (x, gamma, beta, running_mean, running_var),
                    out, bwd)


def softmax_spatial(x):
    """Spatial probability distribution over H*W per batch item; requires C=1."""
    _require_4d(x, "softmax_spatial input")
    n, c, h, w = x.shape
    if c != 1:
        raise ShapeError(f"softmax_spatial requires C=1, got C={c}")
    flat = x.data.reshape(n, h * w)
    shifted = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = p.reshape(n, c, h, w)

    def bwd(g):
        gf = g.reshape(n, h * w)
        dot = (gf * p).sum(axis=1, keepdims=True)
        return ((p * (gf - dot)).reshape(x.shape),)

    return apply_op("softmax_spatial", (x,), out, bwd)


def _resize_matrix(n_in, n_out, dtype):
    # dense interpolation operator for half-pixel centers (align-corners=false)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    m[rows, i0c] += (1.0 - frac).astype(dtype)
    m[rows, i1c] += frac.astype(dtype)
    return m


def bilinear_resize(x, out_h, out_w):
    """Bilinear resampling with half-pixel centers, applied as separable
    per-axis interpolation matrices. Identity when the target size equals the
    source size."""
    _require_4d(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        def bwd_id(g):
            return (g,)
        return apply_op("bilinear_resize", (x,), x.data.copy(), bwd_id)

    my = _resize_matrix(h, out_h, x.dtype)
    mx = _resize_matrix(w, out_w, x.dtype)
    xr = x.data.reshape(n * c, h, w)
    out = np.matmul(np.matmul(my, xr), mx.T).reshape(n, c, out_h, out_w)

    def bwd(g):
        gr = g.reshape(n * c, out_h, out_w)
        dx = np.matmul(np.matmul(my.T, gr), mx)
        return (dx.reshape(n, c, h, w),)

    return apply_op("bilinear_resize", (x,), out, bwd)


def pixel_shuffle(x, r):
    """Rearrange (N, C, H, W) to (N, C/r^2, rH, rW). Output pixel
    (c, r*y+dy, r*x+dx) reads input channel c*r^2 + dy*r + dx."""
    _require_4d(x, "pixel_shuffle input")
    n, c, h, w = x.shape
    if r < 1:
        raise ConfigError(f"upscale factor must be >= 1, got {r}")
    if c % (r * r):
        raise ConfigError(f"channels {c} not divisible by r^2 = {r * r}")
    co = c // (r * r)
    out = (x.data.reshape(n, co, r, r, h, w)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(n, co, h * r, w * r))

    def bwd(g):
        dg = (g.reshape(n, co, h, r, w, r)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(n, c, h, w))
        return (dg,)

    return apply_op("pixel_shuffle", (x,), np.ascontiguousarray(out), bwd)


def space_to_depth(x, r):
    """Inverse of pixel_shuffle: (N, C, rH, rW) to (N, C*r^2, H, W)."""
    _require_4d(x, "space_to_depth input")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ConfigError(f"spatial size {h}x{w} not divisible by r={r}")
    ho, wo = h // r, w // r
    out = (x.data.reshape(n, c, ho, r, wo, r)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(n, c * r * r, ho, wo))

    def bwd(g):
        dg = (g.reshape(n, c, r, r, ho, wo)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(n, c, h, w))
        return (dg,)

    return apply_op("space_to_depth", (x,), np.ascontiguousarray(out), bwd)


def concat_channels(tensors):
    """Concatenate on the channel axis, preserving list order."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in tensors:
        _require_4d(t, "concat_channels input")
    n, _, h, w = tensors[0].shape
    for i, t in enumerate(tensors[1:], 1):
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError(
                f"concat_channels input {i} has N/H/W {tn}x{th}x{tw}, expected {n}x{h}x{w}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return apply_op("concat_channels", tuple(tensors), out, bwd)


def avg_pool2d(x, k):
    """Non-overlapping k x k average pooling."""
    _require_4d(x, "avg_pool2d input")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"spatial size {h}x{w} not divisible by pool size {k}")
    ho, wo = h // k, w // k
    out = x.data.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def bwd(g):
        dg = np.broadcast_to(g[:, :, :, None, :, None] / (k * k),
                             (n, c, ho, k, wo, k)).reshape(n, c, h, w)
        return (dg.copy(),)

    return apply_op("avg_pool2d", (x,), out, bwd)


def minmax_normalize(x):
    """Per-item min-max scaling over all pixels to [0,1]; a constant item maps
    to all zeros."""
    _require_4d(x, "minmax_normalize input")
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    lo = flat.min(axis=1)
    hi = flat.max(axis=1)
    rng = hi - lo
    safe = np.where(rng > 0, rng, 1.0)
    out = ((flat - lo[:, None]) / safe[:, None]) * (rng > 0)[:, None]
    imin = flat.argmin(axis=1)
    imax = flat.argmax(axis=1)

    def bwd(g):
        gf = g.reshape(n, -1).astype(x.dtype)
        dx = gf / safe[:, None]
        rows = np.arange(n)
        # dependence through the attained min and max
        dmin = -(gf.sum(axis=1) / safe) + (out * gf).sum(axis=1) / safe
        dmax = -(out * gf).sum(axis=1) / safe
        np.add.at(dx, (rows, imin), dmin)
        np.add.at(dx, (rows, imax), dmax)
        dx *= (rng > 0)[:, None]
        return (dx.reshape(x.shape),)

    return apply_op("minmax_normalize", (x,), out.reshape(x.shape), bwd)
