"""Structured differentiable operations for volumetric segmentation nets.

Feature maps are laid out (N, C, D, H, W); 1D signals are (N, C, L).
Convolutions run as one im2col GEMM per call; their backward passes reuse
the materialized column matrix.  Shape errors raise ``ValueError`` with a
description of the mismatch before any computation happens.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_op


def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected int or length-3 tuple, got {v!r}")
    return t


def conv3d(x, weight, bias, stride=1, padding=0):
    """3D cross-correlation: (N,C,D,H,W) * (Cout,C,kd,kh,kw) -> (N,Cout,D',H',W').

    Output extents follow D' = (D + 2*pad - k) // stride + 1.  Differentiable
    with respect to input, weight and bias.
    """
    stride = _triple(stride)
    padding = _triple(padding)
    if x.data.ndim != 5:
        raise ValueError(f"conv3d: input must be 5D (N,C,D,H,W), got {x.shape}")
    if weight.data.ndim != 5:
        raise ValueError(f"conv3d: weight must be 5D (Cout,C,kd,kh,kw), got {weight.shape}")
    n, c, d, h, w = x.shape
    cout, cin, kd, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"conv3d: input has {c} channels but weight expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    if any(s < 1 for s in stride):
        raise ValueError(f"conv3d: stride must be >= 1, got {stride}")
    padded = (d + 2 * padding[0], h + 2 * padding[1], w + 2 * padding[2])
    if kd > padded[0] or kh > padded[1] or kw > padded[2]:
        raise ValueError(
            f"conv3d: kernel ({kd},{kh},{kw}) larger than padded input {padded}"
        )

    xp = x.data
    if any(padding):
        xp = np.pad(xp, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    od, oh, ow = win.shape[2:5]
    npos = n * od * oh * ow
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(npos, c * kd * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out_mat = cols @ wmat.T + bias.data
    out_data = out_mat.reshape(n, od, oh, ow, cout).transpose(0, 4, 1, 2, 3)

    out = make_op(np.ascontiguousarray(out_data), (x, weight, bias), "conv3d")
    if out._tracked():
        def backward():
            gmat = out.grad.transpose(0, 2, 3, 4, 1).reshape(npos, cout)
            if weight.requires_grad:
                weight._accumulate((gmat.T @ cols).reshape(weight.shape))
            if bias.requires_grad:
                bias._accumulate(gmat.sum(axis=0))
            if x.requires_grad:
                gcols = (gmat @ wmat).reshape(n, od, oh, ow, c, kd, kh, kw)
                gcols = gcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
                gx = np.zeros(
                    (n, c, d + 2 * padding[0], h + 2 * padding[1], w + 2 * padding[2]),
                    dtype=x.dtype,
                )
                for a in range(kd):
                    for b in range(kh):
                        for cc in range(kw):
                            gx[:, :,
                               a : a + stride[0] * od : stride[0],
                               b : b + stride[1] * oh : stride[1],
                               cc : cc + stride[2] * ow : stride[2]] += gcols[..., a, b, cc]
                self_slice = (
                    slice(None), slice(None),
                    slice(padding[0], padding[0] + d),
                    slice(padding[1], padding[1] + h),
                    slice(padding[2], padding[2] + w),
                )
                x._accumulate(gx[self_slice])
        out._backward = backward
    return out


def conv1d(x, weight, bias, stride=1, padding=0):
    """1D cross-correlation: (N,C,L) * (Cout,C,k) -> (N,Cout,L')."""
    stride = int(stride)
    padding = int(padding)
    if x.data.ndim != 3:
        raise ValueError(f"conv1d: input must be 3D (N,C,L), got {x.shape}")
    if weight.data.ndim != 3:
        raise ValueError(f"conv1d: weight must be 3D (Cout,C,k), got {weight.shape}")
    n, c, length = x.shape
    cout, cin, k = weight.shape
    if cin != c:
        raise ValueError(f"conv1d: input has {c} channels but weight expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    if k > length + 2 * padding:
        raise ValueError(f"conv1d: kernel {k} larger than padded input {length + 2 * padding}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding)))
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    ol = win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * ol, c * k)
    wmat = weight.data.reshape(cout, -1)
    out_data = (cols @ wmat.T + bias.data).reshape(n, ol, cout).transpose(0, 2, 1)

    out = make_op(np.ascontiguousarray(out_data), (x, weight, bias), "conv1d")
    if out._tracked():
        def backward():
            gmat = out.grad.transpose(0, 2, 1).reshape(n * ol, cout)
            if weight.requires_grad:
                weight._accumulate((gmat.T @ cols).reshape(weight.shape))
            if bias.requires_grad:
                bias._accumulate(gmat.sum(axis=0))
            if x.requires_grad:
                gcols = (gmat @ wmat).reshape(n, ol, c, k).transpose(0, 2, 1, 3)
                gx = np.zeros((n, c, length + 2 * padding), dtype=x.dtype)
                for a in range(k):
                    gx[:, :, a : a + stride * ol : stride] += gcols[..., a]
                x._accumulate(gx[:, :, padding : padding + length])
        out._backward = backward
    return out


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-(sample, channel) normalization over spatial dims, then affine.

    Backward uses the usual normalization gradient
    dx = (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) / std
    with the means taken over the spatial axes of each (n, c) group.
    """
    if x.data.ndim < 3:
        raise ValueError(f"instance_norm: input must be (N,C,spatial...), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"instance_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}"
        )
    axes = tuple(range(2, x.data.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    std = np.sqrt(var + _const(eps, x.dtype))
    xhat = (x.data - mu) / std
    gshape = (1, c) + (1,) * len(axes)
    out = make_op(xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape),
                  (x, gamma, beta), "instance_norm")
    if out._tracked():
        def backward():
            g = out.grad
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0,) + axes))
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0,) + axes))
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(gshape)
                m1 = dxhat.mean(axis=axes, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
                x._accumulate((dxhat - m1 - xhat * m2) / std)
        out._backward = backward
    return out


def pool_avg_over_axes(x, keep_axis):
    """Average a (N,C,D,H,W) map over two spatial axes, keeping one.

    ``keep_axis`` indexes the spatial dims: 0 = D, 1 = H, 2 = W.  Returns
    (N, C, L) where L is the kept extent.
    """
    if x.data.ndim != 5:
        raise ValueError(f"pool_avg_over_axes: input must be 5D, got {x.shape}")
    if keep_axis not in (0, 1, 2):
        raise ValueError(f"pool_avg_over_axes: keep_axis must be 0, 1 or 2, got {keep_axis}")
    reduce_axes = tuple(a + 2 for a in (0, 1, 2) if a != keep_axis)
    count = x.shape[reduce_axes[0]] * x.shape[reduce_axes[1]]
    out = make_op(x.data.mean(axis=reduce_axes), (x,), "pool_avg")
    if out._tracked():
        def backward():
            g = np.expand_dims(out.grad, reduce_axes)
            x._accumulate(np.broadcast_to(g, x.data.shape) / _const(count, x.dtype))
        out._backward = backward
    return out


def max_pool3d(x):
    """2x2x2 max pooling with stride 2; spatial extents must be even."""
    if x.data.ndim != 5:
        raise ValueError(f"max_pool3d: input must be 5D, got {x.shape}")
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"max_pool3d: spatial extents must be even, got {(d, h, w)}")
    blocks = (
        x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d // 2, h // 2, w // 2, 8)
    )
    idx = blocks.argmax(axis=-1)
    out = make_op(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], (x,), "max_pool3d")
    if out._tracked():
        def backward():
            gb = np.zeros_like(blocks)
            np.put_along_axis(gb, idx[..., None], out.grad[..., None], axis=-1)
            gx = (
                gb.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
                .transpose(0, 1, 2, 5, 3, 6, 4, 7)
                .reshape(n, c, d, h, w)
            )
            x._accumulate(gx)
        out._backward = backward
    return out


def up_conv3d(x, weight, bias):
    """Transposed convolution with kernel 2, stride 2: doubles extents.

    Weight layout is (Cin, Cout, 2, 2, 2); each input voxel paints a 2x2x2
    output block, so blocks never overlap.
    """
    if x.data.ndim != 5:
        raise ValueError(f"up_conv3d: input must be 5D, got {x.shape}")
    if weight.data.ndim != 5 or weight.shape[2:] != (2, 2, 2):
        raise ValueError(f"up_conv3d: weight must be (Cin,Cout,2,2,2), got {weight.shape}")
    n, c, d, h, w = x.shape
    cin, cout = weight.shape[:2]
    if cin != c:
        raise ValueError(f"up_conv3d: input has {c} channels but weight expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"up_conv3d: bias shape {bias.shape} != ({cout},)")
    t = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (N,D,H,W,Cout,2,2,2)
    out_data = (
        t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(n, cout, 2 * d, 2 * h, 2 * w)
        + bias.data.reshape(1, cout, 1, 1, 1)
    )
    out = make_op(np.ascontiguousarray(out_data), (x, weight, bias), "up_conv3d")
    if out._tracked():
        def backward():
            gt = (
                out.grad.reshape(n, cout, d, 2, h, 2, w, 2)
                .transpose(0, 2, 4, 6, 1, 3, 5, 7)
            )  # (N,D,H,W,Cout,2,2,2)
            if weight.requires_grad:
                gw = np.tensordot(x.data, gt, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
                weight._accumulate(gw)
            if bias.requires_grad:
                bias._accumulate(out.grad.sum(axis=(0, 2, 3, 4)))
            if x.requires_grad:
                gx = np.tensordot(gt, weight.data, axes=([4, 5, 6, 7], [1, 2, 3, 4]))
                x._accumulate(np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3)))
        out._backward = backward
    return out


def concat(tensors, axis):
    """Concatenate along one axis; all other extents must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis):
            raise ValueError(f"concat: incompatible shapes {ref} vs {s} along axis {axis}")
    out = make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out._tracked():
        extents = [t.data.shape[axis] for t in tensors]
        def backward():
            start = 0
            for t, e in zip(tensors, extents):
                if t.requires_grad:
                    key = [slice(None)] * out.grad.ndim
                    key[axis] = slice(start, start + e)
                    t._accumulate(out.grad[tuple(key)])
                start += e
        out._backward = backward
    return out


def broadcast_mul(gate, features, axis):
    """Multiply (N,C,D,H,W) features by a (N,C,L) gate along one spatial axis.

    Each (n, c) spatial slice is scaled by the gate value at its coordinate
    along ``axis`` (0 = D, 1 = H, 2 = W).
    """
    if features.data.ndim != 5 or gate.data.ndim != 3:
        raise ValueError(
            f"broadcast_mul: need features (N,C,D,H,W) and gate (N,C,L), "
            f"got {features.shape} and {gate.shape}"
        )
    if axis not in (0, 1, 2):
        raise ValueError(f"broadcast_mul: axis must be 0, 1 or 2, got {axis}")
    n, c = features.shape[:2]
    if gate.shape[:2] != (n, c) or gate.shape[2] != features.shape[2 + axis]:
        raise ValueError(
            f"broadcast_mul: gate {gate.shape} does not match features "
            f"{features.shape} along axis {axis}"
        )
    gshape = [n, c, 1, 1, 1]
    gshape[2 + axis] = gate.shape[2]
    gview = gate.data.reshape(gshape)
    other_axes = tuple(a + 2 for a in (0, 1, 2) if a != axis)
    out = make_op(features.data * gview, (gate, features), "broadcast_mul")
    if out._tracked():
        def backward():
            if features.requires_grad:
                features._accumulate(out.grad * gview)
            if gate.requires_grad:
                gate._accumulate((out.grad * features.data).sum(axis=other_axes))
        out._backward = backward
    return out


def channel_affine(x, scale, bias):
    """Per-channel scale and shift for (N,C,...) tensors."""
    c = x.shape[1]
    if scale.shape != (c,) or bias.shape != (c,):
        raise ValueError(
            f"channel_affine: scale/bias must have shape ({c},), got {scale.shape}/{bias.shape}"
        )
    cshape = (1, c) + (1,) * (x.data.ndim - 2)
    out = make_op(x.data * scale.data.reshape(cshape) + bias.data.reshape(cshape),
                  (x, scale, bias), "channel_affine")
    if out._tracked():
        reduce_axes = (0,) + tuple(range(2, x.data.ndim))
        def backward():
            if x.requires_grad:
                x._accumulate(out.grad * scale.data.reshape(cshape))
            if scale.requires_grad:
                scale._accumulate((out.grad * x.data).sum(axis=reduce_axes))
            if bias.requires_grad:
                bias._accumulate(out.grad.sum(axis=reduce_axes))
        out._backward = backward
    return out


DICE_SMOOTH = 1e-5


def dice_ce_loss(logits, target):
    """Cross-entropy plus (1 - soft Dice) training loss.

    ``logits`` is (N,K,D,H,W); ``target`` an integer labelmap (N,D,H,W).
    The Dice term applies softmax probabilities, averages the smoothed
    per-sample soft Dice over foreground classes, and is subtracted from 1.
    The returned scalar carries ``ce_value`` / ``dice_value`` floats for
    logging.
    """
    if logits.data.ndim != 5:
        raise ValueError(f"dice_ce_loss: logits must be 5D (N,K,D,H,W), got {logits.shape}")
    target = np.asarray(target)
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(
            f"dice_ce_loss: target shape {target.shape} does not match logits {logits.shape}"
        )
    n, k = logits.shape[:2]
    if target.min() < 0 or target.max() >= k:
        raise ValueError(f"dice_ce_loss: target labels outside [0, {k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    logp = (z - zmax) - np.log(denom)

    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, target[:, None], _const(1.0, z.dtype), axis=1)

    total_voxels = target.size
    ce = -float((logp * onehot).sum()) / total_voxels

    spatial = tuple(range(2, z.ndim))
    smooth = DICE_SMOOTH
    inter = (p * onehot).sum(axis=spatial)          # (N, K)
    psum = p.sum(axis=spatial)
    tsum = onehot.sum(axis=spatial)
    union = psum + tsum
    dice_nk = (2.0 * inter + smooth) / (union + smooth)
    fg = dice_nk[:, 1:]
    dice_mean = float(fg.mean()) if fg.size else 1.0

    loss_value = np.asarray(ce + (1.0 - dice_mean), dtype=z.dtype)
    out = make_op(loss_value.reshape(()), (logits,), "dice_ce_loss")
    out.ce_value = ce
    out.dice_value = 1.0 - dice_mean
    if out._tracked():
        def backward():
            g = float(out.grad)
            # cross-entropy piece, already chained through softmax
            gz = (p - onehot) / total_voxels
            if fg.size:
                # d(-mean dice)/dp per class and sample, then softmax chain
                gp = np.zeros_like(p)
                scale = 1.0 / fg.size
                for kk in range(1, k):
                    u = union[:, kk] + smooth
                    num = 2.0 * inter[:, kk] + smooth
                    tk = onehot[:, kk]
                    coeff_t = (2.0 / u).reshape((n,) + (1,) * len(spatial))
                    coeff_all = (num / (u * u)).reshape((n,) + (1,) * len(spatial))
                    gp[:, kk] = -scale * (tk * coeff_t - coeff_all)
                gz = gz + p * (gp - (gp * p).sum(axis=1, keepdims=True))
            logits._accumulate((g * gz).astype(z.dtype))
        out._backward = backward
    return out


def _const(v, dtype):
    return float(v)
