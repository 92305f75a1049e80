"""Layer primitives on (N, C, D, H, W) tensors, each with an analytic backward rule.

Convolution is cross-correlation (no kernel flip) over zero-padded input and
is computed per kernel offset: every offset contributes one strided slice of
the padded input, combined over channels with a matmul (dense case) or a
per-channel broadcast (depthwise case).  That keeps memory flat (no im2col
buffer) while the inner loops stay in BLAS.

Trilinear upsampling uses the half-pixel-centers convention
(source coordinate = (i + 0.5)/factor - 0.5, clamped) and is applied as a
separable per-axis linear map, so its backward pass is the exact transpose
of the same matrix.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .autodiff import Tensor, needs_grad, record

__all__ = [
    "conv_output_extent",
    "conv3d",
    "depthwise_separable_conv3d",
    "batch_norm",
    "relu",
    "sigmoid",
    "softmax_channels",
    "activation",
    "trilinear_upsample",
    "global_avg_pool",
    "concat_channels",
    "elementwise_add",
    "elementwise_mul",
    "scale_by_map",
    "channel_mean",
]

_BCAST = (None, slice(None), None, None, None)  # per-channel broadcast index


def _triple(value, name: str) -> tuple[int, int, int]:
    if np.isscalar(value):
        value = (value, value, value)
    out = tuple(int(v) for v in value)
    if len(out) != 3:
        raise ValueError(f"{name} must be an int or a triple, got {value!r}")
    return out


def conv_output_extent(n_in: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    """Spatial output extent of a convolution along one axis."""
    return (n_in + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _check_5d(x: Tensor, name: str) -> None:
    if x.data.ndim != 5:
        raise ValueError(f"{name} must be 5D (N,C,D,H,W), got shape {tuple(x.shape)}")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride=1, padding=0, dilation=1, groups: int = 1) -> Tensor:
    """3D cross-correlation with stride, zero padding, dilation and groups.

    weight has shape (Cout, Cin/groups, kd, kh, kw) with odd kernel extents;
    output extent per axis is floor((in + 2p - d(k-1) - 1)/s) + 1.
    """
    _check_5d(x, "conv3d input")
    if weight.data.ndim != 5:
        raise ValueError(f"conv3d weight must be 5D, got shape {tuple(weight.shape)}")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    dilation = _triple(dilation, "dilation")
    n, cin, *in_sp = x.shape
    cout, cin_g, *kernel = weight.shape
    if any(k % 2 == 0 or k < 1 for k in kernel):
        raise ValueError(f"kernel extents must be odd and positive, got {tuple(kernel)}")
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide in_channels={cin} and out_channels={cout}")
    if cin_g != cin // groups:
        raise ValueError(
            f"weight expects {cin_g * groups} input channels (groups={groups}), input has {cin}"
        )
    if any(s < 1 for s in stride) or any(d < 1 for d in dilation) or any(p < 0 for p in padding):
        raise ValueError("stride/dilation must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {tuple(bias.shape)}")

    out_sp = [conv_output_extent(i, k, s, p, d)
              for i, k, s, p, d in zip(in_sp, kernel, stride, padding, dilation)]
    if any(o < 1 for o in out_sp):
        raise ValueError(
            f"non-positive output extent {tuple(out_sp)} for input {tuple(in_sp)}, "
            f"kernel {tuple(kernel)}, stride {stride}, padding {padding}, dilation {dilation}"
        )

    if any(padding):
        pad_sp = [i + 2 * p for i, p in zip(in_sp, padding)]
        xp = np.zeros((n, cin) + tuple(pad_sp), dtype=np.float64)
        xp[:, :, padding[0]:padding[0] + in_sp[0],
           padding[1]:padding[1] + in_sp[1],
           padding[2]:padding[2] + in_sp[2]] = x.data
    else:
        xp = x.data

    def offset_view(arr, a, b, c):
        return arr[:, :,
                   a * dilation[0]: a * dilation[0] + (out_sp[0] - 1) * stride[0] + 1: stride[0],
                   b * dilation[1]: b * dilation[1] + (out_sp[1] - 1) * stride[1] + 1: stride[1],
                   c * dilation[2]: c * dilation[2] + (out_sp[2] - 1) * stride[2] + 1: stride[2]]

    offsets = [(a, b, c) for a in range(kernel[0]) for b in range(kernel[1]) for c in range(kernel[2])]
    depthwise = groups == cin and cout == cin
    vol = int(np.prod(out_sp))
    wdat = weight.data

    if depthwise:
        out = np.zeros((n, cout) + tuple(out_sp), dtype=np.float64)
        for a, b, c in offsets:
            out += offset_view(xp, a, b, c) * wdat[:, 0, a, b, c][_BCAST]
    else:
        co_g = cout // groups
        out_flat = np.zeros((n, cout, vol), dtype=np.float64)
        for a, b, c in offsets:
            view = offset_view(xp, a, b, c).reshape(n, cin, vol)
            for g in range(groups):
                wg = wdat[g * co_g:(g + 1) * co_g, :, a, b, c]
                out_flat[:, g * co_g:(g + 1) * co_g] += np.matmul(wg[None], view[:, g * cin_g:(g + 1) * cin_g])
        out = out_flat.reshape((n, cout) + tuple(out_sp))
    if bias is not None:
        out += bias.data[_BCAST]

    y = Tensor(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(gout):
        gb = gout.sum(axis=(0, 2, 3, 4)) if bias is not None and needs_grad(bias) else None
        want_x, want_w = needs_grad(x), needs_grad(weight)
        gw = np.zeros_like(wdat) if want_w else None
        gxp = np.zeros_like(xp) if want_x else None
        g_flat = gout.reshape(n, cout, vol)
        for a, b, c in offsets:
            if depthwise:
                view = offset_view(xp, a, b, c)
                if want_w:
                    gw[:, 0, a, b, c] = (gout * view).sum(axis=(0, 2, 3, 4))
                if want_x:
                    offset_view(gxp, a, b, c)[...] += gout * wdat[:, 0, a, b, c][_BCAST]
            else:
                cog = cout // groups
                view = offset_view(xp, a, b, c).reshape(n, cin, vol) if want_w else None
                gx_off = offset_view(gxp, a, b, c) if want_x else None
                for g in range(groups):
                    gg = g_flat[:, g * cog:(g + 1) * cog]
                    if want_w:
                        vg = view[:, g * cin_g:(g + 1) * cin_g]
                        gw[g * cog:(g + 1) * cog, :, a, b, c] += np.matmul(
                            gg, vg.transpose(0, 2, 1)).sum(axis=0)
                    if want_x:
                        wg = wdat[g * cog:(g + 1) * cog, :, a, b, c]
                        contrib = np.matmul(wg.T[None], gg)
                        gx_off[:, g * cin_g:(g + 1) * cin_g] += contrib.reshape(
                            (n, cin_g) + tuple(out_sp))
        if not want_x:
            gx = None
        elif any(padding):
            gx = np.ascontiguousarray(
                gxp[:, :, padding[0]:padding[0] + in_sp[0],
                    padding[1]:padding[1] + in_sp[1],
                    padding[2]:padding[2] + in_sp[2]])
        else:
            gx = gxp
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return record(inputs, y, backward_fn)


def depthwise_separable_conv3d(x: Tensor, dw_weight: Tensor, pw_weight: Tensor,
                               bias: Tensor | None = None, *,
                               stride=1, padding=0, dilation=1) -> Tensor:
    """Per-channel spatial conv followed by a 1x1x1 channel-mixing conv.

    Equivalent to conv3d(conv3d(x, dw_weight, groups=Cin), pw_weight); the
    optional bias applies to the pointwise step.
    """
    cin = x.shape[1]
    spatial = conv3d(x, dw_weight, None, stride=stride, padding=padding,
                     dilation=dilation, groups=cin)
    return conv3d(spatial, pw_weight, bias, stride=1, padding=0, dilation=1, groups=1)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray, *,
               train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over the (N, D, H, W) axes.

    Train mode normalizes with the batch's population statistics (batches of
    a single volume included) and updates the running arrays in place; eval
    mode normalizes with the running statistics.
    """
    _check_5d(x, "batch_norm input")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ValueError(f"batch_norm {name} must have shape ({c},), got {tuple(t.shape)}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batch_norm running stats must have shape ({c},)")
    if eps <= 0:
        raise ValueError("batch_norm eps must be > 0")
    axes = (0, 2, 3, 4)
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[_BCAST]) * inv[_BCAST]
    y = Tensor(gamma.data[_BCAST] * xhat + beta.data[_BCAST])
    count = x.data.size // c

    def backward_fn(gout):
        dbeta = gout.sum(axis=axes)
        dgamma = (gout * xhat).sum(axis=axes)
        scale = (gamma.data * inv)[_BCAST]
        if train:
            dx = scale * (gout - (dbeta / count)[_BCAST] - xhat * (dgamma / count)[_BCAST])
        else:
            dx = scale * gout
        return dx, dgamma, dbeta

    return record((x, gamma, beta), y, backward_fn)


def relu(x: Tensor) -> Tensor:
    y = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0

    def backward_fn(gout):
        return (gout * mask,)

    return record((x,), y, backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    y = Tensor(s)

    def backward_fn(gout):
        return (gout * s * (1.0 - s),)

    return record((x,), y, backward_fn)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis, independently per voxel."""
    if x.data.ndim < 2:
        raise ValueError("softmax_channels needs a channel axis (ndim >= 2)")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    y = Tensor(s)

    def backward_fn(gout):
        return (s * (gout - (gout * s).sum(axis=1, keepdims=True)),)

    return record((x,), y, backward_fn)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax_channel": softmax_channels}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}; expected one of {sorted(_ACTIVATIONS)}")


_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation matrix, half-pixel centers, clamped."""
    key = (n_in, factor)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    n_out = n_in * factor
    s = (np.arange(n_out) + 0.5) / factor - 0.5
    i0f = np.floor(s)
    w = s - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(int)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(int)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w)
    np.add.at(m, (rows, i1), w)
    _INTERP_CACHE[key] = m
    return m


def _apply_axis(arr: np.ndarray, m: np.ndarray, axis: int, transpose: bool = False) -> np.ndarray:
    out = np.tensordot(arr, m, axes=([axis], [0 if transpose else 1]))
    return np.moveaxis(out, -1, axis)


def trilinear_upsample(x: Tensor, factor) -> Tensor:
    """Upsample spatial extents by integer factors with trilinear interpolation."""
    _check_5d(x, "trilinear_upsample input")
    factor = _triple(factor, "factor")
    if any(f < 1 for f in factor):
        raise ValueError(f"upsample factors must be >= 1, got {factor}")
    plan = [(axis, x.shape[axis], f) for axis, f in zip((2, 3, 4), factor) if f > 1]
    out = x.data
    for axis, n_in, f in plan:
        out = _apply_axis(out, _interp_matrix(n_in, f), axis)
    y = Tensor(out)

    def backward_fn(gout):
        g = gout
        for axis, n_in, f in reversed(plan):
            g = _apply_axis(g, _interp_matrix(n_in, f), axis, transpose=True)
        return (np.ascontiguousarray(g),)

    return record((x,), y, backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, keeping singleton spatial axes."""
    _check_5d(x, "global_avg_pool input")
    y = Tensor(x.data.mean(axis=(2, 3, 4), keepdims=True))
    vol = x.data.size // (x.shape[0] * x.shape[1])

    def backward_fn(gout):
        return (np.broadcast_to(gout / vol, x.shape),)

    return record((x,), y, backward_fn)


def concat_channels(inputs: list[Tensor]) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    for t in inputs:
        _check_5d(t, "concat_channels input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(
                f"concat_channels batch/spatial mismatch: {tuple(ref)} vs {tuple(t.shape)}"
            )
    y = Tensor(np.concatenate([t.data for t in inputs], axis=1))
    edges = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward_fn(gout):
        return tuple(gout[:, e0:e1] for e0, e1 in zip(edges[:-1], edges[1:]))

    return record(tuple(inputs), y, backward_fn)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "elementwise_add")
    y = Tensor(a.data + b.data)

    def backward_fn(gout):
        return gout, gout

    return record((a, b), y, backward_fn)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "elementwise_mul")
    y = Tensor(a.data * b.data)

    def backward_fn(gout):
        return gout * b.data, gout * a.data

    return record((a, b), y, backward_fn)


def scale_by_map(x: Tensor, weight_map: Tensor) -> Tensor:
    """Multiply every channel of x by a single-channel spatial map."""
    _check_5d(x, "scale_by_map input")
    expected = (x.shape[0], 1) + tuple(x.shape[2:])
    if tuple(weight_map.shape) != expected:
        raise ValueError(
            f"scale_by_map map must have shape {expected}, got {tuple(weight_map.shape)}"
        )
    y = Tensor(x.data * weight_map.data)

    def backward_fn(gout):
        return gout * weight_map.data, (gout * x.data).sum(axis=1, keepdims=True)

    return record((x, weight_map), y, backward_fn)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis, keeping a singleton channel."""
    _check_5d(x, "channel_mean input")
    y = Tensor(x.data.mean(axis=1, keepdims=True))
    c = x.shape[1]

    def backward_fn(gout):
        return (np.broadcast_to(gout / c, x.shape),)

    return record((x,), y, backward_fn)
