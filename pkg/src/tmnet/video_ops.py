"""Video operators: modulated deformable convolution, ConvLSTM, bicubic
resampling, BT.601 luma and the PSNR/SSIM metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from tmnet import ops
from tmnet.ops import BilinearTaps, _channels_last
from tmnet.tensor import ConfigError, ShapeError, Tensor, check_same_dtype, record

PSNR_CAP_DB = 100.0


def deform_conv2d(
    x: Tensor,
    offsets: Tensor,
    mask: Optional[Tensor],
    weight: Tensor,
    bias: Optional[Tensor] = None,
    groups: int = 1,
) -> Tensor:
    """Modulated deformable convolution (stride 1, 'same' padding).

    ``offsets`` holds ``(dy, dx)`` pairs: channel ``2*(g*k*k + tap)`` is the
    vertical shift of ``tap`` in deformable group ``g``. ``mask`` scales each
    tap; ``None`` means all ones.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"deform_conv2d expects NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"deform_conv2d needs a square odd kernel, got {k}x{k2}")
    if wcin != cin:
        raise ShapeError(f"deform_conv2d: input has {cin} channels, weight expects {wcin}")
    if groups < 1 or cin % groups:
        raise ConfigError(f"deform_conv2d: {cin} channels not divisible into {groups} groups")
    kk = k * k
    if offsets.shape != (n, 2 * groups * kk, h, w):
        raise ShapeError(f"offsets must be {(n, 2 * groups * kk, h, w)}, got {offsets.shape}")
    if mask is not None and mask.shape != (n, groups * kk, h, w):
        raise ShapeError(f"mask must be {(n, groups * kk, h, w)}, got {mask.shape}")
    check_same_dtype(x, offsets, weight, *(t for t in (mask, bias) if t is not None))
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    dt = x.dtype
    cg = cin // groups
    pad = (k - 1) // 2
    # base sampling grid per tap, laid out [N, H, W, kk]
    ty, tx = np.meshgrid(np.arange(k) - pad, np.arange(k) - pad, indexing="ij")
    gy = np.arange(h).reshape(1, h, 1, 1) + ty.reshape(1, 1, 1, kk)
    gx = np.arange(w).reshape(1, 1, w, 1) + tx.reshape(1, 1, 1, kk)
    batch_off = (np.arange(n) * h * w).reshape(n, 1, 1, 1)
    off = offsets.data.reshape(n, groups, kk, 2, h, w).transpose(0, 1, 4, 5, 2, 3)  # N,G,H,W,kk,2
    msk = None if mask is None else mask.data.reshape(n, groups, kk, h, w).transpose(0, 1, 3, 4, 2)
    table = _channels_last(x.data)  # [N*H*W, Cin]

    taps, tables, sampled = [], [], []
    cols = np.empty((n, h, w, groups, kk, cg), dtype=dt)
    for g in range(groups):
        sy = (gy + off[:, g, ..., 0]).astype(dt)
        sx = (gx + off[:, g, ..., 1]).astype(dt)
        tp = BilinearTaps(sy, sx, h, w, batch_off, n_rows=n * h * w)
        tab = table if groups == 1 else np.ascontiguousarray(table[:, g * cg : (g + 1) * cg])
        s = tp.sample(tab)  # N,H,W,kk,cg
        taps.append(tp)
        tables.append(tab)
        sampled.append(s)
        cols[:, :, :, g] = s if msk is None else s * msk[:, g, ..., None]
    cols = cols.reshape(n * h * w, groups * kk * cg)
    # weight re-ordered to (group, tap, channel-in-group) to match cols
    w2 = weight.data.reshape(cout, groups, cg, kk).transpose(0, 1, 3, 2).reshape(cout, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)

    def bw(gout):
        g2 = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(n * h * w, cout)
        gw = gb = gxin = goff = gmask = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(cout, groups, kk, cg).transpose(0, 1, 3, 2).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        need_x, need_o = x.requires_grad, offsets.requires_grad
        need_m = mask is not None and mask.requires_grad
        if need_x or need_o or need_m:
            gcols = (g2 @ w2).reshape(n, h, w, groups, kk, cg)
            gtab = np.zeros((n * h * w, cin), dtype=dt) if need_x else None
            goff_a = np.zeros((n, groups, h, w, kk, 2), dtype=dt) if need_o else None
            gmask_a = np.zeros((n, groups, h, w, kk), dtype=dt) if need_m else None
            for g in range(groups):
                gc = gcols[:, :, :, g]
                if need_m:
                    gmask_a[:, g] = (gc * sampled[g]).sum(-1)
                gs = gc if msk is None else gc * msk[:, g, ..., None]
                if need_x:
                    gtab[:, g * cg : (g + 1) * cg] = taps[g].scatter(gs)
                if need_o:
                    dy, dx = taps[g].coord_grads(tables[g], gs)
                    goff_a[:, g, ..., 0] = dy
                    goff_a[:, g, ..., 1] = dx
            if need_x:
                gxin = gtab.reshape(n, h, w, cin).transpose(0, 3, 1, 2)
            if need_o:
                goff = goff_a.transpose(0, 1, 4, 5, 2, 3).reshape(offsets.shape)
            if need_m:
                gmask = gmask_a.transpose(0, 1, 4, 2, 3).reshape(mask.shape)
        grads = {"x": gxin, "off": goff, "mask": gmask, "w": gw, "b": gb}
        return tuple(grads[key] for key in keys)

    inputs, keys = [x, offsets], ["x", "off"]
    if mask is not None:
        inputs.append(mask)
        keys.append("mask")
    inputs.append(weight)
    keys.append("w")
    if bias is not None:
        inputs.append(bias)
        keys.append("b")
    return record("deform_conv2d", out, tuple(inputs), bw)


# --- ConvLSTM ------------------------------------------------------------------


@dataclass(frozen=True)
class ConvLSTMState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError(f"hidden {self.hidden.shape} and cell {self.cell.shape} differ")

    @classmethod
    def zeros(cls, shape, dtype) -> "ConvLSTMState":
        z = Tensor(np.zeros(shape, dtype=dtype))
        return cls(z, z)


@dataclass
class ConvLSTMWeights:
    """Gate conv weights, output channels ordered (input, forget, output, candidate)."""

    weight: Tensor  # [4C, Cx + C, k, k]
    bias: Tensor  # [4C]


def conv_lstm_step(x: Tensor, state: ConvLSTMState, weights: ConvLSTMWeights) -> ConvLSTMState:
    if x.shape[0] != state.hidden.shape[0] or x.shape[2:] != state.hidden.shape[2:]:
        raise ShapeError(f"conv_lstm_step: input {x.shape} does not match state {state.hidden.shape}")
    c = state.hidden.shape[1]
    k = weights.weight.shape[2]
    if weights.weight.shape[:2] != (4 * c, x.shape[1] + c):
        raise ShapeError(f"gate weight {weights.weight.shape} incompatible with x {x.shape}, hidden {c}")
    z = ops.conv2d(ops.concat_channels([x, state.hidden]), weights.weight, weights.bias, padding=k // 2)
    i = ops.sigmoid(ops.channel_slice(z, 0, c))
    f = ops.sigmoid(ops.channel_slice(z, c, 2 * c))
    o = ops.sigmoid(ops.channel_slice(z, 2 * c, 3 * c))
    g = ops.tanh(ops.channel_slice(z, 3 * c, 4 * c))
    cell = ops.add(ops.mul(f, state.cell), ops.mul(i, g))
    hidden = ops.mul(o, ops.tanh(cell))
    return ConvLSTMState(hidden, cell)


# --- bicubic resampling -------------------------------------------------------------


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return np.where(
        ax <= 1,
        (a + 2) * ax3 - (a + 3) * ax2 + 1,
        np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0),
    )


def bicubic_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``[n_out, n_in]`` resampling matrix (half-pixel centres, edge clamp).

    When shrinking, the kernel is stretched by the scale factor so that it
    also low-pass filters, as in the usual super-resolution degradation.
    """
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    width = 4.0 / stretch
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    first = np.floor(centers - width / 2).astype(np.int64)
    taps = int(math.ceil(width)) + 2
    idx = first[:, None] + np.arange(taps)[None, :]
    wts = stretch * cubic_kernel((centers[:, None] - idx) * stretch)
    wts /= wts.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1).reshape(-1)), wts.reshape(-1))
    return mat


def resize_bicubic(image, factor: int, direction: str = "down"):
    """Separable Keys-cubic (a=-0.5) resize of the last two axes by an integer factor.

    Accepts a :class:`Tensor` (differentiable) or a numpy array.
    """
    if direction not in ("down", "up"):
        raise ConfigError(f"direction must be 'down' or 'up', got {direction!r}")
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    h, w = arr.shape[-2:]
    if direction == "down":
        if h % factor or w % factor:
            raise ConfigError(f"{h}x{w} not divisible by downsampling factor {factor}")
        ho, wo = h // factor, w // factor
    else:
        ho, wo = h * factor, w * factor
    my = bicubic_weights(h, ho).astype(arr.dtype)
    mx = bicubic_weights(w, wo).astype(arr.dtype)
    out = np.matmul(np.matmul(my, arr), mx.T)
    if not isinstance(image, Tensor):
        return out
    return record("resize_bicubic", out, (image,), lambda g: (np.matmul(np.matmul(my.T, g), mx),))


# --- colour and metrics ----------------------------------------------------------

_Y_COEFFS = (65.481, 128.553, 24.966)


def rgb_to_y(image):
    """BT.601 studio-swing luma of an RGB image in [0, 1]; output in [16, 235]."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim < 3 or arr.shape[-3] != 3:
        raise ShapeError(f"rgb_to_y expects 3 channels on axis -3, got shape {arr.shape}")
    r, g, b = arr[..., 0:1, :, :], arr[..., 1:2, :, :], arr[..., 2:3, :, :]
    y = _Y_COEFFS[0] * r + _Y_COEFFS[1] * g + _Y_COEFFS[2] * b + 16.0
    return Tensor(y) if isinstance(image, Tensor) else y


def _as_array(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)


def psnr(a, b, peak: float = 255.0) -> float:
    """PSNR in dB; zero error returns the 100 dB cap so reports stay finite."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, peak: float = 255.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1=0.01, K2=0.03)."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes {x.shape} and {y.shape} differ")
    x = x.reshape(x.shape[-2:]) if x.size == x.shape[-2] * x.shape[-1] else None
    if x is None:
        raise ShapeError("ssim expects a single-channel image [1,1,H,W] or [H,W]")
    y = y.reshape(x.shape)
    if min(x.shape) < 11:
        raise ShapeError(f"ssim needs images of at least 11x11, got {x.shape}")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    g = _gaussian_window()
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
