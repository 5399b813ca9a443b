"""Differentiable layer kernels: convolutions, dense maps, LSTMs, softmax.

Convolution is cross-correlation (no kernel flip).  Spatial kernels accept
``[C, H, W]`` or a leading batch axis ``[B, C, H, W]``; dense, softmax and the
LSTM act on the trailing axis and pass leading axes through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    _result,
    add,
    as_tensor,
    mul,
    sigmoid,
    split,
    tanh,
)


def _pair(value) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    h, w = value
    return int(h), int(w)


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    dilation_rate: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)  # top, bottom, left, right

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "padding", tuple(int(p) for p in self.padding))
        if self.out_channels < 1:
            raise ShapeError(f"ConvSpec: out_channels must be positive, got {self.out_channels}")
        if min(self.kernel) < 1:
            raise ShapeError(f"ConvSpec: kernel extents must be positive, got {self.kernel}")
        if self.stride < 1 or self.dilation_rate < 1:
            raise ShapeError("ConvSpec: stride and dilation_rate must be positive")
        if len(self.padding) != 4 or min(self.padding) < 0:
            raise ShapeError(f"ConvSpec: padding needs 4 non-negative sides, got {self.padding}")

    @property
    def effective_kernel(self) -> tuple[int, int]:
        r = self.dilation_rate
        return tuple(k + (k - 1) * (r - 1) for k in self.kernel)

    @classmethod
    def same(cls, out_channels: int, kernel, stride: int = 1, dilation_rate: int = 1) -> "ConvSpec":
        """Symmetric padding that keeps ``ceil(H / stride)`` rows for odd effective kernels."""
        spec = cls(out_channels, _pair(kernel), stride, dilation_rate)
        eh, ew = spec.effective_kernel
        if eh % 2 == 0 or ew % 2 == 0:
            raise ShapeError(f"ConvSpec.same: effective kernel {spec.effective_kernel} must be odd")
        ph, pw = (eh - 1) // 2, (ew - 1) // 2
        return cls(out_channels, spec.kernel, stride, dilation_rate, (ph, ph, pw, pw))


def _as_batch(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise ShapeError(f"{op}: input must be [C,H,W] or [B,C,H,W], got shape {x.shape}")


def _output_extent(op: str, axis: str, padded: int, effective: int, stride: int) -> int:
    if padded < effective:
        raise ShapeError(
            f"{op}: {axis} axis too small: padded extent {padded} < effective kernel {effective}"
        )
    return (padded - effective) // stride + 1


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    input, kernel, bias = as_tensor(input), as_tensor(kernel), as_tensor(bias)
    x, batched = _as_batch(input, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [C_out,C_in,kh,kw], got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: channel axis mismatch: input has {x.shape[1]}, kernel expects {c_in}")
    if c_out != spec.out_channels:
        raise ShapeError(f"conv2d: kernel axis 0 has {c_out} filters, spec declares {spec.out_channels}")
    if (kh, kw) != spec.kernel:
        raise ShapeError(f"conv2d: kernel spatial axes {(kh, kw)} differ from spec {spec.kernel}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")

    s, r = spec.stride, spec.dilation_rate
    ekh, ekw = spec.effective_kernel
    pt, pb, pl, pr = spec.padding
    height, width = x.shape[2], x.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    ho = _output_extent("conv2d", "height", xp.shape[2], ekh, s)
    wo = _output_extent("conv2d", "width", xp.shape[3], ekw, s)
    windows = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))[:, :, ::s, ::s, ::r, ::r]

    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g: np.ndarray):
        g4 = g if batched else g[None]
        g_kernel = np.tensordot(g4, windows, axes=([0, 2, 3], [0, 2, 3]))
        g_bias = g4.sum(axis=(0, 2, 3))
        cols = np.tensordot(g4, kernel.data, axes=([1], [0]))
        g_padded = np.zeros_like(xp)
        for i in range(kh):
            rows = slice(i * r, i * r + s * (ho - 1) + 1, s)
            for j in range(kw):
                cols_ = slice(j * r, j * r + s * (wo - 1) + 1, s)
                g_padded[:, :, rows, cols_] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        g_input = g_padded[:, :, pt : pt + height, pl : pl + width]
        return (g_input if batched else g_input[0]), g_kernel, g_bias

    return _result(out if batched else out[0], "conv2d", (input, kernel, bias), vjp)


def conv2d_transpose(
    input: Tensor, kernel: Tensor, spec: ConvSpec, bias: Tensor | None = None
) -> Tensor:
    """Adjoint of :func:`conv2d` used as a forward map (kernel is ``[C_in, C_out, kh, kw]``).

    Output extent is ``(H - 1) * stride + effective_kh`` minus
    ``spec.padding``, which crops rows and columns from each side.
    """
    input, kernel = as_tensor(input), as_tensor(kernel)
    x, batched = _as_batch(input, "conv2d_transpose")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d_transpose: kernel must be [C_in,C_out,kh,kw], got {kernel.shape}")
    c_in, c_out, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise ShapeError(
            f"conv2d_transpose: channel axis mismatch: input has {x.shape[1]}, kernel expects {c_in}"
        )
    if c_out != spec.out_channels or (kh, kw) != spec.kernel:
        raise ShapeError(f"conv2d_transpose: kernel {kernel.shape} disagrees with spec {spec}")
    inputs: tuple[Tensor, ...] = (input, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d_transpose: bias must have shape ({c_out},), got {bias.shape}")
        inputs = inputs + (bias,)

    s, r = spec.stride, spec.dilation_rate
    ekh, ekw = spec.effective_kernel
    pt, pb, pl, pr = spec.padding
    height, width = x.shape[2], x.shape[3]
    full_h, full_w = (height - 1) * s + ekh, (width - 1) * s + ekw
    if full_h - pt - pb < 1 or full_w - pl - pr < 1:
        raise ShapeError(f"conv2d_transpose: padding {spec.padding} leaves no output")

    cols = np.tensordot(x, kernel.data, axes=([1], [0]))
    full = np.zeros((x.shape[0], c_out, full_h, full_w))
    for i in range(kh):
        rows = slice(i * r, i * r + s * (height - 1) + 1, s)
        for j in range(kw):
            cols_ = slice(j * r, j * r + s * (width - 1) + 1, s)
            full[:, :, rows, cols_] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, pt : full_h - pb, pl : full_w - pr]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g: np.ndarray):
        g4 = g if batched else g[None]
        g_full = np.zeros_like(full)
        g_full[:, :, pt : full_h - pb, pl : full_w - pr] = g4
        windows = sliding_window_view(g_full, (ekh, ekw), axis=(2, 3))[:, :, ::s, ::s, ::r, ::r]
        g_input = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        g_kernel = np.tensordot(x, windows, axes=([0, 2, 3], [0, 2, 3]))
        grads = [g_input if batched else g_input[0], g_kernel]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(out if batched else out[0], "conv2d_transpose", inputs, vjp)


def dense(input: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``input @ weight.T + bias`` over the trailing axis."""
    input, weight = as_tensor(input), as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"dense: weight must be [M,N], got {weight.shape}")
    m, n = weight.shape
    if input.ndim < 1 or input.shape[-1] != n:
        raise ShapeError(f"dense: input axis -1 has {input.shape[-1:]} features, weight expects {n}")
    out = input.data @ weight.data.T
    inputs: tuple[Tensor, ...] = (input, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (m,):
            raise ShapeError(f"dense: bias must have shape ({m},), got {bias.shape}")
        out = out + bias.data
        inputs = inputs + (bias,)

    def vjp(g: np.ndarray):
        flat_g = g.reshape(-1, m)
        grads = [g @ weight.data, flat_g.T @ input.data.reshape(-1, n)]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)

    return _result(out, "dense", inputs, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise ShapeError(f"softmax: axis {axis} of shape {x.shape} is empty")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax: input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, "softmax", (x,), vjp)


@dataclass
class LSTMParams:
    """Gate blocks are stacked in (input, forget, cell, output) order."""

    weight_ih: Tensor  # [4H, D]
    weight_hh: Tensor  # [4H, H]
    bias: Tensor  # [4H]

    @property
    def hidden_size(self) -> int:
        return self.weight_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.weight_ih.shape[1]


def lstm_step(x: Tensor, h: Tensor, c: Tensor, params: LSTMParams) -> tuple[Tensor, Tensor]:
    z = add(dense(x, params.weight_ih, params.bias), dense(h, params.weight_hh))
    i, f, g, o = split(z, 4, axis=-1)
    c_next = add(mul(sigmoid(f), c), mul(sigmoid(i), tanh(g)))
    h_next = mul(sigmoid(o), tanh(c_next))
    return h_next, c_next


def lstm_sequence(
    inputs: Sequence[Tensor],
    params: LSTMParams,
    h0: Tensor | None = None,
    c0: Tensor | None = None,
) -> list[Tensor]:
    """Run the recurrence over every step and return all hidden states."""
    if not inputs:
        raise ShapeError("lstm_sequence: empty input sequence")
    steps = [as_tensor(x) for x in inputs]
    first = steps[0].shape
    for t, x in enumerate(steps):
        if x.shape != first:
            raise ShapeError(f"lstm_sequence: step {t} has shape {x.shape}, step 0 has {first}")
    hidden = params.hidden_size
    if params.weight_ih.shape != (4 * hidden, first[-1]):
        raise ShapeError(
            f"lstm_sequence: weight_ih {params.weight_ih.shape} does not fit input dimension {first[-1]}"
        )
    state_shape = first[:-1] + (hidden,)
    h = as_tensor(h0) if h0 is not None else Tensor(np.zeros(state_shape))
    c = as_tensor(c0) if c0 is not None else Tensor(np.zeros(state_shape))
    states = []
    for x in steps:
        h, c = lstm_step(x, h, c, params)
        states.append(h)
    return states
