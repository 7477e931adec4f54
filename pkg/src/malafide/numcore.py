"""Dense float64 numerics with hand-derived gradients.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Images use the
channels-last layout ``(H, W, C)``; batches add a leading axis ``(N, H, W, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "AdamState",
    "adam_init",
    "adam_step",
    "as_tensor",
    "conv2d_kernel_grad",
    "conv2d_same",
    "conv_layer_backward",
    "conv_layer_forward",
    "sigmoid",
    "softplus",
]


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _check_kernel_size(L: int) -> None:
    if int(L) != L or L < 1 or L % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {L}")


def _rows_layout(image: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    # (..., H, W, C) -> (H, M, W) with M = batch * C so that a block of rows
    # reshapes to a 2D matrix without copying.
    if image.ndim < 3:
        raise ValueError(f"expected an (..., H, W, C) image, got shape {image.shape}")
    shape = image.shape
    H, W, C = shape[-3:]
    x = image.reshape(-1, H, W, C).transpose(1, 0, 3, 2)
    return np.ascontiguousarray(x).reshape(H, -1, W), shape


def _from_rows_layout(rows: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    H, W, C = shape[-3:]
    x = rows.reshape(H, -1, C, W).transpose(1, 0, 3, 2)
    return np.ascontiguousarray(x).reshape(shape)


def _pad_rows(rows: np.ndarray, c: int) -> np.ndarray:
    if c == 0:
        return rows
    return np.pad(rows, ((c, c), (0, 0), (c, c)))


def conv2d_same(image, kernel) -> np.ndarray:
    """True 2D convolution of every channel with one shared ``L x L`` kernel.

    Zero padding of ``(L - 1) / 2`` keeps the spatial size; the kernel centre
    sits on the output pixel. Leading batch axes are allowed.
    """
    image = as_tensor(image, "image")
    kernel = as_tensor(kernel, "kernel")
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be square, got shape {kernel.shape}")
    L = kernel.shape[0]
    _check_kernel_size(L)
    rows, shape = _rows_layout(image)
    H, M, W = rows.shape
    if L > 2 * min(H, W) + 1:
        raise ValueError(f"kernel size {L} exceeds 2*min(H, W)+1 = {2 * min(H, W) + 1}")
    c = (L - 1) // 2
    padded = _pad_rows(rows, c)
    Wp = W + 2 * c
    flipped = kernel[::-1, ::-1]
    # Row i of the (flipped) kernel acts on padded row y+i as a banded
    # Wp x W matrix: band[i, x + j, x] = flipped[i, j].
    band = np.zeros((L, Wp, W))
    cols = np.arange(W)
    for j in range(L):
        band[:, cols + j, cols] = flipped[:, j : j + 1]
    out = np.zeros((H * M, W))
    for i in range(L):
        out += padded[i : i + H].reshape(H * M, Wp) @ band[i]
    return _from_rows_layout(out.reshape(H, M, W), shape)


def conv2d_kernel_grad(image, upstream, L: int) -> np.ndarray:
    """Gradient of ``<upstream, conv2d_same(image, k)>`` with respect to ``k``.

    Summed over channels and any leading batch axes. Shape ``(L, L)``.
    """
    _check_kernel_size(L)
    image = as_tensor(image, "image")
    upstream = as_tensor(upstream, "upstream")
    if image.shape != upstream.shape:
        raise ValueError(f"shape mismatch: image {image.shape} vs upstream {upstream.shape}")
    rows, _ = _rows_layout(image)
    up, _ = _rows_layout(upstream)
    H, M, W = rows.shape
    if L > 2 * min(H, W) + 1:
        raise ValueError(f"kernel size {L} exceeds 2*min(H, W)+1 = {2 * min(H, W) + 1}")
    c = (L - 1) // 2
    padded = _pad_rows(rows, c)
    Wp = W + 2 * c
    up2 = up.reshape(H * M, W)
    cols = np.arange(W)
    shifts = np.arange(L)[:, None] + cols[None, :]
    corr = np.empty((L, L))
    for i in range(L):
        q = padded[i : i + H].reshape(H * M, Wp).T @ up2  # (Wp, W)
        corr[i] = q[shifts, cols[None, :]].sum(axis=1)
    return corr[::-1, ::-1].copy()


# -- layers used by the detectors (cross-correlation, multi-channel) -------


def conv_layer_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """Same-padded multi-channel correlation: ``(N,H,W,Cin) -> (N,H',W',Cout)``.

    ``w`` has shape ``(k, k, Cin, Cout)``. With ``stride`` s the output is the
    stride-1 result sampled at every s-th row and column. Returns the output
    and the im2col matrix needed by :func:`conv_layer_backward`.
    """
    k = w.shape[0]
    N, H, W, Cin = x.shape
    c = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (c, c), (c, c), (0, 0))) if c else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    if stride > 1:
        win = win[:, ::stride, ::stride]
    Ho, Wo = win.shape[1:3]
    # (N, Ho, Wo, Cin, k, k) -> (N*Ho*Wo, k*k*Cin) in (ki, kj, cin) order
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, k * k * Cin)
    out = cols @ w.reshape(-1, w.shape[3]) + b
    return out.reshape(N, Ho, Wo, -1), cols


def conv_layer_backward(
    dout: np.ndarray, cols, w: np.ndarray, need_dx: bool = True, need_dw: bool = True, stride: int = 1, in_hw=None
):
    """Backward of :func:`conv_layer_forward`; returns ``(dx, dw, db)``.

    ``dx`` is the same-padded correlation of ``dout`` with the spatially
    flipped, channel-transposed kernel; strided layers first scatter ``dout``
    back onto the input grid (``in_hw``). Skipped parts come back as ``None``.
    """
    Cout = w.shape[3]
    dx = dw = db = None
    if need_dw:
        d2 = dout.reshape(-1, Cout)
        dw = (cols.T @ d2).reshape(w.shape)
        db = d2.sum(axis=0)
    if need_dx:
        w_adj = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        if stride > 1:
            full = np.zeros((dout.shape[0], *in_hw, dout.shape[3]))
            full[:, ::stride, ::stride] = dout
            dout = full
        dx, _ = conv_layer_forward(dout, w_adj, 0.0)
    return dx, dw, db


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- Adam ------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.first_moment.shape != self.second_moment.shape:
            raise ValueError("moment shapes differ")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.step_count < 0:
            raise ValueError("step_count must be non-negative")


def adam_init(param, learning_rate: float = 1e-3, weight_decay: float = 0.0, **kwargs) -> AdamState:
    shape = np.shape(param)
    return AdamState(np.zeros(shape), np.zeros(shape), 0, learning_rate, weight_decay, **kwargs)


def adam_step(param, grad, state: AdamState, name: str = "param"):
    """One Adam update with bias correction and decoupled weight decay.

    Minimises: the parameter moves against ``grad``. Returns ``(new_param,
    new_state)``; inputs are not modified.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise ValueError(
            f"{name}: shape mismatch param {param.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}"
        )
    bad = ~np.isfinite(grad)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise FloatingPointError(f"{name}: non-finite gradient ({bad.sum()} entries, first at {where})")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * (grad * grad)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = param - state.learning_rate * state.weight_decay * param
    new = new - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new, replace(state, first_moment=m, second_moment=v, step_count=t)
