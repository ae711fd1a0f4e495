"""Dense NCHW layer primitives with hand-written backward passes, plus Adam.

Tensors are plain ``numpy.ndarray`` objects. Activations use NCHW layout and
convolution kernels use (OC, IC, KH, KW). Every forward/backward function is
pure; only :func:`adam_step` mutates its argument.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised in strict mode when a NaN or Inf is detected."""


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteError(f"non-finite value in {what} at index {tuple(bad)}")


@dataclass
class ParamTensor:
    """A trainable array with its gradient and Adam moment buffers."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value)
        for name in ("grad", "m", "v"):
            arr = getattr(self, name)
            if arr is None:
                setattr(self, name, np.zeros_like(self.value))
            elif arr.shape != self.value.shape:
                raise ShapeError(f"{name} shape {arr.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _pads(kh: int, kw: int, padding: str) -> tuple[int, int, int, int]:
    if padding == "valid":
        return 0, 0, 0, 0
    if padding == "same":
        # even kernels put the extra row/column at bottom/right
        top, left = (kh - 1) // 2, (kw - 1) // 2
        return top, kh - 1 - top, left, kw - 1 - left
    raise ValueError(f"unknown padding {padding!r}")


def _check_conv_shapes(x: np.ndarray, kernel: np.ndarray, padding: str):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if c != ic:
        raise ShapeError(f"input has {c} channels but kernel expects {ic}")
    if kh not in (1, 2, 3) or kw not in (1, 2, 3):
        raise ShapeError(f"kernel size {kh}x{kw} not supported")
    if h == 0 or w == 0:
        raise ShapeError("empty spatial dimensions")
    pt, pb, pl, pr = _pads(kh, kw, padding)
    oh, ow = h + pt + pb - kh + 1, w + pl + pr - kw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"input {h}x{w} too small for valid {kh}x{kw} kernel")
    return (pt, pb, pl, pr), (oh, ow)


def _im2col(x: np.ndarray, kh: int, kw: int, pads, out_hw) -> np.ndarray:
    """Return columns of shape (N, C*KH*KW, OH*OW)."""
    n, c = x.shape[:2]
    pt, pb, pl, pr = pads
    oh, ow = out_hw
    if any(pads):
        xp = np.zeros((n, c, x.shape[2] + pt + pb, x.shape[3] + pl + pr), dtype=x.dtype)
        xp[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + oh, j:j + ow]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                   padding: str = "same") -> np.ndarray:
    """Stride-1 cross-correlation of an NCHW batch with an (OC, IC, KH, KW) kernel."""
    pads, (oh, ow) = _check_conv_shapes(x, kernel, padding)
    oc, _, kh, kw = kernel.shape
    cols = _im2col(x, kh, kw, pads, (oh, ow))
    out = np.matmul(kernel.reshape(oc, -1), cols)
    out += bias.reshape(1, oc, 1)
    return out.reshape(x.shape[0], oc, oh, ow)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                    padding: str = "same"):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    pads, (oh, ow) = _check_conv_shapes(x, kernel, padding)
    n, c, h, w = x.shape
    oc, _, kh, kw = kernel.shape
    if grad_out.shape != (n, oc, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {(n, oc, oh, ow)}")
    cols = _im2col(x, kh, kw, pads, (oh, ow))
    g = grad_out.reshape(n, oc, oh * ow)

    grad_kernel = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    gcols = np.matmul(kernel.reshape(oc, -1).T, g).reshape(n, c, kh, kw, oh, ow)
    pt, pb, pl, pr = pads
    gxp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + oh, j:j + ow] += gcols[:, :, i, j]
    grad_input = gxp[:, :, pt:pt + h, pl:pl + w]
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


# --------------------------------------------------------------------------
# elementwise / resampling
# --------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return grad_out * (x > 0)


def maxpool2x2(x: np.ndarray):
    """2x2/stride-2 max pooling. Returns (output, argmax) where argmax indexes
    the window in scan order 0..3; ties resolve to the first position."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even H and W, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    g = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, argmax[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(n, c, h, w)


def upsample2x_nearest(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_nearest_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    return grad_out.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out: np.ndarray, channels_a: int):
    return grad_out[:, :channels_a], grad_out[:, channels_a:]


def softmax_channels(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(grad_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (grad_out - (grad_out * probs).sum(axis=1, keepdims=True))


# --------------------------------------------------------------------------
# optimisation and gradient checking
# --------------------------------------------------------------------------

def adam_step(param: ParamTensor, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, strict: bool = False) -> ParamTensor:
    """Bias-corrected Adam update, in place. The gradient is left untouched."""
    g = param.grad
    if strict:
        check_finite(g, "gradient")
    param.step_count += 1
    t = param.step_count
    param.m *= beta1
    param.m += (1.0 - beta1) * g
    param.v *= beta2
    param.v += (1.0 - beta2) * (g * g)
    m_hat = param.m / (1.0 - beta1 ** t)
    v_hat = param.v / (1.0 - beta2 ** t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


def numerical_gradient(fn: Callable[[np.ndarray], float], point: np.ndarray,
                       h: float = 1e-5, relative: bool = True) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    With ``relative=True`` the step for coordinate i is ``h * max(1, |x_i|)``.
    """
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig)) if relative else h
        flat[i] = orig + step
        f_plus = fn(x)
        flat[i] = orig - step
        f_minus = fn(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float | None = None) -> float:
    """Max per-coordinate relative error.

    The denominator for each coordinate is ``max(|a|, |n|, floor)``. The default
    floor is 1e-3 of the largest gradient magnitude, so coordinates that are
    zero up to roundoff do not dominate the result.
    """
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    if a.size == 0:
        return 0.0
    if floor is None:
        floor = max(1e-3 * max(np.abs(a).max(), np.abs(n).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_difference_check(fn: Callable[[np.ndarray], float], point: np.ndarray,
                            analytic_grad: np.ndarray, h: float = 1e-5,
                            floor: float | None = None) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``fn``."""
    numeric = numerical_gradient(fn, point, h)
    return relative_error(analytic_grad, numeric, floor)
