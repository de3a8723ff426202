"""
Dense tensor kernels and their adjoints.

A tensor is a ``numpy`` array shaped ``(C, H, W)`` or, batched,
``(N, C, H, W)``. Every kernel hands back the rank it was given and
never mutates its inputs.
"""
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._exceptions import NumericalError, ShapeError


Tensor = np.ndarray


def as_tensor(data, dtype=np.float64) -> Tensor:
    """Coerce ``data`` to a finite rank 3 or 4 float array.
    """
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim not in (3, 4):
        raise ShapeError(
            f"Expected a (C, H, W) or (N, C, H, W) tensor, got shape "
            f"{arr.shape}")
    _ensure_finite(arr, 'as_tensor')
    return arr


def _ensure_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")
    return arr


def _batched(x: Tensor) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"Expected rank 3 or 4 tensor, got shape {x.shape}")


def _unbatch(x: np.ndarray, squeeze: bool) -> np.ndarray:
    return x[0] if squeeze else x


def _span(start: int, count: int, stride: int) -> slice:
    # the strided window starting at ``start`` hitting ``count`` positions
    return slice(start, start + stride * (count - 1) + 1, stride)


@dataclass
class ConvParams:
    """Filters, biases and geometry of one convolution.

    ``weights`` is shaped ``(out_channels, in_channels, kh, kw)``.
    """
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeError(
                f"Filter bank must be (out, in, kh, kw), got "
                f"{self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"Expected {self.weights.shape[0]} biases, got shape "
                f"{self.bias.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(
                f"Invalid stride {self.stride} / padding {self.padding}")

    @classmethod
    def same(
        cls,
        weights: np.ndarray,
        bias: np.ndarray,
    ) -> 'ConvParams':
        """Stride one params padded to keep the spatial shape.
        """
        kh, kw = np.shape(weights)[2:]
        if kh != kw or kh % 2 == 0:
            raise ShapeError(
                f"Same padding needs an odd square kernel, got {kh}x{kw}")
        return cls(weights, bias, stride=1, padding=kh // 2)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def copy(self) -> 'ConvParams':
        return ConvParams(
            self.weights.copy(), self.bias.copy(), self.stride, self.padding)


class PoolIndex(NamedTuple):
    """Winner positions of a max pool, as flat indices into its input.
    """
    indices: np.ndarray
    input_shape: Tuple[int, ...]


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x: Tensor, params: ConvParams) -> Tensor:
    """Spatial correlation (no kernel flip) plus bias.

    The sum is accumulated one kernel offset at a time, so each output
    element is always reduced in the same order.
    """
    x4, squeeze = _batched(x)
    n, c, h, w = x4.shape
    o, ci, kh, kw = params.weights.shape
    if c != ci:
        raise ShapeError(
            f"Input has {c} channels but filters expect {ci}")
    s, p = params.stride, params.padding
    ho, wo = _conv_out_size(h, kh, s, p), _conv_out_size(w, kw, s, p)
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"Kernel {kh}x{kw} does not fit input {h}x{w} with padding {p}")

    xp = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p))) if p else x4
    out = np.zeros((o, n, ho, wo))
    for dy in range(kh):
        for dx in range(kw):
            window = xp[:, :, _span(dy, ho, s), _span(dx, wo, s)]
            out += np.tensordot(
                params.weights[:, :, dy, dx], window, axes=([1], [1]))

    out = out.transpose(1, 0, 2, 3) + params.bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    return _unbatch(_ensure_finite(out, 'conv2d_forward'), squeeze)


def conv2d_backward(
    x: Tensor,
    params: ConvParams,
    grad_out: Tensor,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Adjoint of ``conv2d_forward``.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    x4, squeeze = _batched(x)
    g4, _ = _batched(grad_out)
    n, c, h, w = x4.shape
    o, ci, kh, kw = params.weights.shape
    s, p = params.stride, params.padding
    ho, wo = _conv_out_size(h, kh, s, p), _conv_out_size(w, kw, s, p)
    if c != ci or g4.shape != (n, o, ho, wo):
        raise ShapeError(
            f"Gradient shape {np.shape(grad_out)} does not match the "
            f"forward output {(n, o, ho, wo)} for input {np.shape(x)}")

    xp = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p))) if p else x4
    g = g4.transpose(1, 0, 2, 3)
    grad_bias = g.sum(axis=(1, 2, 3))
    grad_weights = np.zeros_like(params.weights)
    grad_xp = np.zeros(xp.shape)
    for dy in range(kh):
        for dx in range(kw):
            rows, cols = _span(dy, ho, s), _span(dx, wo, s)
            window = xp[:, :, rows, cols]
            grad_weights[:, :, dy, dx] = np.tensordot(
                g, window, axes=([1, 2, 3], [0, 2, 3]))
            grad_xp[:, :, rows, cols] += np.tensordot(
                params.weights[:, :, dy, dx], g, axes=([0], [0])
            ).transpose(1, 0, 2, 3)

    grad_x = grad_xp[:, :, p:p + h, p:p + w] if p else grad_xp
    return (
        _unbatch(np.ascontiguousarray(grad_x), squeeze),
        grad_weights,
        grad_bias,
    )


def _pool_windows(
    x4: np.ndarray,
    k: int,
    stride: int,
) -> np.ndarray:
    if k <= 0 or stride <= 0:
        raise ShapeError(f"Pool kernel and stride must be positive, got "
                         f"k={k}, stride={stride}")
    n, c, h, w = x4.shape
    if h < k or w < k:
        raise ShapeError(f"Pool kernel {k} larger than input {h}x{w}")
    # trailing rows/cols that do not fill a window are dropped
    return sliding_window_view(
        x4, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def maxpool_forward(
    x: Tensor,
    k: int,
    stride: int,
) -> Tuple[Tensor, PoolIndex]:
    """Window maximum plus the winner positions for the backward pass.

    Ties go to the first position in a row-major scan of the window.
    """
    x4, squeeze = _batched(x)
    n, c, h, w = x4.shape
    windows = _pool_windows(x4, k, stride)
    ho, wo = windows.shape[2:4]
    flat = windows.reshape(n, c, ho, wo, k * k)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    dy, dx = np.divmod(local, k)
    rows = np.arange(ho)[:, None] * stride + dy
    cols = np.arange(wo)[None, :] * stride + dx
    planes = np.arange(n)[:, None, None, None] * c + np.arange(c)[
        None, :, None, None]
    indices = (planes * h + rows) * w + cols

    return (
        _unbatch(np.ascontiguousarray(out), squeeze),
        PoolIndex(_unbatch(indices, squeeze), tuple(np.shape(x))),
    )


def maxpool_backward(index: PoolIndex, grad_out: Tensor) -> Tensor:
    """Route each output gradient to its recorded winner.
    """
    grad_out = np.asarray(grad_out)
    if grad_out.shape != index.indices.shape:
        raise ShapeError(
            f"Gradient shape {grad_out.shape} does not match pool index "
            f"shape {index.indices.shape}")
    grad_in = np.zeros(int(np.prod(index.input_shape)))
    np.add.at(grad_in, index.indices.ravel(), grad_out.ravel())
    return grad_in.reshape(index.input_shape)


def avgpool_forward(x: Tensor, k: int, stride: int) -> Tensor:
    x4, squeeze = _batched(x)
    out = _pool_windows(x4, k, stride).mean(axis=(-2, -1))
    return _unbatch(np.ascontiguousarray(out), squeeze)


def avgpool_backward(
    input_shape: Sequence[int],
    k: int,
    stride: int,
    grad_out: Tensor,
) -> Tensor:
    """Spread each output gradient evenly over its window.
    """
    g4, squeeze = _batched(grad_out)
    shape4 = tuple(input_shape) if len(input_shape) == 4 else (
        1, *input_shape)
    n, c, h, w = shape4
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    if g4.shape != (n, c, ho, wo):
        raise ShapeError(
            f"Gradient shape {np.shape(grad_out)} does not match pooled "
            f"shape {(n, c, ho, wo)}")
    grad_in = np.zeros(shape4)
    share = g4 / (k * k)
    for dy in range(k):
        for dx in range(k):
            grad_in[:, :, _span(dy, ho, stride), _span(dx, wo, stride)] += share
    return grad_in.reshape(tuple(input_shape))


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    # subgradient at exactly zero is zero
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid_backward(output: Tensor, grad_out: Tensor) -> Tensor:
    output = np.asarray(output)
    return grad_out * output * (1.0 - output)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis, order preserved.
    """
    if not inputs:
        raise ShapeError("Nothing to concatenate")
    arrays = [np.asarray(t) for t in inputs]
    ranks = {a.ndim for a in arrays}
    if len(ranks) != 1 or ranks.pop() not in (3, 4):
        raise ShapeError(
            f"Mixed or invalid tensor ranks: {[a.shape for a in arrays]}")
    lead = {(a.shape[:-3], a.shape[-2:]) for a in arrays}
    if len(lead) != 1:
        raise ShapeError(
            f"Spatial shapes differ: {[a.shape for a in arrays]}")
    return np.concatenate(arrays, axis=-3)


def slice_channels(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    """Inverse of ``concat_channels`` for the given channel counts.
    """
    x = np.asarray(x)
    if sum(sizes) != x.shape[-3]:
        raise ShapeError(
            f"Channel counts {list(sizes)} do not add up to {x.shape[-3]}")
    bounds = np.cumsum([0, *sizes])
    return [x[..., a:b, :, :] for a, b in zip(bounds[:-1], bounds[1:])]
