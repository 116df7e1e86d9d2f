"""
Differentiable operations on Tensors.

Each operation computes its forward value with numpy and, when a Graph is
active and one of the inputs is tracked, records a backward closure. Backward
closures receive the upstream gradient and a tuple saying which parents need
a gradient, so frozen weights never get one computed.
"""

from numbers import Number
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from src.core.tensor import Tensor, record
from src.utils.error_handler import ShapeError

Factor = Union[int, Tuple[int, int]]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _pair(factor: Factor, op: str) -> Tuple[int, int]:
    if isinstance(factor, (tuple, list)):
        fh, fw = factor
    else:
        fh = fw = factor
    if int(fh) != fh or int(fw) != fw:
        raise ShapeError(f"{op}: factor must be integral, got {factor}")
    fh, fw = int(fh), int(fw)
    if fh < 1 or fw < 1:
        raise ShapeError(f"{op}: factor must be >= 1, got {factor}")
    return fh, fw


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a (B, C, H, W) tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        out = Tensor._from_result(a.data + b, "add")
        return record(out, (a,), lambda g, needs: (g,), "add")

    _check_broadcast(a, b, "add")
    out = Tensor._from_result(a.data + b.data, "add")

    def backward_fn(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return record(out, (a, b), backward_fn, "add")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return add(a, -b)

    _check_broadcast(a, b, "sub")
    out = Tensor._from_result(a.data - b.data, "sub")

    def backward_fn(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return record(out, (a, b), backward_fn, "sub")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return scale(a, float(b))

    _check_broadcast(a, b, "mul")
    out = Tensor._from_result(a.data * b.data, "mul")

    def backward_fn(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return record(out, (a, b), backward_fn, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor._from_result(x.data * x.dtype.type(factor), "scale")
    return record(out, (x,), lambda g, needs: (g * factor,), "scale")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = Tensor._from_result(np.asarray(x.data.sum(), dtype=x.dtype), "sum")
    return record(out, (x,), lambda g, needs: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor._from_result(np.asarray(x.data.mean(), dtype=x.dtype), "mean")
    return record(out, (x,), lambda g, needs: (np.broadcast_to(g / n, x.shape).copy(),), "mean")


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element"""
    if prediction.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {prediction.shape} and target {target.shape} differ")
    diff = prediction.data - target.data
    n = diff.size
    out = Tensor._from_result(np.asarray(np.mean(diff * diff), dtype=prediction.dtype), "mse_loss")

    def backward_fn(g, needs):
        grad = (2.0 / n) * g * diff
        return (grad if needs[0] else None, -grad if needs[1] else None)

    return record(out, (prediction, target), backward_fn, "mse_loss")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    out = Tensor._from_result(data, "reshape")
    return record(out, (x,), lambda g, needs: (g.reshape(x.shape),), "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._from_result(a.data @ b.data, "matmul")

    def backward_fn(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return record(out, (a, b), backward_fn, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors given")
    reference = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.ndim != len(reference) or any(
                s != r for i, (s, r) in enumerate(zip(tensor.shape, reference)) if i != axis % len(reference)):
            raise ShapeError(f"concat: shapes {reference} and {tensor.shape} differ off axis {axis}")
    out = Tensor._from_result(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g, needs):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(piece if need else None for piece, need in zip(pieces, needs))

    return record(out, tuple(tensors), backward_fn, "concat")


def channel_slice(x: Tensor, start: int, count: int) -> Tensor:
    """Channels [start, start + count) along axis 1"""
    if start < 0 or start + count > x.shape[1]:
        raise ShapeError(f"channel_slice: [{start}, {start + count}) out of range for shape {x.shape}")
    out = Tensor._from_result(x.data[:, start:start + count], "channel_slice")

    def backward_fn(g, needs):
        grad = np.zeros_like(x.data)
        grad[:, start:start + count] = g
        return (grad,)

    return record(out, (x,), backward_fn, "channel_slice")


def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)
    out = Tensor._from_result(x.data * sig, "silu")
    return record(out, (x,), lambda g, needs: (g * sig * (1.0 + x.data * (1.0 - sig)),), "silu")


def take_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: rows of a (N, D) table"""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: index out of range for table with {table.shape[0]} rows")
    out = Tensor._from_result(table.data[idx], "take_rows")

    def backward_fn(g, needs):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return record(out, (table,), backward_fn, "take_rows")


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x W^T + b with x (B, in) and W (out, in)"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data
    out = Tensor._from_result(data, "linear")
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g, needs):
        grads = [g @ weight.data if needs[0] else None,
                 g.T @ x.data if needs[1] else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if needs[2] else None)
        return grads

    return record(out, parents, backward_fn, "linear")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation

    Args:
        x: Input of shape (B, C, H, W)
        weight: Kernel of shape (O, C, k, k)
        bias: Optional bias of shape (O,)
        stride: Spatial stride
        padding: Zero padding on each side

    Returns:
        Output of shape (B, O, (H + 2p - k) // s + 1, (W + 2p - k) // s + 1)
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[1] != x.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    k = weight.shape[2]
    batch, channels, height, width = x.shape
    if height + 2 * padding < k or width + 2 * padding < k:
        raise ShapeError(f"conv2d: input {x.shape} is smaller than kernel {weight.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    data = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        data = data + bias.data[None, :, None, None]
    out = Tensor._from_result(data, "conv2d")
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g, needs):
        grad_x = grad_w = grad_b = None
        if needs[0]:
            grad_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    contribution = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        contribution.transpose(0, 3, 1, 2)
            grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        if needs[1]:
            grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and needs[2]:
            grad_b = g.sum(axis=(0, 2, 3))
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(grad_b)
        return grads

    return record(out, parents, backward_fn, "conv2d")


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _require_4d(x, "group_norm")
    batch, channels, height, width = x.shape
    if channels % num_groups != 0:
        raise ShapeError(f"group_norm: {channels} channels not divisible into {num_groups} groups")
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} do not match {channels} channels")

    grouped = x.data.reshape(batch, num_groups, -1)
    n = grouped.shape[2]
    mu = grouped.mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(grouped.var(axis=2, keepdims=True) + eps)
    x_hat = ((grouped - mu) * inv_std).reshape(x.shape)
    out = Tensor._from_result(x_hat * gamma.data[None, :, None, None] + beta.data[None, :, None, None],
                              "group_norm")

    def backward_fn(g, needs):
        grad_x = grad_gamma = grad_beta = None
        if needs[0]:
            d_hat = (g * gamma.data[None, :, None, None]).reshape(batch, num_groups, -1)
            hat = x_hat.reshape(batch, num_groups, -1)
            grad_x = (inv_std / n) * (
                n * d_hat - d_hat.sum(axis=2, keepdims=True)
                - hat * (d_hat * hat).sum(axis=2, keepdims=True))
            grad_x = grad_x.reshape(x.shape)
        if needs[1]:
            grad_gamma = (g * x_hat).sum(axis=(0, 2, 3))
        if needs[2]:
            grad_beta = g.sum(axis=(0, 2, 3))
        return grad_x, grad_gamma, grad_beta

    return record(out, (x, gamma, beta), backward_fn, "group_norm")


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

def interpolation_matrix(size_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape (size_in * factor, size_in)"""
    size_out = size_in * factor
    source = (np.arange(size_out, dtype=np.float64) + 0.5) / factor - 0.5
    source = np.clip(source, 0.0, None)
    lower = np.minimum(np.floor(source).astype(np.int64), size_in - 1)
    upper = np.minimum(lower + 1, size_in - 1)
    frac = source - lower
    matrix = np.zeros((size_out, size_in), dtype=np.float64)
    rows = np.arange(size_out)
    np.add.at(matrix, (rows, lower), 1.0 - frac)
    np.add.at(matrix, (rows, upper), frac)
    return matrix.astype(dtype)


def bilinear_upsample(x: Tensor, factor: Factor) -> Tensor:
    """Separable bilinear upsampling with align_corners=False semantics"""
    _require_4d(x, "bilinear_upsample")
    fh, fw = _pair(factor, "bilinear_upsample")
    rows = interpolation_matrix(x.shape[2], fh, x.dtype)
    cols = interpolation_matrix(x.shape[3], fw, x.dtype)
    out = Tensor._from_result(np.matmul(np.matmul(rows, x.data), cols.T), "bilinear_upsample")
    return record(out, (x,), lambda g, needs: (np.matmul(np.matmul(rows.T, g), cols),), "bilinear_upsample")


def avg_pool2d(x: Tensor, factor: Factor) -> Tensor:
    """Area downsampling by averaging non-overlapping blocks"""
    _require_4d(x, "avg_pool2d")
    fh, fw = _pair(factor, "avg_pool2d")
    batch, channels, height, width = x.shape
    if height % fh or width % fw:
        raise ShapeError(f"avg_pool2d: extents {(height, width)} not divisible by factor {(fh, fw)}")
    data = x.data.reshape(batch, channels, height // fh, fh, width // fw, fw).mean(axis=(3, 5))
    out = Tensor._from_result(data, "avg_pool2d")

    def backward_fn(g, needs):
        return (np.repeat(np.repeat(g, fh, axis=2), fw, axis=3) / (fh * fw),)

    return record(out, (x,), backward_fn, "avg_pool2d")


def nearest_downsample(x: Tensor, factor: Factor) -> Tensor:
    _require_4d(x, "nearest_downsample")
    fh, fw = _pair(factor, "nearest_downsample")
    if x.shape[2] % fh or x.shape[3] % fw:
        raise ShapeError(f"nearest_downsample: extents {x.shape[2:]} not divisible by factor {(fh, fw)}")
    out = Tensor._from_result(x.data[:, :, ::fh, ::fw], "nearest_downsample")

    def backward_fn(g, needs):
        grad = np.zeros_like(x.data)
        grad[:, :, ::fh, ::fw] = g
        return (grad,)

    return record(out, (x,), backward_fn, "nearest_downsample")


# --------------------------------------------------------------------------
# Timestep encoding
# --------------------------------------------------------------------------

def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """
    Sinusoidal encoding of a batch of (possibly fractional) timesteps

    Args:
        t: Tensor of shape (B,)
        dim: Embedding width; odd widths get a zero final column
        max_period: Longest wavelength

    Returns:
        Tensor of shape (B, dim) laid out as [sin | cos]
    """
    if t.ndim != 1:
        raise ShapeError(f"timestep_embedding expects shape (B,), got {t.shape}")
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / max(half, 1)).astype(t.dtype)
    args = t.data[:, None] * freqs[None, :]
    sin, cos = np.sin(args), np.cos(args)
    data = np.concatenate([sin, cos], axis=1)
    if dim % 2:
        data = np.concatenate([data, np.zeros((t.shape[0], 1), dtype=t.dtype)], axis=1)
    out = Tensor._from_result(data, "timestep_embedding")

    def backward_fn(g, needs):
        g_sin, g_cos = g[:, :half], g[:, half:2 * half]
        return (((g_sin * cos - g_cos * sin) * freqs[None, :]).sum(axis=1),)

    return record(out, (t,), backward_fn, "timestep_embedding")
