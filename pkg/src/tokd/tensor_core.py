"""Dense float64 tensor primitives.

A "tensor" here is simply a C-contiguous ``numpy.ndarray`` of dtype float64.
Convolution uses the cross-correlation convention (no kernel flip), so
``conv2d_backward`` is the exact adjoint of ``conv2d`` as written.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ConfigError, DataError, ShapeError

TENSOR_MAGIC = b"TOKD"


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous float64 array (no copy if already one)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_norm(x: np.ndarray) -> float:
    """Euclidean norm over all elements."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.dot(x.ravel(), x.ravel())))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv_params(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> None:
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d: padding must be >= 0, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ConfigError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Unfold ``x`` (N,C,H,W) into rows of receptive fields, shape (N*H'*W', kh*kw*C).

    Columns are ordered (kh, kw, C), matching :func:`kernel_matrix`.
    """
    n, c, h, w = x.shape
    _check_conv_params(h, w, kh, kw, stride, padding)
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xt = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    xt[:, padding:padding + h, padding:padding + w] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xt[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add receptive-field rows back to (N,C,H,W)."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    xt = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    for i in range(kh):
        for j in range(kw):
            xt[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, i, j]
    return np.ascontiguousarray(xt[:, padding:padding + h, padding:padding + w].transpose(0, 3, 1, 2))


def kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """(C_out, C_in, kH, kW) kernel as a (C_out, kH*kW*C_in) matrix in im2col column order."""
    return kernel.transpose(0, 2, 3, 1).reshape(kernel.shape[0], -1)


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0,
           bias: np.ndarray | None = None) -> np.ndarray:
    """2D cross-correlation of (N,C_in,H,W) with (C_out,C_in,kH,kW)."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {kernel.shape}")
    cout, _, kh, kw = kernel.shape
    cols, ho, wo = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel_matrix(kernel).T
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d_backward(dy: np.ndarray, x_shape: tuple, cols: np.ndarray, kernel: np.ndarray,
                    stride: int, padding: int, need_weight: bool = True
                    ) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Gradients of :func:`conv2d` given the forward ``cols`` (from :func:`im2col`).

    Returns ``(dx, dkernel, dbias)``; the last two are None when ``need_weight`` is false.
    """
    cout, cin, kh, kw = kernel.shape
    dyr = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dx = col2im(dyr @ kernel_matrix(kernel), x_shape, kh, kw, stride, padding)
    if not need_weight:
        return dx, None, None
    dw = (dyr.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
    return dx, np.ascontiguousarray(dw), dyr.sum(axis=0)


# -- serialization ---------------------------------------------------------

def write_tensor(f: BinaryIO, t: np.ndarray) -> None:
    t = as_tensor(t)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", t.ndim))
    f.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    f.write(t.astype("<f8").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise DataError(f"truncated tensor payload: expected {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path: str | Path, t: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
