"""Frequency-aware image transform: orthonormal 2D DCT, triangular high-pass, inverse DCT."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class HighPassSpec:
    """Zero every DCT coefficient (u, v) with ``u/H + v/W < cutoff_fraction``."""

    cutoff_fraction: float = 1.0 / 3.0

    def __post_init__(self):
        if not 0.0 < self.cutoff_fraction < 1.0:
            raise ConfigError(f"cutoff_fraction must lie in (0, 1), got {self.cutoff_fraction}")

    def mask(self, h: int, w: int) -> np.ndarray:
        return highpass_mask(h, w, self.cutoff_fraction)


@lru_cache(maxsize=32)
def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    c.setflags(write=False)
    return c


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``C @ C.T == I``."""
    if n < 1:
        raise ConfigError(f"DCT size must be >= 1, got {n}")
    return _dct_matrix(n)


def dct2(x: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DCT-II over the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    return dct_matrix(h) @ x @ dct_matrix(w).T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct2` (the transforms are orthonormal, so this is the transpose)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    h, w = coeffs.shape[-2:]
    return dct_matrix(h).T @ coeffs @ dct_matrix(w)


@lru_cache(maxsize=32)
def _mask(h: int, w: int, cutoff: float) -> np.ndarray:
    u = np.arange(h)[:, None] / h
    v = np.arange(w)[None, :] / w
    m = ((u + v) >= cutoff).astype(np.float64)
    m.setflags(write=False)
    return m


def highpass_mask(h: int, w: int, cutoff_fraction: float) -> np.ndarray:
    """1 where a coefficient is kept, 0 inside the low-frequency triangle."""
    return _mask(h, w, float(cutoff_fraction))


def frequency_transform(x: np.ndarray, spec: HighPassSpec | None = None) -> np.ndarray:
    """Keep only high-frequency content of each channel, returned in the spatial domain.

    Works on any array whose last two axes are spatial (C,H,W or N,C,H,W).
    """
    spec = spec or HighPassSpec()
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    return idct2(dct2(x) * spec.mask(h, w))
