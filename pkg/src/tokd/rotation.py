"""Learnable SO(d) rotations and gradient homogenisation.

The shared backbone feature ``z`` (flattened to N x M) is rotated on its first
``d`` components only; the remaining ``M - d`` pass through unchanged. Each
rotation is trained to align the per-sample distillation gradient it produces
(mapped back to the shared space) with the per-sample average of the RGB and
frequency gradients. Updates stay on SO(d) through a Cayley retraction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, StateError
from .nn import StepLr

log = logging.getLogger(__name__)

BRANCHES = ("rgb", "fre")


@dataclass
class RotationPair:
    d: int
    R_r: np.ndarray = None
    R_f: np.ndarray = None
    lr: StepLr = field(default_factory=lambda: StepLr(1e-4, 3, 0.1))
    applications: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"rotation dimension must be >= 1, got {self.d}")
        if self.R_r is None:
            self.R_r = np.eye(self.d)
        if self.R_f is None:
            self.R_f = np.eye(self.d)
        for R in (self.R_r, self.R_f):
            if R.shape != (self.d, self.d):
                raise ConfigError(f"rotation matrix shape {R.shape} != ({self.d}, {self.d})")

    def matrix(self, branch: str) -> np.ndarray:
        return self.R_r if branch == "rgb" else self.R_f

    def set_matrix(self, branch: str, R: np.ndarray) -> None:
        if branch == "rgb":
            self.R_r = R
        else:
            self.R_f = R

    def apply(self, z: np.ndarray, branch: str) -> np.ndarray:
        self.applications += 1
        return rotate(z, self.matrix(branch))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"R_r": self.R_r.copy(), "R_f": self.R_f.copy()}

    def load_state_dict(self, state) -> None:
        self.R_r = np.array(state["R_r"], dtype=np.float64)
        self.R_f = np.array(state["R_f"], dtype=np.float64)
        self.d = self.R_r.shape[0]


def rotate(z: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Multiply the first ``d`` components of every row of ``z`` (N x M) by ``R``."""
    d = R.shape[0]
    if z.ndim != 2:
        raise ConfigError(f"rotate expects a 2D (N, M) array, got {z.shape}")
    if d > z.shape[1]:
        raise ConfigError(f"rotation dimension {d} exceeds feature length {z.shape[1]}")
    out = z.copy()
    out[:, :d] = z[:, :d] @ R.T
    return out


def rotate_backward(dm: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``z`` of :func:`rotate` given the gradient w.r.t. its output."""
    d = R.shape[0]
    dz = dm.copy()
    dz[:, :d] = dm[:, :d] @ R
    return dz


def orthogonality_error(R: np.ndarray) -> float:
    return float(np.linalg.norm(R.T @ R - np.eye(R.shape[0])))


@dataclass
class GradientRecord:
    """Per-sample distillation gradients for one batch.

    ``raw_*`` are gradients w.r.t. the rotated features restricted to the
    rotated subspace; ``v_*`` are the same mapped back to the shared space
    (``R^T raw``); ``g`` is their per-sample average.
    """

    raw_r: np.ndarray
    raw_f: np.ndarray
    v_r: np.ndarray
    v_f: np.ndarray
    g: np.ndarray
    cosine_raw: float
    cosine_rotated: float


def _safe_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(np.dot(a, b) / (na * nb))


def build_record(raw_r: np.ndarray, raw_f: np.ndarray, rotation: RotationPair,
                 normalize: bool = False) -> GradientRecord:
    """Assemble a :class:`GradientRecord` from per-sample gradients w.r.t. the rotated
    features (each N x d)."""
    v_r = raw_r @ rotation.R_r
    v_f = raw_f @ rotation.R_f
    if normalize:
        def unit(v):
            n = np.linalg.norm(v, axis=1, keepdims=True)
            return np.divide(v, n, out=np.zeros_like(v), where=n > 0)
        g = 0.5 * (unit(v_r) + unit(v_f))
    else:
        g = 0.5 * (v_r + v_f)
    return GradientRecord(
        raw_r=raw_r, raw_f=raw_f, v_r=v_r, v_f=v_f, g=g,
        cosine_raw=_safe_cosine(raw_r.mean(axis=0), raw_f.mean(axis=0)),
        cosine_rotated=_safe_cosine(v_r.mean(axis=0), v_f.mean(axis=0)),
    )


def per_sample_grads(proj_rgb, proj_fre, d_F_r: np.ndarray, d_F_f: np.ndarray,
                     rotation: RotationPair, normalize: bool = False) -> GradientRecord:
    """Per-sample gradients of the two distillation losses w.r.t. the rotated features.

    ``proj_rgb``/``proj_fre`` must hold a cached forward on the current batch.
    ``d_F_r``/``d_F_f`` are the per-sample loss gradients w.r.t. the projector
    outputs (row ``n`` is the gradient of sample ``n``'s own loss). BN
    statistics are held fixed at their batch values, so one batched backward
    yields independent per-sample gradients.
    """
    raws = []
    for proj, dF in ((proj_rgb, d_F_r), (proj_fre, d_F_f)):
        if not proj._cached:
            raise StateError("per_sample_grads needs a cached projector forward")
        dm, _ = proj.backward(dF, frozen_stats=True, param_grads=False)
        raws.append(dm.reshape(dm.shape[0], -1)[:, :rotation.d])
    return build_record(raws[0], raws[1], rotation, normalize=normalize)


def rotation_loss(raw: np.ndarray, g: np.ndarray, R: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative summed cosine between ``R^T raw_n`` and the target ``g_n``.

    ``raw`` and ``g`` are treated as constants. Samples where either vector is
    zero contribute nothing. Returns the loss and its Euclidean gradient w.r.t. ``R``.
    """
    u = raw @ R  # rows are R^T raw_n
    nu = np.linalg.norm(u, axis=1)
    ng = np.linalg.norm(g, axis=1)
    ok = (nu > 0) & (ng > 0)
    skipped = int((~ok).sum())
    if skipped:
        log.warning("rotation_loss: %d of %d samples have a zero gradient or target; skipped",
                    skipped, len(ok))
    grad = np.zeros_like(R)
    if not ok.any():
        return 0.0, grad
    u, g, raw, nu, ng = u[ok], g[ok], raw[ok], nu[ok], ng[ok]
    uhat = u / nu[:, None]
    ghat = g / ng[:, None]
    cos = np.sum(uhat * ghat, axis=1)
    # d cos / d u_n = (ghat - cos * uhat) / |u_n| ; u = R^T raw  =>  dL/dR = -sum raw_n (dcos/du_n)^T
    dcos_du = (ghat - cos[:, None] * uhat) / nu[:, None]
    grad = -raw.T @ dcos_du
    return float(-cos.sum()), grad


def manifold_update(R: np.ndarray, grad: np.ndarray, lr: float, max_retries: int = 5) -> np.ndarray:
    """One Riemannian descent step on SO(d) via the Cayley retraction.

    The Euclidean gradient is projected to the skew generator
    ``A = (G R^T - R G^T) / 2`` and ``R <- (I + lr/2 A)^-1 (I - lr/2 A) R``.
    """
    A = 0.5 * (grad @ R.T - R @ grad.T)
    if not A.any() or lr == 0.0:
        return R.copy()
    eye = np.eye(R.shape[0])
    for _ in range(max_retries + 1):
        lhs = eye + 0.5 * lr * A
        if np.isfinite(lhs).all() and np.linalg.cond(lhs) < 1e12:
            return np.linalg.solve(lhs, (eye - 0.5 * lr * A) @ R)
        log.warning("manifold_update: ill-conditioned Cayley system at lr=%g; halving", lr)
        lr *= 0.5
    raise NumericError("manifold_update: Cayley system stayed singular after retries")
