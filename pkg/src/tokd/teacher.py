"""Dual-branch teacher: RGB and frequency branches with RFAM cross-attention,
a fused classification head and the two teacher-side projectors."""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .nn import (Adam, GlobalAvgPool, Linear, Sequential, Sigmoid, StepLr, conv_bn_relu,
                 cross_entropy, prefixed, softmax)
from .student import BackboneSpec, build_projector, build_stages

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeacherSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    n_rfam: int = 3
    rfam_residual: bool = False
    distill_channels: int | None = None  # defaults to the last stage width
    rgb_proj_convs: int = 3
    fre_proj_convs: int = 5
    fre_proj_bn_after: tuple[int, ...] = (2, 4)

    def __post_init__(self):
        object.__setattr__(self, "fre_proj_bn_after", tuple(self.fre_proj_bn_after))
        if not 0 <= self.n_rfam <= len(self.backbone.channels):
            raise ConfigError(f"n_rfam={self.n_rfam} must lie in [0, {len(self.backbone.channels)}]")

    @property
    def out_channels(self) -> int:
        return self.distill_channels or self.backbone.channels[-1]

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherSpec":
        d = dict(d)
        d["backbone"] = BackboneSpec(**d["backbone"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class RfamBlock:
    """RGB-frequency attention: concat -> conv module 1 -> conv module 2 -> sigmoid -> split."""

    def __init__(self, channels: int, spatial: tuple[int, int], rng: np.random.Generator,
                 residual: bool = False):
        self.channels = channels
        self.residual = residual
        shape = (2 * channels,) + tuple(spatial)
        self.conv_module_1 = Sequential(conv_bn_relu(2 * channels, 2 * channels, rng), in_shape=shape)
        self.conv_module_2 = Sequential(conv_bn_relu(2 * channels, 2 * channels, rng, relu=False)
                                        + [Sigmoid()], in_shape=shape)
        self._cache = None

    def modules(self) -> dict[str, Sequential]:
        return {"conv1": self.conv_module_1, "conv2": self.conv_module_2}

    def attention(self, f_rgb, f_fre, mode="train") -> np.ndarray:
        cat = np.concatenate([f_rgb, f_fre], axis=1)
        return self.conv_module_2.forward(self.conv_module_1.forward(cat, mode), mode)

    def forward(self, f_rgb: np.ndarray, f_fre: np.ndarray, mode: str = "train"):
        if f_rgb.shape != f_fre.shape or f_rgb.shape[1] != self.channels:
            raise ShapeError(f"RFAM with {self.channels} channels got {f_rgb.shape} and {f_fre.shape}")
        att = self.attention(f_rgb, f_fre, mode)
        a_r, a_f = att[:, :self.channels], att[:, self.channels:]
        self._cache = (f_rgb, f_fre, a_r, a_f) if mode != "infer" else None
        if self.residual:
            return f_rgb * (1.0 + a_r), f_fre * (1.0 + a_f)
        return f_rgb * a_r, f_fre * a_f

    def backward(self, d_rgb: np.ndarray, d_fre: np.ndarray):
        f_rgb, f_fre, a_r, a_f = self._cache
        d_att = np.concatenate([d_rgb * f_rgb, d_fre * f_fre], axis=1)
        d_cat, _ = self.conv_module_1.backward(self.conv_module_2.backward(d_att)[0])
        scale_r = a_r + 1.0 if self.residual else a_r
        scale_f = a_f + 1.0 if self.residual else a_f
        c = self.channels
        return d_rgb * scale_r + d_cat[:, :c], d_fre * scale_f + d_cat[:, c:]


class TeacherNet:
    def __init__(self, spec: TeacherSpec, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.rgb_stages = build_stages(spec.backbone, rng)
        self.fre_stages = build_stages(spec.backbone, rng)
        for a, b in zip(self.rgb_stages, self.fre_stages):
            if a.out_shape != b.out_shape:
                raise ConfigError("branch stage shapes differ")
        self.rfam_blocks = [RfamBlock(s.out_shape[0], s.out_shape[1:], rng, spec.rfam_residual)
                            for s in self.rgb_stages[:spec.n_rfam]]
        self.feature_shape = self.rgb_stages[-1].out_shape
        c = self.feature_shape[0]
        cat_shape = (2 * c,) + self.feature_shape[1:]
        self.fusion_head = Sequential([GlobalAvgPool(), Linear(2 * c, 2, rng=rng)], in_shape=cat_shape)
        self.proj_rgb = build_projector(self.feature_shape, spec.out_channels, spec.rgb_proj_convs, rng)
        self.proj_fre = build_projector(self.feature_shape, spec.out_channels, spec.fre_proj_convs, rng,
                                        bn_relu_after=spec.fre_proj_bn_after)
        if self.proj_rgb.out_shape != self.proj_fre.out_shape:
            raise ConfigError(f"teacher projector shapes differ: {self.proj_rgb.out_shape} "
                              f"vs {self.proj_fre.out_shape}")

    # -- registries --------------------------------------------------------

    def modules(self, include_projectors: bool = True) -> dict[str, Sequential]:
        mods = {}
        for i, s in enumerate(self.rgb_stages):
            mods[f"rgb.{i}"] = s
        for i, s in enumerate(self.fre_stages):
            mods[f"fre.{i}"] = s
        for i, b in enumerate(self.rfam_blocks):
            for k, m in b.modules().items():
                mods[f"rfam.{i}.{k}"] = m
        mods["head"] = self.fusion_head
        if include_projectors:
            mods["proj_rgb"] = self.proj_rgb
            mods["proj_fre"] = self.proj_fre
        return mods

    def parameters(self, include_projectors: bool = False) -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.modules(include_projectors).items():
            out.update(prefixed(name, m.parameters()))
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.modules(False).items():
            out.update(prefixed(name, m.grads()))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.modules().items():
            out.update(prefixed(name, m.state_dict()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, m in self.modules().items():
            m.load_state_dict({k[len(name) + 1:]: v for k, v in state.items() if k.startswith(name + ".")})

    def checksum(self, include_projectors: bool = False) -> str:
        """SHA-256 over the weights (projectors excluded by default)."""
        h = hashlib.sha256()
        for name, v in sorted(self.parameters(include_projectors).items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    # -- passes ------------------------------------------------------------

    def forward(self, x: np.ndarray, x_f: np.ndarray, mode: str = "train"):
        """Returns ``(logits, feat_rgb, feat_fre)``."""
        a, b = x, x_f
        for i, (sr, sf) in enumerate(zip(self.rgb_stages, self.fre_stages)):
            a = sr.forward(a, mode)
            b = sf.forward(b, mode)
            if i < len(self.rfam_blocks):
                a, b = self.rfam_blocks[i].forward(a, b, mode)
        logits = self.fusion_head.forward(np.concatenate([a, b], axis=1), mode)
        return logits, a, b

    def backward(self, d_logits: np.ndarray, d_feat_rgb: np.ndarray | None = None,
                 d_feat_fre: np.ndarray | None = None) -> dict[str, np.ndarray]:
        d_cat, _ = self.fusion_head.backward(d_logits)
        c = self.feature_shape[0]
        da, db = d_cat[:, :c], d_cat[:, c:]
        if d_feat_rgb is not None:
            da = da + d_feat_rgb
        if d_feat_fre is not None:
            db = db + d_feat_fre
        for i in reversed(range(len(self.rgb_stages))):
            if i < len(self.rfam_blocks):
                da, db = self.rfam_blocks[i].backward(da, db)
            da, _ = self.rgb_stages[i].backward(da)
            db, _ = self.fre_stages[i].backward(db)
        return self.grads()

    def branch_features(self, x: np.ndarray, x_f: np.ndarray, batch_size: int = 256):
        """Frozen (inference-mode) final branch features, batched."""
        feats_r, feats_f = [], []
        for i in range(0, len(x), batch_size):
            _, a, b = self.forward(x[i:i + batch_size], x_f[i:i + batch_size], "infer")
            feats_r.append(a)
            feats_f.append(b)
        return np.concatenate(feats_r), np.concatenate(feats_f)

    def project(self, feat_rgb: np.ndarray, feat_fre: np.ndarray, mode: str = "train"):
        """``(F_Tr, F_Tf)`` from the final branch features."""
        return self.proj_rgb.forward(feat_rgb, mode), self.proj_fre.forward(feat_fre, mode)

    def predict(self, x: np.ndarray, x_f: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [softmax(self.forward(x[i:i + batch_size], x_f[i:i + batch_size], "infer")[0])
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 2))


def train_teacher(teacher: TeacherNet, data, epochs: int = 10, lr: StepLr = StepLr(1e-3, 5, 0.1),
                  batch_size: int = 32, seed: int = 0, select_best: bool = True) -> list[dict]:
    """Supervised cross-entropy training of both branches, RFAM blocks and the fusion head.

    The teacher projectors are left untouched here; they are trained during
    distillation. ``data`` is a :class:`~tokd.datagen.LabeledDataset`. Returns
    one dict per epoch with ``loss``, ``train_acc`` and ``val_acc``; when
    ``select_best`` the weights of the earliest best-validation epoch are restored.
    """
    from .metrics import accuracy

    train = data.subset("train")
    val = data.subset("val") if data.has_split("val") else None
    if len(train) == 0:
        raise DataError("train_teacher: empty training split")
    rng = np.random.default_rng([seed, 1])
    opt = Adam(teacher.parameters(), lr=lr(0))
    history = []
    best = (-1.0, None)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits, _, _ = teacher.forward(train.images[idx], train.freq_images[idx], "train")
            loss, d_logits = cross_entropy(logits, train.labels[idx])
            if not np.isfinite(loss):
                raise NumericError(f"teacher loss became non-finite at epoch {epoch}")
            losses.append(loss)
            opt.step(teacher.backward(d_logits), lr=lr(epoch))
        row = {"epoch": epoch, "lr": lr(epoch), "loss": float(np.mean(losses)),
               "train_acc": accuracy(teacher.predict(train.images, train.freq_images)[:, 1], train.labels)}
        if val is not None and len(val):
            row["val_acc"] = accuracy(teacher.predict(val.images, val.freq_images)[:, 1], val.labels)
        log.info("teacher epoch %d: %s", epoch, row)
        history.append(row)
        score = row.get("val_acc", row["train_acc"])
        if select_best and score > best[0]:
            best = (score, copy.deepcopy(teacher.state_dict()))
    if select_best and best[1] is not None:
        teacher.load_state_dict(best[1])
    return history
