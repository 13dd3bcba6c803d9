"""Single-branch student: backbone, rotation insertion point, two projectors, classifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .nn import Conv2d, GlobalAvgPool, Linear, Sequential, conv_bn_relu, prefixed, softmax
from .rotation import RotationPair, rotate_backward


@dataclass(frozen=True)
class BackboneSpec:
    """Stage-wise CNN: each stage is a stride-``stride`` 3x3 conv + BN + ReLU."""

    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    stride: int = 2
    image_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ConfigError("backbone needs at least one stage")

    def feature_shape(self) -> tuple[int, int, int]:
        size = self.image_size
        for _ in self.channels:
            size = (size + 2 - 3) // self.stride + 1
        return (self.channels[-1], size, size)


def build_stages(spec: BackboneSpec, rng: np.random.Generator) -> list[Sequential]:
    stages = []
    shape = (spec.in_channels, spec.image_size, spec.image_size)
    for c in spec.channels:
        stage = Sequential(conv_bn_relu(shape[0], c, rng, stride=spec.stride), in_shape=shape)
        stages.append(stage)
        shape = stage.out_shape
    return stages


def build_projector(in_shape: tuple, out_ch: int, n_convs: int, rng: np.random.Generator,
                    bn_relu_after: tuple[int, ...] | None = None) -> Sequential:
    """3x3 stride-1 conv stack mapping ``in_shape`` to ``out_ch`` channels, same spatial size.

    ``bn_relu_after`` lists the 1-based conv indices followed by BN + ReLU
    (default: every conv).
    """
    after = set(range(1, n_convs + 1)) if bn_relu_after is None else set(bn_relu_after)
    layers = []
    c = in_shape[0]
    for i in range(1, n_convs + 1):
        if i in after:
            layers += conv_bn_relu(c, out_ch, rng)
        else:
            layers.append(Conv2d(c, out_ch, 3, 1, 1, bias=True, rng=rng))
        c = out_ch
    return Sequential(layers, in_shape=in_shape)


@dataclass(frozen=True)
class StudentSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    distill_channels: int = 64
    rgb_convs: int = 2
    fre_convs: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "StudentSpec":
        d = dict(d)
        d["backbone"] = BackboneSpec(**d["backbone"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StudentOutputs:
    z: np.ndarray
    logits: np.ndarray
    m_r: np.ndarray | None = None
    m_f: np.ndarray | None = None
    F_Sr: np.ndarray | None = None
    F_Sf: np.ndarray | None = None


class StudentNet:
    """Backbone ``S_B``, projectors ``G_Sr``/``G_Sf``, classifier ``G_Sc`` and a rotation pair.

    The classifier reads the unrotated backbone feature; only the projectors
    see rotated features.
    """

    def __init__(self, spec: StudentSpec, rotation: RotationPair | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        stages = build_stages(spec.backbone, rng)
        self.backbone = Sequential([l for s in stages for l in s.layers],
                                   in_shape=stages[0].in_shape)
        self.feature_shape = self.backbone.out_shape
        self.feature_len = int(np.prod(self.feature_shape))
        self.classifier = Sequential([GlobalAvgPool(), Linear(self.feature_shape[0], 2, rng=rng)],
                                     in_shape=self.feature_shape)
        self.proj_rgb = build_projector(self.feature_shape, spec.distill_channels, spec.rgb_convs, rng)
        self.proj_fre = build_projector(self.feature_shape, spec.distill_channels, spec.fre_convs, rng)
        self.rotation = rotation if rotation is not None else RotationPair(min(64, self.feature_len))
        if self.rotation.d > self.feature_len:
            raise ConfigError(
                f"rotation dimension {self.rotation.d} exceeds flattened feature length {self.feature_len}")
        self._last = None

    # -- registries --------------------------------------------------------

    def modules(self) -> dict[str, Sequential]:
        return {"backbone": self.backbone, "classifier": self.classifier,
                "proj_rgb": self.proj_rgb, "proj_fre": self.proj_fre}

    def parameters(self, names=("backbone", "classifier", "proj_rgb", "proj_fre")) -> dict[str, np.ndarray]:
        out = {}
        for name in names:
            out.update(prefixed(name, self.modules()[name].parameters()))
        return out

    def state_dict(self, inference_only: bool = False) -> dict[str, np.ndarray]:
        names = ("backbone", "classifier") if inference_only else tuple(self.modules())
        state = {}
        for name in names:
            state.update(prefixed(name, self.modules()[name].state_dict()))
        if not inference_only:
            state.update(prefixed("rotation", self.rotation.state_dict()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, module in self.modules().items():
            sub = {k[len(name) + 1:]: v for k, v in state.items() if k.startswith(name + ".")}
            if sub:
                module.load_state_dict(sub)
        rot = {k[len("rotation."):]: v for k, v in state.items() if k.startswith("rotation.")}
        if rot:
            self.rotation.load_state_dict(rot)

    # -- passes ------------------------------------------------------------

    def forward_train(self, x: np.ndarray, use_rgb: bool = True, use_fre: bool = True) -> StudentOutputs:
        z = self.backbone.forward(x, "train")
        logits = self.classifier.forward(z, "train")
        out = StudentOutputs(z=z, logits=logits)
        flat = z.reshape(len(z), -1)
        if use_rgb:
            out.m_r = self.rotation.apply(flat, "rgb")
            out.F_Sr = self.proj_rgb.forward(out.m_r.reshape(z.shape), "train")
        if use_fre:
            out.m_f = self.rotation.apply(flat, "fre")
            out.F_Sf = self.proj_fre.forward(out.m_f.reshape(z.shape), "train")
        self._last = out
        return out

    def backward_train(self, d_logits: np.ndarray, d_F_Sr: np.ndarray | None = None,
                       d_F_Sf: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Backpropagate through the last :meth:`forward_train`; returns prefixed param grads."""
        grads = {}
        dz, g = self.classifier.backward(d_logits)
        grads.update(prefixed("classifier", g))
        shape = dz.shape
        for d_F, proj, branch, name in ((d_F_Sr, self.proj_rgb, "rgb", "proj_rgb"),
                                        (d_F_Sf, self.proj_fre, "fre", "proj_fre")):
            if d_F is None:
                continue
            dm, g = proj.backward(d_F)
            grads.update(prefixed(name, g))
            dz = dz + rotate_backward(dm.reshape(len(dm), -1), self.rotation.matrix(branch)).reshape(shape)
        _, g = self.backbone.backward(dz)
        grads.update(prefixed("backbone", g))
        return grads

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Inference path: classifier on the backbone feature; no rotation or projector."""
        return self.classifier.forward(self.backbone.forward(x, "infer"), "infer")

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Class probabilities, shape (N, 2)."""
        return np.concatenate([softmax(self.logits(x[i:i + batch_size]))
                               for i in range(0, len(x), batch_size)]) if len(x) else np.zeros((0, 2))
