"""Loss assembly and the alternating student (follower) / rotation (leader) training loop.

Modes form a lattice over the same code path:

============  ==============  ==============  =================
mode          RGB KD term     frequency term  rotation updates
============  ==============  ==============  =================
vanilla       no              no              no
rgb_only      yes             no              no
fre_only      no              yes             no
naive_both    yes             yes             no (stays at I)
tokd          yes             yes             yes
============  ==============  ==============  =================
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datagen import LabeledDataset
from .errors import ConfigError, DataError, NumericError
from .frequency import HighPassSpec
from .metrics import accuracy, eer, roc_auc, smooth
from .nn import Adam, StepLr, cross_entropy, prefixed, save_checkpoint
from .rotation import RotationPair, manifold_update, per_sample_grads, rotation_loss
from .student import StudentNet, StudentSpec
from .teacher import TeacherNet

log = logging.getLogger(__name__)

MODES = ("vanilla", "rgb_only", "fre_only", "naive_both", "tokd")
DISTANCES = ("mse",)
CSV_COLUMNS = ("epoch", "lr_S", "lr_R", "L_Cls", "L_KD_RGB", "L_KD_Fre", "L_Rr", "L_Rf",
               "mean_grad_cosine_raw", "mean_grad_cosine_rotated", "val_acc", "val_auc")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "tokd"
    alpha1: float = 10.0
    alpha2: float = 10.0
    d: int = 64
    lr_student: StepLr = field(default_factory=lambda: StepLr(1e-4, 5, 0.1))
    lr_rotation: StepLr = field(default_factory=lambda: StepLr(1e-4, 3, 0.1))
    epochs: int = 15
    batch_size: int = 32
    highpass: HighPassSpec = field(default_factory=HighPassSpec)
    seed: int = 0
    distance_metric: str = "mse"
    normalize_grads: bool = False
    train_teacher_projectors: bool = True
    student: StudentSpec = field(default_factory=StudentSpec)
    coupled_rotation_lr: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError(f"alpha weights must be >= 0, got {self.alpha1}, {self.alpha2}")
        if self.distance_metric not in DISTANCES:
            raise ConfigError(f"distance_metric must be one of {DISTANCES}")
        if self.d < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("d and batch_size must be >= 1, epochs >= 0")
        if self.mode == "tokd":
            ratios = [self.eta_R(e) / self.eta_S(e)
                      for e in range(max(self.epochs, 1) + 1) if self.eta_S(e) > 0]
            if any(b > a * (1 + 1e-12) for a, b in zip(ratios, ratios[1:])):
                raise ConfigError("rotation learning rate must decay at least as fast as the student's "
                                  f"(ratio per epoch: {ratios})")

    def eta_S(self, epoch: int) -> float:
        return self.lr_student(epoch)

    def eta_R(self, epoch: int) -> float:
        """Leader rate: the student's decay times the rotation schedule's own extra decay.

        With ``coupled_rotation_lr`` off, ``lr_rotation`` is used on its own.
        """
        if not self.coupled_rotation_lr:
            return self.lr_rotation(epoch)
        return self.lr_rotation(epoch) * self.lr_student(epoch) / self.lr_student.base_lr

    @property
    def uses_rgb(self) -> bool:
        return self.mode in ("rgb_only", "naive_both", "tokd")

    @property
    def uses_fre(self) -> bool:
        return self.mode in ("fre_only", "naive_both", "tokd")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        for key in ("lr_student", "lr_rotation"):
            if isinstance(d.get(key), dict):
                d[key] = StepLr(**d[key])
        if isinstance(d.get("highpass"), dict):
            d["highpass"] = HighPassSpec(**d["highpass"])
        if isinstance(d.get("student"), dict):
            d["student"] = StudentSpec.from_dict(d["student"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- losses ---------------------------------------------------------------------

def kd_loss_per_sample(F_S: np.ndarray, F_T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``mean((F_S/|F_S| - F_T/|F_T|)**2)`` and each sample's gradient w.r.t. ``F_S``.

    Norms and means run over all non-batch elements, so an antipodal pair
    scores ``4/D`` and an orthogonal pair ``2/D`` for ``D`` elements per sample.
    """
    if F_S.shape != F_T.shape:
        raise ConfigError(f"kd_loss: feature shapes differ {F_S.shape} vs {F_T.shape}")
    n = len(F_S)
    a = F_S.reshape(n, -1)
    b = F_T.reshape(n, -1)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = np.nonzero((na == 0) | (nb == 0))[0]
    if zero.size:
        raise NumericError(f"kd_loss: zero-norm feature for sample(s) {zero.tolist()}")
    dim = a.shape[1]
    ahat = a / na[:, None]
    diff = ahat - b / nb[:, None]
    losses = np.sum(diff * diff, axis=1) / dim
    g_hat = 2.0 * diff / dim
    grad = (g_hat - ahat * np.sum(ahat * g_hat, axis=1, keepdims=True)) / na[:, None]
    return losses, grad.reshape(F_S.shape)


def kd_loss(F_S: np.ndarray, F_T: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean normalised-feature MSE and its gradient w.r.t. ``F_S``."""
    losses, grad = kd_loss_per_sample(F_S, F_T)
    return float(losses.mean()), grad / len(F_S)


def total_loss(cls: float, kd_rgb: float, kd_fre: float, cfg: DistillConfig) -> float:
    total = cls
    if cfg.uses_rgb:
        total += cfg.alpha1 * kd_rgb
    if cfg.uses_fre:
        total += cfg.alpha2 * kd_fre
    return total


# -- one step -------------------------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray
    x_f: np.ndarray
    y: np.ndarray
    t_rgb: np.ndarray | None = None  # cached frozen teacher branch features
    t_fre: np.ndarray | None = None

    def teacher_features(self, teacher: TeacherNet):
        if self.t_rgb is None or self.t_fre is None:
            self.t_rgb, self.t_fre = teacher.branch_features(self.x, self.x_f)
        return self.t_rgb, self.t_fre


@dataclass
class StepReport:
    L_Cls: float
    L_KD_RGB: float = float("nan")
    L_KD_Fre: float = float("nan")
    L_S: float = float("nan")
    L_Rr: float = float("nan")
    L_Rf: float = float("nan")
    cosine_raw: float = float("nan")
    cosine_rotated: float = float("nan")


def optimizer_params(student: StudentNet, teacher: TeacherNet, cfg: DistillConfig) -> dict[str, np.ndarray]:
    """The follower's parameter registry for ``cfg.mode``."""
    names = ["backbone", "classifier"]
    if cfg.uses_rgb:
        names.append("proj_rgb")
    if cfg.uses_fre:
        names.append("proj_fre")
    params = student.parameters(names)
    if cfg.train_teacher_projectors:
        if cfg.uses_rgb:
            params.update(prefixed("teacher.proj_rgb", teacher.proj_rgb.parameters()))
        if cfg.uses_fre:
            params.update(prefixed("teacher.proj_fre", teacher.proj_fre.parameters()))
    return params


def distill_step(student: StudentNet, teacher: TeacherNet, batch: Batch, cfg: DistillConfig,
                 optimizer: Adam, epoch: int = 0) -> StepReport:
    """Follower update of the student (and teacher projectors), then the leader rotation update."""
    use_r, use_f = cfg.uses_rgb, cfg.uses_fre
    out = student.forward_train(batch.x, use_r, use_f)
    cls, d_logits = cross_entropy(out.logits, batch.y)
    report = StepReport(L_Cls=cls)
    d_S = {"rgb": None, "fre": None}
    d_T = {}
    if use_r or use_f:
        t_rgb, t_fre = batch.teacher_features(teacher)
    for branch, used, alpha, F_S in (("rgb", use_r, cfg.alpha1, out.F_Sr), ("fre", use_f, cfg.alpha2, out.F_Sf)):
        if not used:
            continue
        t_feat = t_rgb if branch == "rgb" else t_fre
        proj_T = teacher.proj_rgb if branch == "rgb" else teacher.proj_fre
        F_T = proj_T.forward(t_feat, "train")
        loss, g_S = kd_loss(F_S, F_T)
        d_S[branch] = alpha * g_S
        if cfg.train_teacher_projectors:
            # the loss is symmetric in its two arguments
            d_T[branch] = alpha * kd_loss(F_T, F_S)[1]
        if branch == "rgb":
            report.L_KD_RGB = loss
        else:
            report.L_KD_Fre = loss
    report.L_S = total_loss(cls, report.L_KD_RGB, report.L_KD_Fre, cfg)
    if not np.isfinite(report.L_S):
        raise NumericError(f"non-finite student loss at epoch {epoch}: {report}")

    record = None
    if use_r and use_f:
        n = len(batch.y)
        record = per_sample_grads(student.proj_rgb, student.proj_fre, d_S["rgb"] * n, d_S["fre"] * n,
                                  student.rotation, normalize=cfg.normalize_grads)
        report.cosine_raw = record.cosine_raw
        report.cosine_rotated = record.cosine_rotated

    grads = student.backward_train(d_logits, d_S["rgb"], d_S["fre"])
    for branch in d_T:
        proj_T = teacher.proj_rgb if branch == "rgb" else teacher.proj_fre
        grads.update(prefixed(f"teacher.proj_{branch}", proj_T.backward(d_T[branch])[1]))
    optimizer.step(grads, lr=cfg.eta_S(epoch))

    if record is not None:
        rot = student.rotation
        updates = {}
        for branch, raw in (("rgb", record.raw_r), ("fre", record.raw_f)):
            R = rot.matrix(branch)
            loss_R, grad_R = rotation_loss(raw, record.g, R)
            if branch == "rgb":
                report.L_Rr = loss_R
            else:
                report.L_Rf = loss_R
            if cfg.mode == "tokd":
                updates[branch] = manifold_update(R, grad_R, cfg.eta_R(epoch))
        for branch, R in updates.items():
            rot.set_matrix(branch, R)
    return report


# -- experiment -----------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: dict
    config_hash: str
    history: list[dict]
    steps: list[dict]
    best_epoch: int
    val_metrics: dict
    test_metrics: dict
    student: StudentNet = field(repr=False)
    teacher_checksum_before: str = ""
    teacher_checksum_after: str = ""

    def summary(self) -> dict:
        return {"config_hash": self.config_hash, "mode": self.config["mode"], "seed": self.config["seed"],
                "best_epoch": self.best_epoch, "val": self.val_metrics, "test": self.test_metrics,
                "final": self.history[-1] if self.history else {}, "config": self.config}


def evaluate_scores(probs: np.ndarray, labels: np.ndarray) -> dict:
    scores = probs[:, 1]
    out = {"acc": accuracy(scores, labels)}
    if labels.min() != labels.max():
        out["auc"] = roc_auc(scores, labels)
        out["eer"] = eer(scores, labels)
    return out


def _mean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else float("nan")


def run_distillation(cfg: DistillConfig, teacher: TeacherNet | None, data: LabeledDataset,
                     out_dir: str | Path | None = None,
                     teacher_features: tuple[np.ndarray, np.ndarray] | None = None) -> ExperimentResult:
    """Train a student under ``cfg`` and select the earliest best-validation-accuracy epoch.

    The caller's teacher is not modified: a private copy is used, its
    projectors are trained (when configured) and its branches stay frozen.
    ``teacher_features`` may carry precomputed ``teacher.branch_features`` of
    the train split, which sweeps share between runs.
    """
    train, val, test = (data.subset(s) for s in ("train", "val", "test"))
    if len(train) == 0 or len(val) == 0:
        raise DataError("run_distillation needs non-empty train and val splits")
    if teacher is None:
        if cfg.mode != "vanilla":
            raise ConfigError(f"mode {cfg.mode!r} needs a trained teacher")
    else:
        teacher = copy.deepcopy(teacher)
    student = StudentNet(cfg.student, RotationPair(cfg.d, lr=cfg.lr_rotation),
                         rng=np.random.default_rng([cfg.seed, 0]))
    if teacher is not None and (student.proj_rgb.out_shape != teacher.proj_rgb.out_shape):
        raise ConfigError(f"student projector output {student.proj_rgb.out_shape} != teacher "
                          f"{teacher.proj_rgb.out_shape}")
    checksum_before = teacher.checksum() if teacher is not None else ""

    t_rgb = t_fre = None
    if cfg.mode != "vanilla":
        if teacher_features is None:
            teacher_features = teacher.branch_features(train.images, train.freq_images)
        t_rgb, t_fre = teacher_features
        if len(t_rgb) != len(train):
            raise DataError(f"teacher features cover {len(t_rgb)} samples, train split has {len(train)}")
    optimizer = Adam(optimizer_params(student, teacher, cfg) if teacher is not None
                     else student.parameters(["backbone", "classifier"]), lr=cfg.eta_S(0))
    shuffle_rng = np.random.default_rng([cfg.seed, 2])

    history, steps = [], []
    best_acc, best_epoch, best_state = -1.0, -1, None
    if cfg.epochs == 0:
        best_state = student.state_dict()
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train))
        reports = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Batch(train.images[idx], train.freq_images[idx], train.labels[idx],
                          None if t_rgb is None else t_rgb[idx], None if t_fre is None else t_fre[idx])
            rep = distill_step(student, teacher, batch, cfg, optimizer, epoch)
            reports.append(rep)
            steps.append({"epoch": epoch, "step": len(steps), "cosine_raw": rep.cosine_raw,
                          "cosine_rotated": rep.cosine_rotated, "L_Rr": rep.L_Rr, "L_Rf": rep.L_Rf})
        val_m = evaluate_scores(student.predict(val.images), val.labels)
        row = {
            "epoch": epoch, "lr_S": cfg.eta_S(epoch),
            "lr_R": cfg.eta_R(epoch) if cfg.mode == "tokd" else 0.0,
            "L_Cls": _mean([r.L_Cls for r in reports]),
            "L_KD_RGB": _mean([r.L_KD_RGB for r in reports]),
            "L_KD_Fre": _mean([r.L_KD_Fre for r in reports]),
            "L_Rr": _mean([r.L_Rr for r in reports]), "L_Rf": _mean([r.L_Rf for r in reports]),
            "mean_grad_cosine_raw": _mean([r.cosine_raw for r in reports]),
            "mean_grad_cosine_rotated": _mean([r.cosine_rotated for r in reports]),
            "val_acc": val_m["acc"], "val_auc": val_m.get("auc", float("nan")),
        }
        history.append(row)
        log.info("%s seed %d epoch %d: %s", cfg.mode, cfg.seed, epoch,
                 {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        if val_m["acc"] > best_acc:
            best_acc, best_epoch, best_state = val_m["acc"], epoch, student.state_dict()

    student.load_state_dict(best_state)
    val_metrics = evaluate_scores(student.predict(val.images), val.labels)
    test_metrics = evaluate_scores(student.predict(test.images), test.labels) if len(test) else {}
    result = ExperimentResult(
        config=cfg.to_dict(), config_hash=cfg.config_hash(), history=history, steps=steps,
        best_epoch=best_epoch, val_metrics=val_metrics, test_metrics=test_metrics, student=student,
        teacher_checksum_before=checksum_before,
        teacher_checksum_after=teacher.checksum() if teacher is not None else "")
    if out_dir is not None:
        write_result(result, out_dir)
    return result


def write_result(result: ExperimentResult, out_dir: str | Path, smooth_window: int = 50) -> dict[str, Path]:
    """Write metrics CSV, gradient trace CSV, JSON summary, full and inference checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "trace": out / "grad_trace.csv", "summary": out / "summary.json",
             "full": out / "student_full.ckpt", "inference": out / "student_infer.ckpt"}
    with open(paths["metrics"], "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(result.history)
    raw = [s["cosine_raw"] for s in result.steps]
    rot = [s["cosine_rotated"] for s in result.steps]
    with open(paths["trace"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "epoch", "cosine_raw", "cosine_rotated",
                         "cosine_raw_smoothed", "cosine_rotated_smoothed", "smooth_window"])
        for s, sr, sx in zip(result.steps, smooth(raw, smooth_window), smooth(rot, smooth_window)):
            writer.writerow([s["step"], s["epoch"], s["cosine_raw"], s["cosine_rotated"], sr, sx, smooth_window])
    with open(paths["summary"], "w") as f:
        json.dump(result.summary(), f, indent=2, sort_keys=True, default=float)
    meta = {"kind": "student", "student": result.student.spec.to_dict(), "config_hash": result.config_hash}
    save_checkpoint(paths["full"], result.student.state_dict(), {**meta, "inference_only": False})
    save_checkpoint(paths["inference"], result.student.state_dict(inference_only=True),
                    {**meta, "inference_only": True})
    return paths


def with_overrides(cfg: DistillConfig, **kwargs) -> DistillConfig:
    return replace(cfg, **kwargs)
