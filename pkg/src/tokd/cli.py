"""Command-line harness: ``tokd gen-data | train-teacher | distill | eval | sweep-alpha | sweep-d``.

Distillation settings come from an optional ``key = value`` config file and
are overridden by flags (``--set key=value`` or the dedicated flags).

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .datagen import GenSpec, LabeledDataset, load_image_dir, write_image_dir, generate
from .distill import DistillConfig, evaluate_scores, run_distillation
from .errors import ConfigError, DataError, NumericError
from .frequency import HighPassSpec
from .nn import StepLr, load_checkpoint, save_checkpoint
from .rotation import orthogonality_error
from .student import BackboneSpec, StudentNet, StudentSpec
from .teacher import TeacherNet, TeacherSpec, train_teacher

log = logging.getLogger("tokd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODE_ALIASES = {"vanilla": "vanilla", "rgb": "rgb_only", "fre": "fre_only", "both": "naive_both", "tokd": "tokd",
                "rgb_only": "rgb_only", "fre_only": "fre_only", "naive_both": "naive_both"}
SWEEP_COLUMNS = ("sweep", "value", "mode", "seed", "alpha1", "alpha2", "d", "best_epoch", "val_acc", "val_auc",
                 "test_acc", "test_auc", "test_eer", "orth_error_rgb", "orth_error_fre", "det_rgb", "det_fre",
                 "config_hash", "out_dir")


class UsageError(Exception):
    pass


# -- config files ------------------------------------------------------------------

def read_kv_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def build_config(kv: dict[str, str], base: DistillConfig | None = None) -> DistillConfig:
    """Fold flat string settings into a :class:`DistillConfig`."""
    cfg = base or DistillConfig()
    kv = dict(kv)
    upd = {}
    try:
        if "alpha" in kv:
            upd["alpha1"] = upd["alpha2"] = float(kv.pop("alpha"))
        for key in ("alpha1", "alpha2"):
            if key in kv:
                upd[key] = float(kv.pop(key))
        for key in ("d", "epochs", "batch_size", "seed"):
            if key in kv:
                upd[key] = int(kv.pop(key))
        for key in ("normalize_grads", "train_teacher_projectors", "coupled_rotation_lr"):
            if key in kv:
                upd[key] = _bool(kv.pop(key))
        if "mode" in kv:
            mode = kv.pop("mode")
            if mode not in MODE_ALIASES:
                raise ConfigError(f"unknown mode {mode!r}")
            upd["mode"] = MODE_ALIASES[mode]
        if "distance_metric" in kv:
            upd["distance_metric"] = kv.pop("distance_metric")
        for name in ("lr_student", "lr_rotation"):
            sched = getattr(cfg, name)
            fields_ = {"base_lr": kv.pop(name, None), "step_epochs": kv.pop(f"{name}_step", None),
                       "gamma": kv.pop(f"{name}_gamma", None)}
            if any(v is not None for v in fields_.values()):
                upd[name] = StepLr(
                    float(fields_["base_lr"]) if fields_["base_lr"] is not None else sched.base_lr,
                    int(fields_["step_epochs"]) if fields_["step_epochs"] is not None else sched.step_epochs,
                    float(fields_["gamma"]) if fields_["gamma"] is not None else sched.gamma)
        if "cutoff" in kv:
            upd["highpass"] = HighPassSpec(float(kv.pop("cutoff")))
        student = cfg.student
        bb = student.backbone
        if "student_channels" in kv:
            bb = replace(bb, channels=_ints(kv.pop("student_channels")))
        if "image_size" in kv:
            bb = replace(bb, image_size=int(kv.pop("image_size")))
        s_upd = {k: int(kv.pop(k)) for k in ("distill_channels", "rgb_convs", "fre_convs") if k in kv}
        upd["student"] = replace(student, backbone=bb, **s_upd)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc
    if kv:
        raise ConfigError(f"unknown config keys: {sorted(kv)}")
    return replace(cfg, **upd)


def parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- model files -------------------------------------------------------------------

def load_teacher(path: str | Path) -> TeacherNet:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise DataError(f"{path} is not a teacher checkpoint (kind={meta.get('kind')!r})")
    teacher = TeacherNet(TeacherSpec.from_dict(meta["teacher"]))
    teacher.load_state_dict(state)
    return teacher


def load_student(path: str | Path) -> StudentNet:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "student":
        raise DataError(f"{path} is not a student checkpoint (kind={meta.get('kind')!r})")
    student = StudentNet(StudentSpec.from_dict(meta["student"]))
    student.load_state_dict(state)
    return student


def _load_data(path: str | Path, image_size: int | None = None, cutoff: float | None = None) -> LabeledDataset:
    hp = HighPassSpec(cutoff) if cutoff is not None else None
    return load_image_dir(path, image_size=image_size, highpass=hp)


# -- subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = GenSpec(n_samples=args.n, image_size=args.image_size, artifact_strength=args.artifact_strength,
                   seed=args.seed, splits=tuple(float(v) for v in args.splits.split(",")))
    out = Path(args.out)
    data = generate(spec)
    write_image_dir(data, out)
    (out / "gen_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True))
    print(f"wrote {len(data)} images to {out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    data = _load_data(args.data, args.image_size)
    size = data.images.shape[-1]
    spec = TeacherSpec(backbone=BackboneSpec(in_channels=data.images.shape[1], channels=_ints(args.channels),
                                             image_size=size),
                       n_rfam=args.rfam, rfam_residual=args.rfam_residual,
                       distill_channels=args.distill_channels)
    teacher = TeacherNet(spec, np.random.default_rng([args.seed, 0]))
    history = train_teacher(teacher, data, epochs=args.epochs, lr=StepLr(args.lr, args.lr_step, 0.1),
                            batch_size=args.batch_size, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "teacher.ckpt", teacher.state_dict(), {"kind": "teacher", "teacher": spec.to_dict()})
    with open(out / "teacher_metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "lr", "loss", "train_acc", "val_acc"], extrasaction="ignore")
        writer.writeheader()
        writer.writerows(history)
    print(json.dumps(history[-1] if history else {}, sort_keys=True))
    return EXIT_OK


def _resolve_config(args, teacher: TeacherNet | None, data: LabeledDataset) -> DistillConfig:
    kv = read_kv_file(args.config) if args.config else {}
    flags = parse_overrides(args.set)
    for key in ("mode", "alpha", "d", "epochs", "seed", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = str(value)
    kv.update(flags)  # flags win
    kv.setdefault("image_size", str(data.images.shape[-1]))
    if teacher is not None:
        kv.setdefault("distill_channels", str(teacher.spec.out_channels))
    cfg = build_config(kv)
    bb = replace(cfg.student.backbone, in_channels=data.images.shape[1])
    return replace(cfg, student=replace(cfg.student, backbone=bb))


def _run_point(job: tuple) -> dict:
    cfg_dict, teacher_path, data_path, out_dir, sweep, value = job
    cfg = DistillConfig.from_dict(cfg_dict)
    data = _load_data(data_path, cfg.student.backbone.image_size, cfg.highpass.cutoff_fraction)
    teacher = load_teacher(teacher_path) if teacher_path else None
    result = run_distillation(cfg, teacher, data, out_dir=out_dir)
    rot = result.student.rotation
    return {"sweep": sweep, "value": value, "mode": cfg.mode, "seed": cfg.seed, "alpha1": cfg.alpha1,
            "alpha2": cfg.alpha2, "d": cfg.d, "best_epoch": result.best_epoch,
            "val_acc": result.val_metrics.get("acc"), "val_auc": result.val_metrics.get("auc"),
            "test_acc": result.test_metrics.get("acc"), "test_auc": result.test_metrics.get("auc"),
            "test_eer": result.test_metrics.get("eer"),
            "orth_error_rgb": orthogonality_error(rot.R_r), "orth_error_fre": orthogonality_error(rot.R_f),
            "det_rgb": float(np.linalg.det(rot.R_r)), "det_fre": float(np.linalg.det(rot.R_f)),
            "config_hash": result.config_hash, "out_dir": str(out_dir)}


def run_jobs(jobs: list[tuple]) -> list[dict]:
    """Run sweep points, in worker processes when ``TOKD_THREADS`` > 1."""
    try:
        workers = int(os.environ.get("TOKD_THREADS", "1"))
    except ValueError:
        raise ConfigError(f"TOKD_THREADS must be an integer, got {os.environ['TOKD_THREADS']!r}")
    if workers <= 1 or len(jobs) <= 1:
        return [_run_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_point, jobs))


def cmd_distill(args, sweep: str | None = None, values: str | None = None) -> int:
    if sweep is None:
        if args.sweep_alpha and args.sweep_d:
            raise UsageError("choose one of --sweep-alpha / --sweep-d")
        if args.sweep_alpha:
            sweep, values = "alpha", args.sweep_alpha
        elif args.sweep_d:
            sweep, values = "d", args.sweep_d
    data = _load_data(args.data)
    teacher = load_teacher(args.teacher) if args.teacher else None
    cfg = _resolve_config(args, teacher, data)
    if cfg.mode != "vanilla" and teacher is None:
        raise UsageError(f"mode {cfg.mode} needs --teacher")
    if teacher is not None and cfg.student.backbone.image_size != teacher.spec.backbone.image_size:
        raise ConfigError("student and teacher image sizes differ")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    points = [(None, cfg)]
    if sweep == "alpha":
        points = [(float(v), replace(cfg, alpha1=float(v), alpha2=float(v))) for v in values.split(",")]
    elif sweep == "d":
        points = [(int(v), replace(cfg, d=int(v))) for v in values.split(",")]
    jobs = []
    for value, point_cfg in points:
        point_dir = out if sweep is None else out / f"{sweep}_{value}"
        jobs.append((point_cfg.to_dict(), args.teacher, args.data, str(point_dir), sweep or "", value))
    manifest = {"config_file": args.config, "data": args.data, "teacher": args.teacher, "out": str(out),
                "sweep": sweep, "configs": [j[0] for j in jobs]}
    manifest["hash"] = content_hash({k: v for k, v in manifest.items() if k != "out"})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    rows = run_jobs(jobs)
    if sweep is not None:
        with open(out / f"sweep_{sweep}.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    for row in rows:
        print(json.dumps({k: row[k] for k in ("sweep", "value", "mode", "test_acc", "test_auc")}, default=str))
    return EXIT_OK


def cmd_sweep(args, sweep: str) -> int:
    args.sweep_alpha = args.sweep_d = None
    return cmd_distill(args, sweep=sweep, values=args.values)


def cmd_eval(args) -> int:
    _, meta = load_checkpoint(args.checkpoint)
    kind = meta.get("kind")
    if kind == "student":
        model = load_student(args.checkpoint)
        data = _load_data(args.data, model.spec.backbone.image_size)
        split = data.subset(args.split)
        probs = model.predict(split.images)
    elif kind == "teacher":
        model = load_teacher(args.checkpoint)
        data = _load_data(args.data, model.spec.backbone.image_size)
        split = data.subset(args.split)
        probs = model.predict(split.images, split.freq_images)
    else:
        raise DataError(f"unknown checkpoint kind {kind!r}")
    if len(split) == 0:
        raise DataError(f"split {args.split!r} is empty")
    metrics = {"split": args.split, "n": len(split), **evaluate_scores(probs, split.labels)}
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _add_distill_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="raster folder with manifest.csv")
    p.add_argument("--teacher", help="teacher checkpoint (required unless mode is vanilla)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value settings file; flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--alpha", type=float, help="set alpha1 = alpha2")
    p.add_argument("--d", type=int, help="rotation subspace size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic raster dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--artifact-strength", type=float, default=0.8)
    p.add_argument("--splits", default="0.7,0.15,0.15")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the dual-branch teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-step", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--channels", default="16,32,64")
    p.add_argument("--distill-channels", type=int)
    p.add_argument("--rfam", type=int, default=3, help="number of attention blocks (0 disables)")
    p.add_argument("--rfam-residual", action="store_true")
    p.add_argument("--image-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student in one mode")
    _add_distill_args(p)
    p.add_argument("--mode", choices=sorted(set(MODE_ALIASES)))
    p.add_argument("--sweep-alpha", metavar="A,B,...", help="tie alpha1 = alpha2 and sweep")
    p.add_argument("--sweep-d", metavar="D1,D2,...")
    p.set_defaults(func=cmd_distill)

    for name, key, default in (("sweep-alpha", "alpha", "1,10,100,200,1000"), ("sweep-d", "d", "8,16,32,64,128")):
        p = sub.add_parser(name, help=f"sweep {key} (combined CSV)")
        _add_distill_args(p)
        p.add_argument("--mode", choices=sorted(set(MODE_ALIASES)))
        p.add_argument("--values", default=default)
        p.set_defaults(func=lambda a, k=key: cmd_sweep(a, k))

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"tokd: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"tokd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"tokd: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
