"""Experiment harness: ``qdbev <subcommand> [--config INI] [--out DIR] [--seed N]``.

Exit codes: 0 success, 2 configuration error, 3 training abort (non-finite
loss), 4 missing artifact.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from . import __version__
from . import tensor as T
from .bevnet import STAGES, load_checkpoint, save_checkpoint
from .distill import DistillConfig
from .geometry import BevGrid, build_bev_mask, default_rig, load_rig
from .metrics import bops, ptq_sweep
from .quant import FULL
from .trainer import (StageSchedule, TrainConfig, TrainingAbort, Workspace, make_scenes,
                      run_phase1, run_phase2, scene_seeds, train_teacher)

log = logging.getLogger("qdbev")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_MISSING = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


def _bits(v: int) -> bool:
    return 2 <= v <= FULL


def _positive(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit(v) -> bool:
    return 0 < v <= 1


def _beta(v) -> bool:
    return 0 <= v < 1


# section -> key -> (type, default, validator, requirement text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "seed": (int, 0, lambda v: 0 <= v < 2**64, "an unsigned 64-bit integer"),
        "rig_file": (str, "", None, ""),
        "out_dir": (str, "runs/default", None, ""),
    },
    "model": {
        "channels": (int, 8, _positive, "positive"),
        "bev_channels": (int, 8, _positive, "positive"),
        "hidden": (int, 16, _positive, "positive"),
    },
    "quant": {
        "w_bits": (int, 4, _bits, "in [2, 32]"),
        "a_bits": (int, 6, _bits, "in [2, 32]"),
        "act_momentum": (float, 0.1, _unit, "in (0, 1]"),
    },
    "schedule": {
        "n1": (int, 5, _positive, "positive"),
        "n2": (int, 10, _positive, "positive"),
        "n3": (int, 15, _positive, "positive"),
        "n4": (int, 20, _positive, "positive"),
        "p2": (int, 10, _nonneg, "nonnegative"),
        "activation_first": (bool, True, None, ""),
    },
    "distill": {
        "tau": (float, 1.0, _positive, "positive"),
        "vgd_weight": (float, 1.0, _nonneg, "nonnegative"),
    },
    "optimizer": {
        "teacher_lr": (float, 1e-2, _positive, "positive"),
        "phase1_lr": (float, 2e-3, _positive, "positive"),
        "phase1_backbone_mult": (float, 0.1, _nonneg, "nonnegative"),
        "phase2_lr": (float, 1e-4, _positive, "positive"),
        "phase2_backbone_mult": (float, 0.5, _nonneg, "nonnegative"),
        "warmup_steps": (int, 50, _nonneg, "nonnegative"),
        "weight_decay": (float, 0.01, _nonneg, "nonnegative"),
        "beta1": (float, 0.9, _beta, "in [0, 1)"),
        "beta2": (float, 0.999, _beta, "in [0, 1)"),
        "lr_restart": (bool, True, None, ""),
    },
    "trainer": {
        "n_train": (int, 128, _positive, "positive"),
        "n_eval": (int, 32, _positive, "positive"),
        "n_calib": (int, 8, _positive, "positive"),
        "n_objects": (int, 12, _nonneg, "nonnegative"),
        "batch_size": (int, 4, _positive, "positive"),
        "teacher_epochs": (int, 60, _positive, "positive"),
        "plateau_patience": (int, 5, _positive, "positive"),
        "plateau_tol": (float, 1e-4, _nonneg, "nonnegative"),
    },
}


def _parse_value(typ, raw: str):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw.strip())
    if typ is float:
        return float(raw.strip())
    return raw.strip()


def _emit_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {
        sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()})
    source: str = "<defaults>"

    def __getitem__(self, item: str) -> dict:
        return self.values[item]

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self.values == other.values

    # derived objects
    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    def train_config(self) -> TrainConfig:
        t, o = self.values["trainer"], self.values["optimizer"]
        return TrainConfig(
            seed=self.seed, n_train=t["n_train"], n_eval=t["n_eval"], n_objects=t["n_objects"],
            batch_size=t["batch_size"], teacher_epochs=t["teacher_epochs"],
            plateau_patience=t["plateau_patience"], plateau_tol=t["plateau_tol"], **o)

    def schedule(self, oneshot: bool = False) -> StageSchedule:
        s, q = self.values["schedule"], self.values["quant"]
        return StageSchedule((s["n1"], s["n2"], s["n3"], s["n4"]), s["p2"], q["w_bits"],
                             q["a_bits"], s["activation_first"], oneshot)

    def distill_config(self) -> DistillConfig:
        d = self.values["distill"]
        return DistillConfig(d["tau"], d["vgd_weight"])

    def widths(self) -> dict:
        return dict(self.values["model"])

    def rig_and_grid(self):
        path = self.values["experiment"]["rig_file"]
        if not path:
            return default_rig(), BevGrid()
        p = Path(path)
        if not p.is_absolute() and self.source not in ("<defaults>", "<string>"):
            p = Path(self.source).parent / p
        if not p.exists():
            raise MissingArtifact(f"rig file not found: {p}")
        return load_rig(p)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec, keys in self.values.items():
            cp[sec] = {k: _emit_value(v) for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = ExperimentConfig(source=source)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: [{sec}] unknown key '{key}'")
            typ, _, check, need = SCHEMA[sec][key]
            try:
                val = _parse_value(typ, raw)
            except ValueError:
                raise ConfigError(f"{source}: [{sec}] {key} = {raw!r} is not a valid "
                                  f"{typ.__name__}") from None
            if check is not None and not check(val):
                raise ConfigError(f"{source}: [{sec}] {key} = {raw!r} must be {need}")
            cfg.values[sec][key] = val
    s = cfg.values["schedule"]
    bounds = [s["n1"], s["n2"], s["n3"], s["n4"]]
    if bounds != sorted(bounds):
        raise ConfigError(f"{source}: [schedule] n1..n4 must be nondecreasing, got {bounds}")
    return cfg


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), str(p))


def default_config_text() -> str:
    return resources.files("qdbev").joinpath("default.ini").read_text()


# ------------------------------------------------------------ run layout


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def curves(self) -> Path:
        return self.root / "curves"

    def ckpt(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str) -> Path:
        p = self.ckpt(name)
        if not (p / "manifest.json").exists():
            raise MissingArtifact(f"missing checkpoint '{name}' under {self.root} "
                                  f"(expected {p / 'manifest.json'})")
        return p

    def write_json(self, name: str, obj) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / name
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=name, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def _diff(a, b, prefix="") -> list[str]:
    if isinstance(a, dict) and isinstance(b, dict):
        out = []
        for k in sorted(set(a) | set(b)):
            out += _diff(a.get(k), b.get(k), f"{prefix}.{k}" if prefix else k)
        return out
    return [] if a == b else [f"{prefix}: teacher={a!r} student={b!r}"]


def _workspace(cfg: ExperimentConfig) -> Workspace:
    rig, grid = cfg.rig_and_grid()
    return Workspace.build(rig, grid, cfg.train_config())


# ------------------------------------------------------------ subcommands


def cmd_train_teacher(cfg, run: RunDir, args) -> None:
    ws = _workspace(cfg)
    net, curve = train_teacher(ws, cfg.train_config(), cfg.widths())
    save_checkpoint(net, run.ckpt("teacher"), {"kind": "teacher", "seed": cfg.seed})
    curve.write_csv(run.curves / "teacher.csv")
    log.info("teacher: %d epochs, eval loss %.6f", len(curve.records), curve.final.eval_metric)


def cmd_qat(cfg, run: RunDir, args) -> None:
    teacher, _ = load_checkpoint(run.require("teacher"))
    ws = _workspace(cfg)
    name = "qat_oneshot" if args.oneshot else "qat_progressive"
    teacher.set_act_momentum(cfg["quant"]["act_momentum"])
    student, curve = run_phase1(teacher, ws, cfg.schedule(oneshot=args.oneshot), cfg.train_config())
    save_checkpoint(student, run.ckpt(name), {"kind": name, "seed": cfg.seed})
    curve.write_csv(run.curves / f"{name}.csv")
    log.info("%s: final eval loss %.6f", name, curve.final.eval_metric)


def cmd_vgd(cfg, run: RunDir, args) -> None:
    teacher, t_manifest = load_checkpoint(run.require("teacher"))
    student_name = f"qat_{args.student}"
    student, s_manifest = load_checkpoint(run.require(student_name))
    diffs = _diff(t_manifest["config"], s_manifest["config"])
    if diffs:
        raise ConfigError("teacher/student configuration mismatch:\n  " + "\n  ".join(diffs))
    ws = _workspace(cfg)
    dcfg = cfg.distill_config()
    net, curve = run_phase2(student, teacher, ws, cfg.schedule(), cfg.train_config(), dcfg)
    save_checkpoint(net, run.ckpt("vgd"), {"kind": "vgd", "seed": cfg.seed, "tau": dcfg.tau,
                                           "vgd_weight": dcfg.vgd_weight,
                                           "student": student_name})
    curve.write_csv(run.curves / "vgd.csv")
    log.info("vgd: final eval loss %.6f", curve.final.eval_metric)


def _sweep(cfg, run: RunDir) -> dict:
    teacher, _ = load_checkpoint(run.require("teacher"))
    ws = _workspace(cfg)
    calib = make_scenes(ws.rig, ws.grid, scene_seeds(cfg.seed, "calib", cfg["trainer"]["n_calib"]),
                        cfg["trainer"]["n_objects"])
    q = cfg["quant"]
    table = ptq_sweep(teacher, ws.eval, calib.images, ws.mask, q["w_bits"], q["a_bits"])
    ok = table.ordering_holds()
    if not ok:
        log.warning("sensitivity ordering (neck, decoder < backbone, encoder; all worst) "
                    "does not hold for seed %d", cfg.seed)
    return {"w_bits": table.w_bits, "a_bits": table.a_bits, "rows": table.to_json(),
            "ordering_holds": ok}


def cmd_ptq_sweep(cfg, run: RunDir, args) -> None:
    run.write_json("sensitivity.json", _sweep(cfg, run))


def cmd_report(cfg, run: RunDir, args) -> None:
    teacher, _ = load_checkpoint(run.require("teacher"))
    final_name = next(n for n in ("vgd", "qat_progressive", "qat_oneshot", "teacher")
                      if (run.ckpt(n) / "manifest.json").exists())
    net, _ = load_checkpoint(run.ckpt(final_name))
    eff = bops(net)
    fp = bops(net, {s: replace(net.schemes[s], w_bits=FULL, a_bits=FULL) for s in STAGES})
    sens_path = run.root / "sensitivity.json"
    sens = json.loads(sens_path.read_text()) if sens_path.exists() else _sweep(cfg, run)
    curves = sorted(p.name for p in run.curves.glob("*.csv")) if run.curves.exists() else []
    report = {
        "model": final_name,
        "schemes": {s.key: net.schemes[s].label for s in STAGES},
        "bops_tera": eff.bops_tera,
        "model_size_mb": eff.model_size_mb,
        "fp_bops_tera": fp.bops_tera,
        "fp_model_size_mb": fp.model_size_mb,
        "layer_macs": eff.macs,
        "sensitivity": sens["rows"],
        "sensitivity_ordering_holds": sens["ordering_holds"],
        "curves_path": str(run.curves),
        "curves": curves,
        "dumps": _dump_tensors(cfg, run, {"teacher": teacher, final_name: net}),
    }
    run.write_json("report.json", report)


def _dump_tensors(cfg, run: RunDir, nets: dict) -> list[str]:
    """Raw dumps of the visibility mask and each net's taps on the first eval scene."""
    rig, grid = cfg.rig_and_grid()
    mask = build_bev_mask(rig, grid)
    scene = make_scenes(rig, grid, scene_seeds(cfg.seed, "eval", 1), cfg["trainer"]["n_objects"])
    out = {"bev_mask_flat": mask.flat, "scene_truth": scene.truth, "scene_images": scene.images}
    for name, net in nets.items():
        with T.no_grad():
            tap = net.forward(scene.images, mask)
        out[f"{name}_img_features"] = tap.img_features.data
        out[f"{name}_bev_features"] = tap.bev_features.data
        out[f"{name}_predictions"] = tap.predictions.data
    d = run.root / "dumps"
    d.mkdir(parents=True, exist_ok=True)
    for key, arr in out.items():
        T.dump_tensor(d / f"{key}.bin", arr)
    return sorted(f"{k}.bin" for k in out)


def cmd_config(cfg, run: RunDir, args) -> None:
    sys.stdout.write(cfg.to_ini())


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "qat": cmd_qat,
    "vgd": cmd_vgd,
    "ptq-sweep": cmd_ptq_sweep,
    "report": cmd_report,
    "config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults to the shipped one)")
    common.add_argument("--out", help="run directory (overrides [experiment] out_dir)")
    common.add_argument("--seed", type=int, help="overrides [experiment] seed")

    parser = argparse.ArgumentParser(prog="qdbev", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teacher", parents=[common], help="full-precision pretraining")
    qat = sub.add_parser("qat", parents=[common], help="Phase 1 quantization-aware training")
    mode = qat.add_mutually_exclusive_group()
    mode.add_argument("--progressive", dest="oneshot", action="store_false",
                      help="stage-by-stage schedule (default)")
    mode.add_argument("--oneshot", dest="oneshot", action="store_true",
                      help="quantize every stage from the first epoch")
    qat.set_defaults(oneshot=False)
    vgd = sub.add_parser("vgd", parents=[common], help="Phase 2 view-guided distillation")
    vgd.add_argument("--lambda", dest="vgd_weight", type=float, help="VGD loss weight")
    vgd.add_argument("--tau", type=float, help="softmax temperature")
    vgd.add_argument("--student", choices=["progressive", "oneshot"], default="progressive")
    sub.add_parser("ptq-sweep", parents=[common], help="per-stage PTQ sensitivity table")
    sub.add_parser("report", parents=[common], help="aggregate a run directory into report.json")
    sub.add_parser("config", parents=[common], help="print the effective config")
    return parser


def _effective_config(args) -> ExperimentConfig:
    if args.config:
        cfg = parse_config(args.config)
    else:
        cfg = parse_config_text(default_config_text(), "<shipped default.ini>")
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed {args.seed} must be an unsigned 64-bit integer")
        cfg.values["experiment"]["seed"] = args.seed
    if args.out:
        cfg.values["experiment"]["out_dir"] = args.out
    for key in ("vgd_weight", "tau"):
        val = getattr(args, key, None)
        if val is not None:
            if not (val > 0 if key == "tau" else val >= 0):
                raise ConfigError(f"--{'lambda' if key == 'vgd_weight' else key} {val} is out of range")
            cfg.values["distill"][key] = val
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _effective_config(args)
        run = RunDir(cfg["experiment"]["out_dir"])
        COMMANDS[args.command](cfg, run, args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        log.error("%s", exc)
        return EXIT_ABORT
    except MissingArtifact as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
