"""Teacher pretraining, progressive QAT and view-guided distillation."""
from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .bevnet import STAGES, BevNet, StageId
from .distill import DistillConfig, distill_losses
from .geometry import BevGrid, BevMask, Camera, build_bev_mask, synthesize_scene
from .quant import FULL
from .tensor import Tensor, seeded_rng

CURVE_HEADER = ["epoch", "phase", "backbone_w", "neck_w", "encoder_w", "decoder_w",
                "a_bits", "task_loss", "eval_metric", "vgd_loss"]


class TrainingAbort(RuntimeError):
    """Non-finite loss; carries where it happened."""

    def __init__(self, phase: str, epoch: int, stage: str | None = None):
        self.phase, self.epoch, self.stage = phase, epoch, stage
        where = f" (latest quantized stage: {stage})" if stage else ""
        super().__init__(f"{phase}: non-finite loss at epoch {epoch}{where}")


def derive_seed(seed: int, *tags) -> int:
    """Stable 64-bit sub-seed from a base seed and string tags."""
    msg = ":".join([str(int(seed))] + [str(t) for t in tags]).encode()
    return int.from_bytes(hashlib.sha256(msg).digest()[:8], "little")


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class StageSchedule:
    """Epoch boundaries N_1..N_4 of Phase 1 and the Phase 2 length P_2.

    Stage ``i`` (1-based) carries ``w_bits`` weights from epoch ``N_{i-1}+1``
    through the end of Phase 1; epoch 0 runs at W32A{a_bits} when
    ``activation_first`` is set. ``oneshot`` quantizes everything from epoch 0.
    """

    boundaries: tuple = (5, 10, 15, 20)
    p2: int = 10
    w_bits: int = 4
    a_bits: int = 6
    activation_first: bool = True
    oneshot: bool = False

    def __post_init__(self):
        b = tuple(int(v) for v in self.boundaries)
        if len(b) != 4 or b[0] < 1 or any(y < x for x, y in zip(b, b[1:])):
            raise ValueError(f"boundaries must be 4 nondecreasing epochs >= 1, got {b}")
        if self.p2 < 0:
            raise ValueError("p2 must be nonnegative")
        object.__setattr__(self, "boundaries", b)

    @property
    def n4(self) -> int:
        return self.boundaries[-1]

    @property
    def phase1_epochs(self) -> range:
        return range(0, self.n4 + 1)


def bit_schedule(epoch: int, sched: StageSchedule) -> dict[StageId, tuple[int, int]]:
    """Per-stage (w_bits, a_bits) in force during ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    epoch = min(epoch, sched.n4 + sched.p2)
    final = {s: (sched.w_bits, sched.a_bits) for s in STAGES}
    if sched.oneshot:
        return final
    out = {}
    for i, s in enumerate(STAGES):
        start = 0 if i == 0 else sched.boundaries[i - 1]
        w_on = epoch > start
        if sched.activation_first:
            a_on = True
        else:
            a_on = w_on
        out[s] = (sched.w_bits if w_on else FULL, sched.a_bits if a_on else FULL)
    return out


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    n_train: int = 128
    n_eval: int = 32
    n_objects: int = 12
    batch_size: int = 4
    teacher_epochs: int = 60
    teacher_lr: float = 1e-2
    phase1_lr: float = 2e-3
    phase1_backbone_mult: float = 0.1
    phase2_lr: float = 1e-4
    phase2_backbone_mult: float = 0.5
    warmup_steps: int = 50
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    plateau_patience: int = 5
    plateau_tol: float = 1e-4
    lr_restart: bool = True  # fresh warmup + cosine whenever the bit assignment changes


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay and per-parameter lr multipliers."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, lr_mult: dict | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_mult = lr_mult or {}
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            step_lr = lr * self.lr_mult.get(n, 1.0)
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data = p.data - step_lr * (update + self.weight_decay * p.data)


def warmup_cosine(step: int, total: int, warmup: int, base: float) -> float:
    """Linear warmup for ``warmup`` steps, then cosine annealing to zero."""
    if step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


def backbone_multipliers(net: BevNet, mult: float) -> dict[str, float]:
    return {n: mult for n in net.params if net.stage_of(n) == StageId.BACKBONE}


# --------------------------------------------------------------------- data


@dataclass
class SceneSet:
    images: np.ndarray  # [N, S, 1, H, W]
    truth: np.ndarray  # [S, P]
    seeds: tuple

    def __len__(self) -> int:
        return self.truth.shape[0]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.images[:, idx], self.truth[idx]


def make_scenes(rig, grid, seeds, n_objects: int) -> SceneSet:
    imgs, truth = [], []
    for s in seeds:
        im, tr = synthesize_scene(s, n_objects, rig, grid)
        imgs.append(im)
        truth.append(tr)
    return SceneSet(np.stack(imgs, axis=1), np.stack(truth), tuple(seeds))


def scene_seeds(seed: int, split: str, count: int) -> list[int]:
    """Per-scene seeds; train and eval splits never share a seed."""
    return [derive_seed(seed, "scene", split, i) for i in range(count)]


@dataclass
class Workspace:
    """Rig, grid, mask and the fixed train/eval scene sets for one seed."""

    rig: list
    grid: BevGrid
    mask: BevMask
    train: SceneSet
    eval: SceneSet

    @classmethod
    def build(cls, rig: list[Camera], grid: BevGrid, cfg: TrainConfig) -> "Workspace":
        train = make_scenes(rig, grid, scene_seeds(cfg.seed, "train", cfg.n_train), cfg.n_objects)
        ev = make_scenes(rig, grid, scene_seeds(cfg.seed, "eval", cfg.n_eval), cfg.n_objects)
        if set(train.seeds) & set(ev.seeds):
            raise ValueError("train and eval scene seeds overlap")
        return cls(rig, grid, build_bev_mask(rig, grid), train, ev)


# ------------------------------------------------------------------- curves


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    bits: dict  # StageId -> (w, a)
    task_loss: float
    eval_metric: float
    vgd_loss: float | None = None
    total_loss: float | None = None

    def row(self) -> list[str]:
        a = sorted({ab for _, ab in self.bits.values()})
        a_field = str(a[0]) if len(a) == 1 else ":".join(str(self.bits[s][1]) for s in STAGES)
        return ([str(self.epoch), self.phase] + [str(self.bits[s][0]) for s in STAGES]
                + [a_field, repr(self.task_loss), repr(self.eval_metric),
                   "" if self.vgd_loss is None else repr(self.vgd_loss)])


@dataclass
class TrainingCurve:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)  # (epoch, StageId) weight-quantization onsets

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("curve epochs must be strictly increasing")
        self.records.append(rec)

    def extend(self, other: "TrainingCurve") -> "TrainingCurve":
        for r in other.records:
            self.append(r)
        self.events.extend(other.events)
        return self

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        """Write through a temp file so a killed run leaves no partial CSV."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(self.to_csv())
        os.replace(tmp, path)
        return path


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- training


def evaluate_loss(net: BevNet, ws: Workspace, quantize_on: bool = True) -> float:
    with T.no_grad():
        tap = net.forward(ws.eval.images, ws.mask, quantize_on=quantize_on)
        return T.bce_with_logits(tap.predictions, ws.eval.truth).item()


def _apply_bits(net: BevNet, bits: dict) -> None:
    for s, (wb, ab) in bits.items():
        net.set_stage_bits(s, wb, ab)


def _latest_stage(bits: dict) -> str | None:
    quantized = [s for s in STAGES if bits[s][0] < FULL]
    return quantized[-1].key if quantized else None


def _segments(epochs: list, bits_for) -> list[list]:
    """Split ``epochs`` into runs of constant bit assignment."""
    out = []
    for e in epochs:
        if out and bits_for(e) == bits_for(out[-1][-1]):
            out[-1].append(e)
        else:
            out.append([e])
    return out


def _run_epochs(net: BevNet, ws: Workspace, cfg: TrainConfig, epochs, phase: str,
                lr: float, mults: dict, bits_for, rng, teacher: BevNet | None = None,
                distill: DistillConfig | None = None, quantize_on: bool = True,
                curve: TrainingCurve | None = None, stop_on_plateau: bool = False) -> TrainingCurve:
    curve = curve if curve is not None else TrainingCurve()
    epochs = list(epochs)
    n = len(ws.train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    segments = _segments(epochs, bits_for) if cfg.lr_restart else [epochs]
    seg_len = {e: len(seg) * steps_per_epoch for seg in segments for e in seg}
    seg_start = {seg[0] for seg in segments}
    opt = AdamW(net.params, lr, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay, lr_mult=mults)
    step = 0
    seen = {s for s in STAGES if net.schemes[s].w_bits < FULL}
    best, stale = math.inf, 0
    for epoch in epochs:
        bits = bits_for(epoch)
        _apply_bits(net, bits)
        if epoch in seg_start:
            step, total = 0, seg_len[epoch]
        for s in STAGES:
            if bits[s][0] < FULL and s not in seen:
                seen.add(s)
                curve.events.append((epoch, s))
        order = rng.permutation(n)
        task_sum = vgd_sum = total_sum = 0.0
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            images, truth = ws.train.batch(idx)
            tap = net.forward(images, ws.mask, quantize_on=quantize_on, observe=quantize_on)
            task = T.bce_with_logits(tap.predictions, truth)
            loss = task
            if teacher is not None:
                with T.no_grad():
                    tap_t = teacher.forward(images, ws.mask, quantize_on=False)
                vgd = distill_losses(tap_t, tap, ws.mask.flat, distill).vgd
                loss = task + vgd * distill.vgd_weight
                vgd_sum += vgd.item()
            if not np.isfinite(loss.item()):
                raise TrainingAbort(phase, epoch, _latest_stage(bits))
            opt.zero_grad()
            loss.backward()
            opt.step(warmup_cosine(step, total, cfg.warmup_steps, lr))
            step += 1
            task_sum += task.item()
            total_sum += loss.item()
        ev = evaluate_loss(net, ws, quantize_on=quantize_on)
        if not np.isfinite(ev):
            raise TrainingAbort(phase, epoch, _latest_stage(bits))
        curve.append(EpochRecord(
            epoch, phase, bits, task_sum / steps_per_epoch, ev,
            vgd_sum / steps_per_epoch if teacher is not None else None,
            total_sum / steps_per_epoch))
        if stop_on_plateau:
            cur = task_sum / steps_per_epoch
            if cur < best * (1.0 - cfg.plateau_tol):
                best, stale = cur, 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience:
                    break
    return curve


def train_teacher(ws: Workspace, cfg: TrainConfig, widths: dict | None = None) -> tuple[BevNet, TrainingCurve]:
    """Full-precision pretraining on the synthetic occupancy task."""
    net = BevNet(ws.rig, ws.grid, seed=derive_seed(cfg.seed, "init"), **(widths or {}))
    rng = seeded_rng(derive_seed(cfg.seed, "teacher"))
    full = {s: (FULL, FULL) for s in STAGES}
    curve = _run_epochs(net, ws, cfg, range(1, cfg.teacher_epochs + 1), "teacher",
                        cfg.teacher_lr, {}, lambda e: full, rng, quantize_on=False,
                        stop_on_plateau=True)
    return net, curve


def run_phase1(teacher: BevNet, ws: Workspace, sched: StageSchedule,
               cfg: TrainConfig) -> tuple[BevNet, TrainingCurve]:
    """Progressive (or one-shot) QAT starting from the teacher's weights."""
    student = teacher.clone()
    student.set_all_bits(FULL, FULL)
    student.act_ranges = {s: type(r)() for s, r in student.act_ranges.items()}
    rng = seeded_rng(derive_seed(cfg.seed, "qat"))
    curve = _run_epochs(student, ws, cfg, sched.phase1_epochs, "phase1", cfg.phase1_lr,
                        backbone_multipliers(student, cfg.phase1_backbone_mult),
                        lambda e: bit_schedule(e, sched), rng)
    return student, curve


def _phase2_epochs(sched: StageSchedule) -> range:
    return range(sched.n4 + 1, sched.n4 + sched.p2 + 1)


def run_phase2(student: BevNet, teacher: BevNet, ws: Workspace, sched: StageSchedule,
               cfg: TrainConfig, distill: DistillConfig = DistillConfig()) -> tuple[BevNet, TrainingCurve]:
    """Minimise task loss + vgd_weight * L_vgd with the teacher frozen.

    With ``vgd_weight == 0`` the teacher is never consulted, so the run is
    exactly the task-only continuation.
    """
    net = student.clone()
    rng = seeded_rng(derive_seed(cfg.seed, "phase2"))
    curve = _run_epochs(net, ws, cfg, _phase2_epochs(sched), "phase2", cfg.phase2_lr,
                        backbone_multipliers(net, cfg.phase2_backbone_mult),
                        lambda e: bit_schedule(e, sched), rng,
                        teacher=teacher if distill.vgd_weight > 0 else None, distill=distill)
    return net, curve


def run_qat_continuation(student: BevNet, ws: Workspace, sched: StageSchedule,
                         cfg: TrainConfig) -> tuple[BevNet, TrainingCurve]:
    """Phase-2-length QAT with the task loss only (the no-distillation control)."""
    net = student.clone()
    rng = seeded_rng(derive_seed(cfg.seed, "phase2"))
    curve = _run_epochs(net, ws, cfg, _phase2_epochs(sched), "phase2", cfg.phase2_lr,
                        backbone_multipliers(net, cfg.phase2_backbone_mult),
                        lambda e: bit_schedule(e, sched), rng)
    return net, curve
