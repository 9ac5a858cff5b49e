"""BOPS and model-size accounting, task evaluation and the PTQ sweep."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .bevnet import STAGES, BevNet, StageId
from .geometry import BevMask
from .quant import FULL, QuantScheme, RangeState


@dataclass
class EfficiencyReport:
    macs: dict  # layer -> MACs for one multi-camera inference
    bits: dict  # layer -> (w_bits, a_bits)
    bops: int
    model_size_bytes: float

    @property
    def bops_tera(self) -> float:
        return self.bops / 1e12

    @property
    def model_size_mb(self) -> float:
        return self.model_size_bytes / 1e6


def layer_macs(net: BevNet) -> dict[str, int]:
    """Multiply-accumulates of each conv/linear layer for a batch of one."""
    n = len(net.rig)
    h, w = net.image_hw
    spatial = {"backbone.conv1": h * w, "backbone.conv2": (h // 2) * (w // 2),
               "neck.proj": net.feature_hw[0] * net.feature_hw[1]}
    out = {}
    for name, (_, shape, kind) in net.layers.items():
        per_out = int(np.prod(shape))  # Cout * Cin * k * k, or out * in
        if kind == "conv":
            out[name] = n * spatial[name] * per_out
        else:
            out[name] = net.grid.n_cells * per_out
    return out


def _schemes(net: BevNet, schemes) -> dict[StageId, QuantScheme]:
    if schemes is None:
        return dict(net.schemes)
    if isinstance(schemes, QuantScheme):
        return {s: schemes for s in STAGES}
    return {s: schemes.get(s, net.schemes[s]) for s in STAGES}


def bops(net: BevNet, schemes=None) -> EfficiencyReport:
    """BOPS = sum over layers of b_w * b_a * MAC, bits taken from each layer's stage."""
    sch = _schemes(net, schemes)
    macs = layer_macs(net)
    bits = {name: (sch[stage].w_bits, sch[stage].a_bits)
            for name, (stage, _, _) in net.layers.items()}
    total = sum(bits[n][0] * bits[n][1] * m for n, m in macs.items())
    size = model_size(net, {s: sc.w_bits for s, sc in sch.items()})
    return EfficiencyReport(macs, bits, int(total), size)


def model_size(net: BevNet, w_bits) -> float:
    """Bytes to store every parameter at ``w_bits`` (int, or per-stage dict)."""
    if isinstance(w_bits, dict):
        per_stage = w_bits
    else:
        per_stage = {s: w_bits for s in STAGES}
    for b in per_stage.values():
        if not 2 <= b <= FULL:
            raise ValueError(f"w_bits must be in [2, {FULL}], got {b}")
    return sum(net.num_parameters(s) * per_stage[s] for s in STAGES) / 8.0


# ------------------------------------------------------------------ eval


@dataclass(frozen=True)
class TaskMetrics:
    bce: float
    accuracy: float
    iou: float


def task_metrics(logits, truth) -> TaskMetrics:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    with T.no_grad():
        bce = T.bce_with_logits(T.Tensor(z), y).item()
    pred = z > 0
    occ = y > 0.5
    union = (pred | occ).sum()
    iou = 1.0 if union == 0 else float((pred & occ).sum() / union)
    return TaskMetrics(bce, float((pred == occ).mean()), iou)


def eval_task(net: BevNet, scenes, mask: BevMask, quantize_on: bool = True) -> TaskMetrics:
    with T.no_grad():
        tap = net.forward(scenes.images, mask, quantize_on=quantize_on)
    return task_metrics(tap.predictions.data, scenes.truth)


# ------------------------------------------------------------------- PTQ


@dataclass
class SensitivityRow:
    label: str
    stages: tuple  # stage keys quantized in this row
    bce: float
    accuracy: float
    iou: float
    degradation: float  # bce minus the full-precision row's bce


@dataclass
class SensitivityTable:
    w_bits: int
    a_bits: int
    rows: list = field(default_factory=list)

    def row(self, label: str) -> SensitivityRow:
        return next(r for r in self.rows if r.label == label)

    def ordering_holds(self) -> bool:
        """Neck and decoder less sensitive than backbone and encoder; all-quantized worst."""
        d = {r.label: r.degradation for r in self.rows}
        singles = [d[s.key] for s in STAGES]
        return (max(d["neck"], d["decoder"]) < min(d["backbone"], d["encoder"])
                and d["all"] >= max(singles))

    def to_json(self) -> list[dict]:
        return [asdict(r) | {"stages": list(r.stages)} for r in self.rows]


def quantized_copy(net: BevNet, stages, w_bits: int, a_bits: int, calib_images,
                   mask: BevMask) -> BevNet:
    """PTQ: a copy with ``stages`` at WxAy and activation ranges from one calibration pass."""
    q = net.clone()
    q.set_all_bits(FULL, FULL)
    for s in stages:
        q.set_stage_bits(s, w_bits, a_bits)
    q.act_ranges = {s: RangeState() for s in STAGES}
    q.set_act_momentum(1.0)
    with T.no_grad():
        q.forward(calib_images, mask, quantize_on=True, observe=True)
    return q


def ptq_sweep(net: BevNet, eval_scenes, calib_images, mask: BevMask, w_bits: int = 4,
              a_bits: int = 6) -> SensitivityTable:
    """Rows: no quantization, each stage alone, all stages."""
    subsets = [("none", ())] + [(s.key, (s,)) for s in STAGES] + [("all", STAGES)]
    table = SensitivityTable(w_bits, a_bits)
    base = None
    for label, stages in subsets:
        q = quantized_copy(net, stages, w_bits, a_bits, calib_images, mask)
        m = eval_task(q, eval_scenes, mask)
        base = m.bce if base is None else base
        table.rows.append(SensitivityRow(label, tuple(s.key for s in stages), m.bce,
                                         m.accuracy, m.iou, m.bce - base))
    return table
