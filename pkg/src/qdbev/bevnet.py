"""Toy multi-camera BEV detector: backbone, neck, encoder, decoder.

Backbone and neck are shared across cameras. The encoder gathers neck
features at the pixels where each BEV pillar projects, averages them over
visible (camera, height) samples and mixes channels linearly. The decoder is
a per-cell two-layer perceptron producing an occupancy logit.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import BevGrid, BevMask, Camera
from .quant import FULL, QuantScheme, RangeState, fake_quantize, observe_range
from .tensor import ShapeError, Tensor, seeded_rng

FEATURE_STRIDE = 4  # two 2x2 pools in the backbone


class StageId(enum.IntEnum):
    BACKBONE = 0
    NECK = 1
    ENCODER = 2
    DECODER = 3

    @property
    def key(self) -> str:
        return self.name.lower()


STAGES = tuple(StageId)


@dataclass
class FeatureTap:
    img_features: Tensor  # [N, B, C, h, w]
    bev_features: Tensor  # [B, C_bev, H_bev, W_bev]
    predictions: Tensor  # [B, H_bev * W_bev] logits


def _layer_specs(channels: int, bev_channels: int, hidden: int) -> dict:
    """name -> (stage, weight shape, kind)."""
    c, cb = channels, bev_channels
    return {
        "backbone.conv1": (StageId.BACKBONE, (c, 1, 3, 3), "conv"),
        "backbone.conv2": (StageId.BACKBONE, (c, c, 3, 3), "conv"),
        "neck.proj": (StageId.NECK, (c, c, 1, 1), "conv"),
        "encoder.mix": (StageId.ENCODER, (cb, c), "linear"),
        "decoder.fc1": (StageId.DECODER, (hidden, cb), "linear"),
        "decoder.fc2": (StageId.DECODER, (1, hidden), "linear"),
    }


def sampling_matrix(mask: BevMask, feat_hw: tuple, image_hw: tuple) -> np.ndarray:
    """[P, N*h*w] weights of the encoder's masked average.

    Camera ``n`` contributes to cell ``p`` with weight ``flat[n, p]`` times the
    mean of its visible samples, normalised across cameras. Cells seen by no
    camera get an all-zero row.
    """
    cached = getattr(mask, "_sampling", None)
    if cached is not None and cached[0] == (feat_hw, image_hw):
        return cached[1]
    n_cam, n_cells, n_z, _ = mask.pixels.shape
    h, w = feat_hw
    ih, iw = image_hw
    vis = mask.raw[:, 0] > 0  # [N, P, Z]
    uv = mask.pixels
    col = np.clip((uv[..., 0] * w / iw).astype(int), 0, w - 1)
    row = np.clip((uv[..., 1] * h / ih).astype(int), 0, h - 1)
    flat_idx = (np.arange(n_cam)[:, None, None] * h * w + row * w + col)
    total = mask.flat.sum(axis=0)  # [P]
    A = np.zeros((n_cells, n_cam * h * w))
    n_idx, p_idx, z_idx = np.nonzero(vis)
    weights = 1.0 / (n_z * total[p_idx])
    np.add.at(A, (p_idx, flat_idx[n_idx, p_idx, z_idx]), weights)
    mask._sampling = ((feat_hw, image_hw), A)
    return A


class BevNet:
    """Parameters, per-stage quantization schemes and activation ranges."""

    def __init__(self, rig: list[Camera], grid: BevGrid, channels: int = 8,
                 bev_channels: int = 8, hidden: int = 16, seed: int = 0):
        self.rig = list(rig)
        self.grid = grid
        self.channels = channels
        self.bev_channels = bev_channels
        self.hidden = hidden
        self.layers = _layer_specs(channels, bev_channels, hidden)
        rng = seeded_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, (_, shape, _) in self.layers.items():
            fan_in = int(np.prod(shape[1:]))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            self.params[f"{name}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True)
        self.schemes = {s: QuantScheme() for s in STAGES}
        self.act_ranges = {s: RangeState() for s in STAGES}

    # ---------------------------------------------------------- structure

    @property
    def image_hw(self) -> tuple:
        return self.rig[0].height, self.rig[0].width

    @property
    def feature_hw(self) -> tuple:
        h, w = self.image_hw
        return h // FEATURE_STRIDE, w // FEATURE_STRIDE

    def stage_of(self, param_name: str) -> StageId:
        return self.layers[param_name.rsplit(".", 1)[0]][0]

    def stage_partition(self) -> dict[StageId, list[str]]:
        parts = {s: [] for s in STAGES}
        for name in self.params:
            parts[self.stage_of(name)].append(name)
        return parts

    def num_parameters(self, stage: StageId | None = None) -> int:
        return sum(p.size for n, p in self.params.items()
                   if stage is None or self.stage_of(n) == stage)

    def set_stage_bits(self, stage: StageId, w_bits: int, a_bits: int) -> "BevNet":
        old = self.schemes[stage]
        self.schemes[stage] = QuantScheme(w_bits, a_bits, old.act_momentum)
        return self

    def set_all_bits(self, w_bits: int, a_bits: int) -> "BevNet":
        for s in STAGES:
            self.set_stage_bits(s, w_bits, a_bits)
        return self

    def set_act_momentum(self, momentum: float) -> None:
        for s, sch in self.schemes.items():
            self.schemes[s] = QuantScheme(sch.w_bits, sch.a_bits, momentum)

    def clone(self) -> "BevNet":
        twin = object.__new__(BevNet)
        twin.__dict__.update(self.__dict__)
        twin.params = {n: Tensor(p.data, requires_grad=True) for n, p in self.params.items()}
        twin.schemes = dict(self.schemes)
        twin.act_ranges = {s: r.copy() for s, r in self.act_ranges.items()}
        return twin

    def config_fingerprint(self) -> dict:
        return {
            "cameras": [{"extrinsic": c.extrinsic.tolist(), "fx": c.fx, "fy": c.fy,
                         "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height}
                        for c in self.rig],
            "grid": {"h": self.grid.h, "w": self.grid.w, "cell_size": self.grid.cell_size,
                     "z_levels": list(self.grid.z_levels), "origin": list(self.grid.origin)},
            "widths": {"channels": self.channels, "bev_channels": self.bev_channels,
                       "hidden": self.hidden},
        }

    # ------------------------------------------------------------ forward

    def weight(self, layer: str, quantize_on: bool = True) -> Tensor:
        w = self.params[f"{layer}.weight"]
        bits = self.schemes[self.layers[layer][0]].w_bits
        if quantize_on and bits < FULL:
            return fake_quantize(w, bits)
        return w

    def effective_weight(self, layer: str) -> np.ndarray:
        with T.no_grad():
            return self.weight(layer).data.copy()

    def _act(self, stage: StageId, x: Tensor, quantize_on: bool, observe: bool) -> Tensor:
        scheme = self.schemes[stage]
        if not quantize_on or scheme.a_bits >= FULL:
            return x
        state = self.act_ranges[stage]
        # an unobserved site calibrates from the first batch it sees
        if observe or state.observed_steps == 0:
            observe_range(x, state, scheme.act_momentum)
        return fake_quantize(x, scheme.a_bits, state)

    def _check_inputs(self, images: Tensor, mask: BevMask) -> None:
        n = len(self.rig)
        h, w = self.image_hw
        if images.ndim != 5 or images.shape[0] != n or images.shape[2:] != (1, h, w):
            raise ShapeError(f"images {images.shape} do not match rig: expected [{n}, B, 1, {h}, {w}]")
        if mask.flat.shape != (n, self.grid.n_cells):
            raise ShapeError(f"mask {mask.flat.shape} does not match rig/grid "
                             f"({n}, {self.grid.n_cells})")

    def forward(self, images, mask: BevMask, quantize_on: bool = True,
                observe: bool = False) -> FeatureTap:
        images = images if isinstance(images, Tensor) else Tensor(images)
        self._check_inputs(images, mask)
        n, b = images.shape[:2]
        h, w = self.feature_hw
        p = self.params
        q = quantize_on

        x = images.reshape(n * b, *images.shape[2:])
        x = T.avg_pool2d(T.conv2d(x, self.weight("backbone.conv1", q), p["backbone.conv1.bias"]).relu())
        x = T.avg_pool2d(T.conv2d(x, self.weight("backbone.conv2", q), p["backbone.conv2.bias"]).relu())
        x = self._act(StageId.BACKBONE, x, q, observe)

        x = T.conv2d(x, self.weight("neck.proj", q), p["neck.proj.bias"])
        x = self._act(StageId.NECK, x, q, observe)
        f_img = x.reshape(n, b, self.channels, h, w)

        A = sampling_matrix(mask, (h, w), self.image_hw)
        gathered = f_img.transpose(1, 2, 0, 3, 4).reshape(b, self.channels, n * h * w)
        pooled = gathered @ Tensor(A.T)  # [B, C, P]
        bev = self.weight("encoder.mix", q) @ pooled + p["encoder.mix.bias"].reshape(-1, 1)
        bev = self._act(StageId.ENCODER, bev, q, observe)
        f_bev = bev.reshape(b, self.bev_channels, self.grid.h, self.grid.w)

        hid = (self.weight("decoder.fc1", q) @ bev + p["decoder.fc1.bias"].reshape(-1, 1)).relu()
        hid = self._act(StageId.DECODER, hid, q, observe)
        logits = self.weight("decoder.fc2", q) @ hid + p["decoder.fc2.bias"].reshape(-1, 1)
        return FeatureTap(f_img, f_bev, logits.reshape(b, self.grid.n_cells))

    __call__ = forward


# ------------------------------------------------------------- checkpoints


def save_checkpoint(net: BevNet, directory, extra: dict | None = None) -> Path:
    """One tensor dump per parameter plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    params = {}
    for name, t in net.params.items():
        fname = f"{name}.bin"
        T.dump_tensor(d / fname, t.data)
        params[name] = {"stage": net.stage_of(name).key, "file": fname}
    ranges = {}
    for s, r in net.act_ranges.items():
        fname = f"range.{s.key}.bin"
        T.dump_tensor(d / fname, r.r_max)
        ranges[s.key] = {"file": fname, "observed_steps": r.observed_steps}
    manifest = {
        "params": params,
        "schemes": {s.key: [sc.w_bits, sc.a_bits, sc.act_momentum] for s, sc in net.schemes.items()},
        "ranges": ranges,
        "config": net.config_fingerprint(),
        "extra": extra or {},
    }
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(d / "manifest.json")
    return d


def load_checkpoint(directory) -> tuple[BevNet, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = manifest["config"]
    rig = [Camera(np.array(c["extrinsic"]), c["fx"], c["fy"], c["cx"], c["cy"],
                  c["width"], c["height"]) for c in cfg["cameras"]]
    g = cfg["grid"]
    grid = BevGrid(g["h"], g["w"], g["cell_size"], tuple(g["z_levels"]), tuple(g["origin"]))
    net = BevNet(rig, grid, **cfg["widths"])
    for name, entry in manifest["params"].items():
        net.params[name] = Tensor(T.load_tensor(d / entry["file"]), requires_grad=True)
    for key, (wb, ab, mom) in manifest["schemes"].items():
        net.schemes[StageId[key.upper()]] = QuantScheme(wb, ab, mom)
    for key, entry in manifest["ranges"].items():
        net.act_ranges[StageId[key.upper()]] = RangeState(
            T.load_tensor(d / entry["file"]), entry["observed_steps"])
    return net, manifest
