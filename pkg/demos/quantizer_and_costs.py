"""Fake quantization on a few values, the straight-through gradient, and the cost table of the default net.

Run: python demos/quantizer_and_costs.py
"""
import numpy as np

from qdbev import tensor as T
from qdbev.bevnet import STAGES, BevNet
from qdbev.geometry import BevGrid, default_rig
from qdbev.metrics import bops, layer_macs, model_size
from qdbev.quant import QuantScheme, RangeState, compute_scale, fake_quantize

x = np.array([-1.0, -0.55, -0.1, 0.0, 0.2, 0.5, 0.9])
state = RangeState(np.array(1.0))
for k in (2, 4, 8):
    q = fake_quantize(T.Tensor(x), k, state).data
    print(f"k={k}  S={compute_scale(1.0, k):.4f}  q={np.round(q, 4)}")

# the backward pass ignores the rounding
leaf = T.Tensor(x, requires_grad=True)
(fake_quantize(leaf, 4, state) * T.Tensor(np.arange(7.0))).sum().backward()
print("STE gradient:", leaf.grad)

net = BevNet(default_rig(), BevGrid())
print("\nlayer MACs per 6-camera inference")
for name, m in layer_macs(net).items():
    print(f"  {name:16s} {m:>8d}")
for label, scheme in (("FP", QuantScheme(32, 32)), ("W4A6", QuantScheme(4, 6))):
    rep = bops(net, {s: scheme for s in STAGES})
    print(f"{label:5s} BOPS {rep.bops:>12d}  size {rep.model_size_bytes:7.1f} B")
print("size ratio W32/W4:", model_size(net, 32) / model_size(net, 4))
