"""Symmetric linear fake quantization with a straight-through gradient.

Weights are quantized per output channel (axis 0) from their live values;
activations per layer from a running max tracked by :func:`observe_range`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

FULL = 32
SCALE_EPS = float(np.finfo(np.float64).eps)


def _check_bits(bits: int, name: str = "bits") -> int:
    if isinstance(bits, bool) or int(bits) != bits or not 2 <= bits <= FULL:
        raise ValueError(f"{name} must be an integer in [2, {FULL}], got {bits!r}")
    return int(bits)


@dataclass(frozen=True)
class QuantScheme:
    """Bit-widths for one stage; 32 (FULL) means pass-through."""

    w_bits: int = FULL
    a_bits: int = FULL
    act_momentum: float = 0.1

    def __post_init__(self):
        _check_bits(self.w_bits, "w_bits")
        _check_bits(self.a_bits, "a_bits")
        if not 0.0 < self.act_momentum <= 1.0:
            raise ValueError(f"act_momentum must be in (0, 1], got {self.act_momentum}")

    @property
    def label(self) -> str:
        return f"W{self.w_bits}A{self.a_bits}"


@dataclass
class RangeState:
    """Largest absolute value seen at a site (scalar or per channel)."""

    r_max: np.ndarray = field(default_factory=lambda: np.zeros(()))
    observed_steps: int = 0

    def copy(self) -> "RangeState":
        return RangeState(np.array(self.r_max, dtype=np.float64), self.observed_steps)


def compute_scale(r_max, k: int):
    """S = 2|r_max| / (2^k - 1); a zero range gets a tiny positive scale."""
    if isinstance(k, bool) or int(k) != k or k < 2:
        raise ValueError(f"bit-width must be an integer >= 2, got {k!r}")
    r = np.abs(np.asarray(r_max, dtype=np.float64))
    s = 2.0 * r / (2.0 ** int(k) - 1.0)
    s = np.where(r > 0, s, SCALE_EPS)
    return float(s) if s.ndim == 0 else s


def round_half_away(v: np.ndarray) -> np.ndarray:
    whole = np.trunc(v)
    # the trailing + 0.0 maps -0.0 to +0.0 so requantizing is bit-exact
    return whole + np.sign(v) * (np.abs(v - whole) >= 0.5) + 0.0


def quantize_values(x: np.ndarray, bits: int, r_max) -> np.ndarray:
    """Dequantized lattice values round(x/S)*S with q clamped to k signed bits."""
    if bits >= FULL:
        return np.array(x, dtype=np.float64)
    scale = compute_scale(r_max, bits)
    if np.ndim(scale):
        scale = np.reshape(scale, (-1,) + (1,) * (np.ndim(x) - 1))
    qmax = 2.0 ** (bits - 1) - 1.0
    q = np.clip(round_half_away(x / scale), -qmax, qmax)
    return q * scale


def fake_quantize(x: Tensor, bits: int, state: RangeState | None = None) -> Tensor:
    """Forward: lattice rounding. Backward: identity (straight-through).

    Without ``state`` the range is taken per channel from ``x`` itself.
    """
    if bits >= FULL:
        return x
    r_max = channel_absmax(x.data) if state is None else state.r_max
    out = quantize_values(x.data, bits, r_max)
    return Tensor._make(out, (x,), ste_backward)


def ste_backward(upstream: np.ndarray) -> tuple[np.ndarray]:
    return (upstream,)


def channel_absmax(w: np.ndarray) -> np.ndarray:
    """Per-output-channel max |w| (axis 0)."""
    w = np.asarray(w)
    if w.ndim == 0:
        return np.abs(w)
    return np.abs(w.reshape(w.shape[0], -1)).max(axis=1)


def observe_range(x, state: RangeState, momentum: float, per_channel: bool = False) -> RangeState:
    """Update ``state`` in place and return it.

    Per-channel (weight) ranges are recomputed from ``x``. Per-layer
    (activation) ranges follow an exponential moving max, seeded by the first
    observation.
    """
    if not 0.0 < momentum <= 1.0:
        raise ValueError(f"momentum must be in (0, 1], got {momentum}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if per_channel:
        state.r_max = channel_absmax(data)
    else:
        cur = np.abs(data).max() if data.size else 0.0
        if state.observed_steps == 0:
            state.r_max = np.asarray(cur, dtype=np.float64)
        else:
            state.r_max = np.asarray(momentum * cur + (1.0 - momentum) * state.r_max)
    state.observed_steps += 1
    return state
