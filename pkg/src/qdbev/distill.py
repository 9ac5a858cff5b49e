"""Image, BEV and view-guided KL distillation losses.

All losses use KL(teacher || student) between temperature-softened
distributions; the teacher side is treated as a constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class DistillConfig:
    tau: float = 1.0
    vgd_weight: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.vgd_weight >= 0:
            raise ValueError(f"vgd_weight must be nonnegative, got {self.vgd_weight}")


@dataclass
class DistillLosses:
    img: Tensor  # [N]
    bev: Tensor  # [H*W]
    vgd: Tensor  # scalar


def softmax_tau(logits, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = np.asarray(logits, dtype=np.float64) / tau
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _kl_rows(teacher: np.ndarray, student: Tensor, tau: float, axis: int = -1) -> Tensor:
    """KL(softmax(t/tau) || softmax(s/tau)) reduced along ``axis``."""
    # both sides share one code path so identical inputs give exactly zero
    with T.no_grad():
        log_t = T.log_softmax(Tensor(teacher) * (1.0 / tau), axis=axis).data
    log_s = T.log_softmax(student * (1.0 / tau), axis=axis)
    return (Tensor(np.exp(log_t)) * (Tensor(log_t) - log_s)).sum(axis=axis)


def _teacher_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def image_distill_loss(f_teacher, f_student: Tensor, cfg: DistillConfig = DistillConfig()) -> Tensor:
    """Per-camera loss [N] over features shaped [N, B, C, H, W]."""
    ft = _teacher_array(f_teacher)
    f_student = f_student if isinstance(f_student, Tensor) else Tensor(f_student)
    if ft.shape != f_student.shape or ft.ndim != 5:
        raise ShapeError(f"image features: teacher {ft.shape} vs student {f_student.shape}")
    n = ft.shape[0]
    count = int(np.prod(ft.shape[1:]))  # B*C*H*W
    kl = _kl_rows(ft.reshape(n, count), f_student.reshape(n, count), cfg.tau)
    return kl * (cfg.tau**2 / count)


def bev_distill_loss(f_teacher, f_student: Tensor, cfg: DistillConfig = DistillConfig()) -> Tensor:
    """Per-cell loss [H*W] over features shaped [B, C, H, W]; softmax over C."""
    ft = _teacher_array(f_teacher)
    f_student = f_student if isinstance(f_student, Tensor) else Tensor(f_student)
    if ft.shape != f_student.shape or ft.ndim != 4:
        raise ShapeError(f"BEV features: teacher {ft.shape} vs student {f_student.shape}")
    b, c, h, w = ft.shape
    kl = _kl_rows(ft.reshape(b, c, h * w), f_student.reshape(b, c, h * w), cfg.tau, axis=1)
    return kl.sum(axis=0) * (cfg.tau**2 / (b * c))


def view_guided_loss(l_img: Tensor, l_bev: Tensor, flat_mask) -> Tensor:
    """Sum over (camera, cell) of L_img[n] * mask[n, p] * L_bev[p]."""
    l_img = l_img if isinstance(l_img, Tensor) else Tensor(l_img)
    l_bev = l_bev if isinstance(l_bev, Tensor) else Tensor(l_bev)
    m = np.asarray(flat_mask, dtype=np.float64)
    if m.shape != (l_img.size, l_bev.size):
        raise ShapeError(f"mask {m.shape} vs L_img {l_img.shape} and L_bev {l_bev.shape}")
    masked = l_img.reshape(-1, 1) * Tensor(m)  # [N, P]
    return (masked * l_bev.reshape(1, -1)).sum()


def distill_losses(tap_teacher, tap_student, flat_mask, cfg: DistillConfig = DistillConfig()) -> DistillLosses:
    l_img = image_distill_loss(tap_teacher.img_features, tap_student.img_features, cfg)
    l_bev = bev_distill_loss(tap_teacher.bev_features, tap_student.bev_features, cfg)
    return DistillLosses(l_img, l_bev, view_guided_loss(l_img, l_bev, flat_mask))
