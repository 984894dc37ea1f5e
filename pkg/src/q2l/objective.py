"""Asymmetric focal loss over per-class sigmoid probabilities."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass(frozen=True)
class LossConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 1.0
    prob_clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError(f"focusing exponents must be >= 0, got {self.gamma_pos}, {self.gamma_neg}")
        if not 0.0 < self.prob_clamp_eps <= 1e-3:
            raise ValueError(f"prob_clamp_eps must lie in (0, 1e-3], got {self.prob_clamp_eps}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_targets(p_shape, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(p_shape):
        raise ValueError(f"probabilities {tuple(p_shape)} and targets {y.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be binary (0/1)")
    return y


def asymmetric_loss(p, y, cfg: LossConfig = LossConfig()):
    """Mean over classes (and over samples for N×K input) of

    ``-[y (1-p)^γ+ log p + (1-y) p^γ- log(1-p)]`` with ``p`` clamped to
    ``[eps, 1-eps]``.  A :class:`Tensor` input yields a differentiable
    scalar tensor; array input yields a float.
    """
    if not isinstance(p, Tensor):
        p_arr = np.asarray(p, dtype=np.float64)
        y = _check_targets(p_arr.shape, y)
        return float(np.mean(_elementwise_np(p_arr, y, cfg)))
    y = _check_targets(p.shape, y).astype(p.dtype)
    eps = cfg.prob_clamp_eps
    pc = nc.clip(p, eps, 1.0 - eps)
    pos = nc.log(pc)
    if cfg.gamma_pos:
        pos = pos * nc.power(1.0 - pc, cfg.gamma_pos)
    neg = nc.log(1.0 - pc)
    if cfg.gamma_neg:
        neg = neg * nc.power(pc, cfg.gamma_neg)
    per_entry = pos * y + neg * (1.0 - y)
    return -nc.mean(per_entry)


def _elementwise_np(p: np.ndarray, y: np.ndarray, cfg: LossConfig) -> np.ndarray:
    eps = cfg.prob_clamp_eps
    pc = np.clip(p, eps, 1.0 - eps)
    pos = (1.0 - pc) ** cfg.gamma_pos * np.log(pc)
    neg = pc ** cfg.gamma_neg * np.log1p(-pc)
    return -(y * pos + (1.0 - y) * neg)


def loss_grad_wrt_p(p, y, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Closed-form gradient of :func:`asymmetric_loss` with respect to ``p``.

    Zero where the clamp is active, matching the autodiff path.
    """
    p = np.asarray(p, dtype=np.float64)
    y = _check_targets(p.shape, y)
    eps = cfg.prob_clamp_eps
    pc = np.clip(p, eps, 1.0 - eps)
    gp, gn = cfg.gamma_pos, cfg.gamma_neg
    # d/dp [(1-p)^g log p] = (1-p)^g / p - g (1-p)^(g-1) log p
    d_pos = (1.0 - pc) ** gp / pc
    if gp:
        d_pos = d_pos - gp * (1.0 - pc) ** (gp - 1.0) * np.log(pc)
    # d/dp [p^g log(1-p)] = g p^(g-1) log(1-p) - p^g / (1-p)
    d_neg = -(pc ** gn) / (1.0 - pc)
    if gn:
        d_neg = d_neg + gn * pc ** (gn - 1.0) * np.log1p(-pc)
    grad = -(y * d_pos + (1.0 - y) * d_neg) / p.size
    inside = (p >= eps) & (p <= 1.0 - eps)
    return grad * inside


def binary_cross_entropy(p, y, eps: float = 1e-7) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
