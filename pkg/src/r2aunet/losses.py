"""Class-imbalance loss family: weighted BCE, two-class soft Dice,
Tversky, focal Tversky, and the analytic Tversky gradient.

All differentiable losses take a prediction Tensor (probabilities from the
network's sigmoid head) and a binary numpy target, and return a scalar
Tensor.  `tversky_grad` is an independent closed-form gradient used to
cross-check the tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, clip, mul, neg, sub, tlog, tmean, tpow, tsum

__all__ = [
    "LossConfig", "make_loss",
    "wbce", "bce", "dice_loss2", "bce_dice", "dice_coefficient",
    "tversky_index", "tversky_loss", "tversky_grad", "focal_tversky",
]

LOSS_KINDS = ("wbce", "dice", "bce_dice", "tversky", "focal_tversky")


@dataclass
class LossConfig:
    kind: str = "focal_tversky"
    wbce_weight: float = 0.5
    alpha: float = 0.3
    beta: float = 0.7
    gamma: float = 0.75
    eps: float = 1e-6
    prob_clip: float = 1e-7

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind in ("tversky", "focal_tversky"):
            if abs(self.alpha + self.beta - 1.0) > 1e-9:
                raise ValueError(
                    f"tversky losses require alpha + beta == 1, "
                    f"got {self.alpha} + {self.beta}")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if not 0 < self.wbce_weight < 1:
            raise ValueError("wbce_weight must be in (0, 1)")
        if self.eps <= 0 or self.prob_clip <= 0:
            raise ValueError("eps and prob_clip must be > 0")


def _check_binary(g):
    g = np.asarray(g)
    if not np.isin(g, (0, 1)).all():
        raise ValueError("target must be binary {0,1}")
    return g.astype(float)


def _const(x, like: Tensor):
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def wbce(pred: Tensor, target, weight: float, prob_clip: float = 1e-7) -> Tensor:
    """Mean of -[w*y*log(p) + (1-w)*(1-y)*log(1-p)]."""
    y = _check_binary(target)
    p = clip(pred, prob_clip, 1.0 - prob_clip)
    pos = mul(_const(weight * y, pred), tlog(p))
    one = _const(np.ones_like(y), pred)
    negt = mul(_const((1.0 - weight) * (1.0 - y), pred), tlog(sub(one, p)))
    return neg(tmean(add(pos, negt)))


def bce(pred: Tensor, target, prob_clip: float = 1e-7) -> Tensor:
    """Plain binary cross entropy (twice the weight-0.5 WBCE)."""
    return mul(wbce(pred, target, 0.5, prob_clip), _const(2.0, pred))


def dice_loss2(pred: Tensor, target, eps: float = 1e-6) -> Tensor:
    """Two-class soft Dice loss: 2 minus the sum of both class scores."""
    g = _check_binary(target)
    if pred.data.shape != g.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {g.shape}")
    gt = _const(g, pred)
    one = _const(np.ones_like(g), pred)
    fg_num = add(mul(_const(2.0, pred), tsum(mul(pred, gt))), _const(eps, pred))
    fg_den = add(add(tsum(pred), _const(g.sum(), pred)), _const(eps, pred))
    bg_num = add(mul(_const(2.0, pred), tsum(mul(sub(one, pred), sub(one, gt)))),
                 _const(eps, pred))
    bg_den = add(tsum(sub(sub(_const(2.0 * np.ones_like(g), pred), pred), gt)),
                 _const(eps, pred))
    score = add(mul(fg_num, tpow(fg_den, -1.0)), mul(bg_num, tpow(bg_den, -1.0)))
    return sub(_const(2.0, pred), score)


def bce_dice(pred: Tensor, target, eps: float = 1e-6, prob_clip: float = 1e-7) -> Tensor:
    return add(bce(pred, target, prob_clip), dice_loss2(pred, target, eps))


def dice_coefficient(pred_binary, target_binary) -> float:
    """2TP/(2TP+FP+FN) on binary masks; 1 when both masks are empty."""
    p = _check_binary(pred_binary)
    g = _check_binary(target_binary)
    tp = float((p * g).sum())
    fp = float((p * (1 - g)).sum())
    fn = float(((1 - p) * g).sum())
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def tversky_index(pred: Tensor, target, alpha: float, beta: float,
                  eps: float = 1e-6) -> Tensor:
    """TI = sum(p0*g0) / (sum(p0*g0) + alpha*sum(p0*g1) + beta*sum(p1*g0) + eps)."""
    g0 = _check_binary(target)
    if pred.data.shape != g0.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {g0.shape}")
    g1 = 1.0 - g0
    one = _const(np.ones_like(g0), pred)
    inter = tsum(mul(pred, _const(g0, pred)))
    fp = tsum(mul(pred, _const(g1, pred)))
    fn = tsum(mul(sub(one, pred), _const(g0, pred)))
    den = add(add(inter, add(mul(_const(alpha, pred), fp),
                             mul(_const(beta, pred), fn))), _const(eps, pred))
    return mul(inter, tpow(den, -1.0))


def tversky_loss(pred: Tensor, target, alpha: float, beta: float,
                 eps: float = 1e-6) -> Tensor:
    ti = tversky_index(pred, target, alpha, beta, eps)
    return sub(_const(1.0, pred), ti)


def focal_tversky(pred: Tensor, target, alpha: float, beta: float,
                  gamma: float, eps: float = 1e-6) -> Tensor:
    """(1 - TI)^gamma, with 1-TI clamped below at 1e-7 so the gradient of
    the fractional power stays bounded at the optimum."""
    comp = tversky_loss(pred, target, alpha, beta, eps)
    return tpow(clip(comp, 1e-7, float("inf")), gamma)


def tversky_grad(p0, g0, alpha: float, beta: float):
    """Closed-form partials of the Tversky index, taken directly from its
    quotient form: returns (dTI/dp0, dTI/dp1) with p1 = 1 - p0.

    The tape gradient of tversky_index equals the first minus the second.
    """
    p0 = np.asarray(p0, dtype=float)
    g0 = _check_binary(g0)
    g1 = 1.0 - g0
    p1 = 1.0 - p0
    inter = (p0 * g0).sum()
    den = inter + alpha * (p0 * g1).sum() + beta * (p1 * g0).sum()
    d_p0 = (g0 * den - (g0 + alpha * g1) * inter) / den ** 2
    d_p1 = -beta * g0 * inter / den ** 2
    return d_p0, d_p1


def make_loss(cfg: LossConfig):
    """Bind a LossConfig into a (pred, target) -> scalar Tensor callable."""
    if cfg.kind == "wbce":
        return lambda p, t: wbce(p, t, cfg.wbce_weight, cfg.prob_clip)
    if cfg.kind == "dice":
        return lambda p, t: dice_loss2(p, t, cfg.eps)
    if cfg.kind == "bce_dice":
        return lambda p, t: bce_dice(p, t, cfg.eps, cfg.prob_clip)
    if cfg.kind == "tversky":
        return lambda p, t: tversky_loss(p, t, cfg.alpha, cfg.beta, cfg.eps)
    return lambda p, t: focal_tversky(p, t, cfg.alpha, cfg.beta, cfg.gamma, cfg.eps)
