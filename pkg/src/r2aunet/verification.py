"""Finite-difference verification suite covering every differentiable
block and loss.  Used by both the CLI gradcheck command and the test
suite, always in float64."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .blocks import (AttentionGate, BatchNorm, RecurrentConvUnit,
                     attention_gate, batch_norm, recurrent_conv_forward,
                     recurrent_residual_forward)
from .model import ModelConfig, build
from .tensor import (ConvSpec, Tensor, conv2d, conv2d_transpose, grad_check,
                     maxpool2d, mul, relu, sigmoid, tanh, tsum)

__all__ = ["GradCheckResult", "run_gradcheck_suite", "DEFAULT_TOL", "MODEL_TOL"]

DEFAULT_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def _rand(rng, shape):
    return Tensor(rng.uniform(-2.0, 2.0, shape))


def _distinct(rng, shape):
    # well-separated values so maxpool argmax is stable under the FD step
    n = int(np.prod(shape))
    return Tensor(rng.permutation(np.linspace(-2.0, 2.0, n)).reshape(shape))


def _probs(rng, shape):
    return Tensor(rng.uniform(0.05, 0.95, shape))


def _kernel(rng, shape):
    return Tensor(rng.normal(0, 0.5, shape), requires_grad=True)


def run_gradcheck_suite(seed=0, depth=2, size=16, include_model=True):
    """One pass of every check for one seed; returns GradCheckResult list."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, f, x, tol=DEFAULT_TOL):
        results.append(GradCheckResult(name, grad_check(f, x), tol))

    k3 = _kernel(rng, (3, 2, 3, 3))
    check("conv2d_same", lambda x: tsum(conv2d(x, ConvSpec(k3, padding="same"))),
          _rand(rng, (1, 2, 6, 6)))
    check("conv2d_valid_stride2",
          lambda x: tsum(conv2d(x, ConvSpec(k3, stride=2, padding="valid"))),
          _rand(rng, (1, 2, 7, 7)))
    kt = _kernel(rng, (2, 3, 2, 2))
    check("conv2d_transpose",
          lambda x: tsum(conv2d_transpose(x, ConvSpec(kt, stride=2))),
          _rand(rng, (1, 3, 5, 5)))
    check("maxpool2d", lambda x: tsum(maxpool2d(x)), _distinct(rng, (1, 2, 4, 4)))
    check("relu", lambda x: tsum(relu(x)), _distinct(rng, (1, 1, 4, 4)))
    check("sigmoid", lambda x: tsum(sigmoid(x)), _rand(rng, (1, 1, 4, 4)))
    check("tanh", lambda x: tsum(tanh(x)), _rand(rng, (1, 1, 4, 4)))

    bn = BatchNorm(2)
    bn.gamma.data = rng.uniform(0.5, 1.5, 2)
    bn.beta.data = rng.uniform(-0.5, 0.5, 2)
    # probe through fixed random weights: the plain sum of a normalized
    # output is constant in x, which would make the check vacuous
    w_bn = Tensor(rng.normal(0, 1, (2, 2, 4, 4)))
    check("batch_norm_train",
          lambda x: tsum(mul(batch_norm(x, bn, "train"), w_bn)),
          _rand(rng, (2, 2, 4, 4)))

    unit = RecurrentConvUnit(2, 3, timesteps=2, rng=rng)
    w_rc = Tensor(rng.normal(0, 1, (1, 3, 4, 4)))
    check("recurrent_conv_T2",
          lambda x: tsum(mul(recurrent_conv_forward(x, unit, "train"), w_rc)),
          _rand(rng, (1, 2, 4, 4)))
    proj = ConvSpec(_kernel(rng, (3, 2, 1, 1)))
    check("recurrent_residual",
          lambda x: tsum(recurrent_residual_forward(x, unit, proj, "train")),
          _rand(rng, (1, 2, 4, 4)))

    gate = AttentionGate(2, 3, rng=rng)
    s = _rand(rng, (1, 3, 4, 4))
    check("attention_gate",
          lambda h: tsum(attention_gate(h, s, gate)[0]),
          _rand(rng, (1, 2, 4, 4)))

    g = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    check("wbce", lambda p: losses.wbce(p, g, 0.7), _probs(rng, (1, 1, 4, 4)),
          tol=1e-6)
    check("dice_loss2", lambda p: losses.dice_loss2(p, g),
          _probs(rng, (1, 1, 4, 4)), tol=1e-6)
    check("tversky_loss", lambda p: losses.tversky_loss(p, g, 0.3, 0.7),
          _probs(rng, (1, 1, 4, 4)), tol=1e-6)
    check("focal_tversky", lambda p: losses.focal_tversky(p, g, 0.3, 0.7, 0.75),
          _probs(rng, (1, 1, 4, 4)), tol=1e-6)
    check("bce_dice", lambda p: losses.bce_dice(p, g),
          _probs(rng, (1, 1, 4, 4)), tol=1e-6)

    if include_model:
        cfg = ModelConfig(depth=depth, base_channels=2, timesteps=2)
        model = build(cfg, seed=seed)
        check(f"model_end_to_end_d{depth}_{size}px",
              lambda x: tsum(model.forward(x, "train")),
              _rand(rng, (1, 1, size, size)), tol=MODEL_TOL)
    return results
