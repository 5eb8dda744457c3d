"""Composite network blocks: batch norm, recurrent conv units, the
additive attention gate, and weight initialization."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import (Tensor, ConvSpec, ShapeError, add, mul, relu, sigmoid,
                     tanh, conv2d)

__all__ = [
    "he_init", "unit_gain_init", "BatchNorm", "batch_norm",
    "RecurrentConvUnit", "recurrent_conv_forward", "recurrent_residual_forward",
    "AttentionGate", "attention_gate",
]


def he_init(shape, fan_in, rng):
    """Gaussian draws with standard deviation 2/sqrt(fan_in)."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return rng.normal(0.0, 2.0 / np.sqrt(fan_in), size=shape)


def unit_gain_init(shape, fan_in, rng):
    """Gaussian draws with standard deviation 1/sqrt(fan_in).

    Used for convolutions that are not followed by batch norm (residual
    projections, upsampling kernels, attention 1x1s, the output head):
    a unit-gain scale keeps feature variance from compounding through the
    skip paths, which would otherwise saturate the output sigmoid at
    initialization.
    """
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


def _param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def _bias_view(b: Tensor) -> Tensor:
    # per-channel bias broadcast over (n, c, h, w)
    v = Tensor(b.data.reshape(1, -1, 1, 1), _prev=(b,))
    v._backward = lambda g: b.accumulate_grad(g.sum(axis=(0, 2, 3)))
    return v


class BatchNorm:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes over (n, h, w) per channel and updates the
    running mean/variance; eval mode normalizes with the running stats.
    Scale and shift are shared across `sites`, but each site (e.g. one
    recurrent timestep) keeps its own running statistics: the timestep
    distributions differ enough that one merged track would make eval
    mode diverge from train mode.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float64,
                 sites=1):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros((sites, channels), dtype=dtype)
        self.running_var = np.ones((sites, channels), dtype=dtype)

    def parameters(self):
        return OrderedDict(gamma=self.gamma, beta=self.beta)


def batch_norm(x: Tensor, bn: BatchNorm, mode: str = "train", site: int = 0) -> Tensor:
    n, c, h, w = x.data.shape
    if c != bn.gamma.data.size:
        raise ShapeError(f"batch_norm: {c} channels vs {bn.gamma.data.size} params")
    gamma, beta = bn.gamma, bn.beta
    if mode == "eval":
        inv = 1.0 / np.sqrt(bn.running_var[site] + bn.eps)
        xhat = (x.data - bn.running_mean[site][None, :, None, None]) * inv[None, :, None, None]
        out = Tensor(xhat * gamma.data[None, :, None, None]
                     + beta.data[None, :, None, None], _prev=(x, gamma, beta))

        def _bw_eval(g):
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            x.accumulate_grad(g * (gamma.data * inv)[None, :, None, None])
        out._backward = _bw_eval
        return out

    if n * h * w < 2:
        raise ShapeError("batch_norm train mode needs at least 2 values per channel")
    m = n * h * w
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = Tensor(xhat * gamma.data[None, :, None, None]
                 + beta.data[None, :, None, None], _prev=(x, gamma, beta))
    mom = bn.momentum
    bn.running_mean[site] = mom * bn.running_mean[site] + (1 - mom) * mean
    bn.running_var[site] = mom * bn.running_var[site] + (1 - mom) * var

    def _bw(g):
        gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        dxhat = g * gamma.data[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        dx = inv[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
        x.accumulate_grad(dx)
    out._backward = _bw
    return out


class RecurrentConvUnit:
    """Conv block unrolled over T timesteps with a recurrent kernel feeding
    its own output back in."""

    def __init__(self, in_ch, out_ch, kernel_size=3, timesteps=2,
                 rng=None, dtype=np.float64):
        if timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        rng = rng or np.random.default_rng(0)
        k = kernel_size
        self.theta_g = _param(he_init((out_ch, in_ch, k, k), in_ch * k * k, rng), dtype)
        self.theta_r = _param(he_init((out_ch, out_ch, k, k), out_ch * k * k, rng), dtype)
        self.bias = _param(np.zeros(out_ch), dtype)
        self.timesteps = timesteps
        self.bn = BatchNorm(out_ch, dtype=dtype, sites=timesteps)
        self.in_ch = in_ch
        self.out_ch = out_ch

    def parameters(self):
        p = OrderedDict(theta_g=self.theta_g, theta_r=self.theta_r, bias=self.bias)
        for name, t in self.bn.parameters().items():
            p[f"bn.{name}"] = t
        return p


def recurrent_conv_forward(x: Tensor, u: RecurrentConvUnit, mode="train") -> Tensor:
    ff = add(conv2d(x, ConvSpec(u.theta_g, padding="same")), _bias_view(u.bias))
    p = batch_norm(relu(ff), u.bn, mode, site=0)
    # T counts total evaluations: T=1 is the plain feedforward block,
    # each further step feeds p back through the recurrent kernel.
    for t in range(1, u.timesteps):
        z = add(ff, conv2d(p, ConvSpec(u.theta_r, padding="same")))
        p = batch_norm(relu(z), u.bn, mode, site=t)
    return p


def recurrent_residual_forward(x: Tensor, u: RecurrentConvUnit,
                               proj: ConvSpec | None = None, mode="train") -> Tensor:
    if x.channels != u.out_ch and proj is None:
        raise ShapeError(
            f"recurrent_residual_forward: {x.channels} -> {u.out_ch} channels "
            "requires a 1x1 projection")
    skip = conv2d(x, proj) if proj is not None else x
    return add(skip, recurrent_conv_forward(x, u, mode))


class AttentionGate:
    """Additive attention over an encoder skip, gated by the decoder state.

    q = psi * tanh(U*s + W*h + b_g) + b_psi, alpha = sigmoid(q); the single
    alpha map is broadcast across the encoder channels.
    """

    def __init__(self, enc_ch, dec_ch, inter_ch=None, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        d = inter_ch if inter_ch is not None else max(enc_ch // 2, 1)
        self.w_att = _param(unit_gain_init((d, enc_ch, 1, 1), enc_ch, rng), dtype)
        self.u_att = _param(unit_gain_init((d, dec_ch, 1, 1), dec_ch, rng), dtype)
        self.psi = _param(unit_gain_init((1, d, 1, 1), d, rng), dtype)
        self.b_g = _param(np.zeros(d), dtype)
        self.b_psi = _param(np.zeros(1), dtype)
        self.inter_ch = d

    def parameters(self):
        return OrderedDict(w_att=self.w_att, u_att=self.u_att, psi=self.psi,
                           b_g=self.b_g, b_psi=self.b_psi)


def attention_gate(h: Tensor, s: Tensor, p: AttentionGate):
    """Returns (gated encoder features, attention coefficients)."""
    if h.data.shape[2:] != s.data.shape[2:]:
        raise ShapeError(
            f"attention_gate: spatial mismatch {h.data.shape[2:]} vs {s.data.shape[2:]}")
    pre = add(add(conv2d(s, ConvSpec(p.u_att)), conv2d(h, ConvSpec(p.w_att))),
              _bias_view(p.b_g))
    q = add(conv2d(tanh(pre), ConvSpec(p.psi)), _bias_view(p.b_psi))
    alpha = sigmoid(q)
    return mul(h, alpha), alpha
