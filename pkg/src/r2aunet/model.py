"""The recurrent residual attention U-Net: configuration, assembly,
forward pass, and the binary checkpoint format.

Encoder stages double the channel count after every 2x2 max-pool; the
decoder mirrors with stride-2 transposed convolutions and gates every
skip connection except the shallowest one (the shallow features are too
immature for attention to help, so a plain skip is used there).
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .blocks import (AttentionGate, RecurrentConvUnit, attention_gate,
                     recurrent_conv_forward, recurrent_residual_forward,
                     unit_gain_init)
from .tensor import (ConvSpec, ShapeError, Tensor, add, concat_channels,
                     conv2d, conv2d_transpose, maxpool2d, sigmoid)

__all__ = ["ModelConfig", "R2AUNet", "build", "predict_mask",
           "save_checkpoint", "load_checkpoint", "CheckpointError",
           "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION"]

CHECKPOINT_MAGIC = b"R2AU"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class ModelConfig:
    depth: int = 4
    base_channels: int = 16
    timesteps: int = 2
    use_attention: bool = True
    use_residual: bool = True
    attend_first_skip: bool = False
    in_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")

    def variant_name(self):
        parts = ["Recurrent"]
        if self.use_residual:
            parts.append("Residual")
        parts.append("UNET")
        if self.use_attention:
            parts.append("+ Attention")
        return " ".join(parts)


def _param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class _Stage:
    """One recurrent (residual) unit plus its optional 1x1 skip projection."""

    def __init__(self, in_ch, out_ch, cfg: ModelConfig, rng, dtype):
        self.unit = RecurrentConvUnit(in_ch, out_ch, cfg.kernel_size,
                                      cfg.timesteps, rng, dtype)
        self.proj = None
        if cfg.use_residual and in_ch != out_ch:
            self.proj = _param(unit_gain_init((out_ch, in_ch, 1, 1), in_ch, rng),
                               dtype)
        self.residual = cfg.use_residual

    def forward(self, x, mode):
        if self.residual:
            proj = ConvSpec(self.proj) if self.proj is not None else None
            return recurrent_residual_forward(x, self.unit, proj, mode)
        return recurrent_conv_forward(x, self.unit, mode)

    def parameters(self):
        p = OrderedDict((f"unit.{k}", v) for k, v in self.unit.parameters().items())
        if self.proj is not None:
            p["proj"] = self.proj
        return p


class R2AUNet:
    def __init__(self, config: ModelConfig, seed=0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config.base_channels
        self.encoders = []
        in_ch = config.in_channels
        for k in range(config.depth):
            out_ch = c * 2 ** k
            self.encoders.append(_Stage(in_ch, out_ch, config, rng, dtype))
            in_ch = out_ch
        bott_ch = c * 2 ** config.depth
        self.bottleneck = _Stage(in_ch, bott_ch, config, rng, dtype)
        self.upconvs = []
        self.gates = []
        self.decoders = []
        cur = bott_ch
        for k in reversed(range(config.depth)):
            skip_ch = c * 2 ** k
            self.upconvs.append(_param(
                unit_gain_init((skip_ch, cur, 2, 2), cur * 4, rng), dtype))
            gate = None
            if config.use_attention and (k > 0 or config.attend_first_skip):
                gate = AttentionGate(skip_ch, skip_ch, rng=rng, dtype=dtype)
            self.gates.append(gate)
            self.decoders.append(_Stage(2 * skip_ch, skip_ch, config, rng, dtype))
            cur = skip_ch
        self.head_kernel = _param(unit_gain_init((1, c, 1, 1), c, rng), dtype)
        self.head_bias = _param(np.zeros(1), dtype)

    # ------------------------------------------------------------------
    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        cfg = self.config
        n, ch, h, w = x.data.shape
        if ch != cfg.in_channels:
            raise ShapeError(f"expected {cfg.in_channels} input channels, got {ch}")
        if h % 2 ** cfg.depth or w % 2 ** cfg.depth:
            raise ShapeError(
                f"spatial dims {h}x{w} must be divisible by {2 ** cfg.depth}")
        skips = []
        cur = x
        for stage in self.encoders:
            feat = stage.forward(cur, mode)
            skips.append(feat)
            cur = maxpool2d(feat)
        cur = self.bottleneck.forward(cur, mode)
        for i, k in enumerate(reversed(range(cfg.depth))):
            up = conv2d_transpose(cur, ConvSpec(self.upconvs[i], stride=2))
            skip = skips[k]
            if self.gates[i] is not None:
                skip, _ = attention_gate(skip, up, self.gates[i])
            cur = self.decoders[i].forward(concat_channels([skip, up]), mode)
        logits = add(conv2d(cur, ConvSpec(self.head_kernel)),
                     _bias_as_map(self.head_bias))
        return sigmoid(logits)

    def __call__(self, x, mode="train"):
        return self.forward(x, mode)

    # ------------------------------------------------------------------
    def parameters(self) -> OrderedDict:
        p = OrderedDict()
        for k, stage in enumerate(self.encoders):
            for name, t in stage.parameters().items():
                p[f"enc{k}.{name}"] = t
        for name, t in self.bottleneck.parameters().items():
            p[f"bottleneck.{name}"] = t
        for i in range(self.config.depth):
            p[f"up{i}"] = self.upconvs[i]
            if self.gates[i] is not None:
                for name, t in self.gates[i].parameters().items():
                    p[f"gate{i}.{name}"] = t
            for name, t in self.decoders[i].parameters().items():
                p[f"dec{i}.{name}"] = t
        p["head.kernel"] = self.head_kernel
        p["head.bias"] = self.head_bias
        return p

    def _bn_modules(self):
        bns = OrderedDict()
        for k, stage in enumerate(self.encoders):
            bns[f"enc{k}.unit.bn"] = stage.unit.bn
        bns["bottleneck.unit.bn"] = self.bottleneck.unit.bn
        for i in range(self.config.depth):
            bns[f"dec{i}.unit.bn"] = self.decoders[i].unit.bn
        return bns

    def named_arrays(self) -> OrderedDict:
        """Every persistent array: trainable parameters plus BN buffers."""
        arrays = OrderedDict((name, t.data) for name, t in self.parameters().items())
        for name, bn in self._bn_modules().items():
            arrays[f"{name}.running_mean"] = bn.running_mean
            arrays[f"{name}.running_var"] = bn.running_var
        return arrays

    def load_arrays(self, arrays: dict):
        params = self.parameters()
        bns = self._bn_modules()
        for name, t in params.items():
            t.data = np.asarray(arrays[name], dtype=self.dtype)
        for name, bn in bns.items():
            bn.running_mean = np.asarray(arrays[f"{name}.running_mean"],
                                         dtype=self.dtype)
            bn.running_var = np.asarray(arrays[f"{name}.running_var"],
                                        dtype=self.dtype)

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()

    def param_count(self):
        return sum(t.data.size for t in self.parameters().values())


def _bias_as_map(b: Tensor) -> Tensor:
    v = Tensor(b.data.reshape(1, -1, 1, 1), _prev=(b,))
    v._backward = lambda g: b.accumulate_grad(g.sum(axis=(0, 2, 3)))
    return v


def build(config: ModelConfig, seed=0, dtype=np.float64) -> R2AUNet:
    return R2AUNet(config, seed=seed, dtype=dtype)


def predict_mask(model: R2AUNet, x: Tensor, threshold: float = 0.5):
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    prob = model.forward(x, mode="eval")
    return (prob.data >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint format: magic "R2AU" | u32 version | u64 json length | json
# (config + manifest of name/shape/offset) | raw little-endian f32 blobs


def save_checkpoint(path, model: R2AUNet):
    arrays = model.named_arrays()
    manifest, offset = [], 0
    blobs = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": asdict(model.config),
                         "manifest": manifest}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, dtype=np.float32) -> R2AUNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})")
    hlen, = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    body = raw[16 + hlen:]
    config = ModelConfig(**header["config"])
    model = R2AUNet(config, seed=0, dtype=dtype)
    arrays = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count,
                            offset=entry["offset"]).reshape(shape)
        arrays[entry["name"]] = arr
    model.load_arrays(arrays)
    return model
