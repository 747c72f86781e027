"""Attended-speech extraction network.

Audio branch: two strided 1-D convolutions encode the waveform; a mirrored
pair of transposed convolutions decodes masked embeddings back to audio.
EEG branch: one strided convolution plus eight depthwise-separable residual
layers whose outputs are summed into a multi-level feature.
Separator: three stacks of dilated depthwise blocks; between the first and
second stack the two modalities are fused, either by coupled cross-attention
layers or by plain channel concatenation.  The mask head turns the summed
stack features into one bounded mask per source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import diff_ops as ops
from .diff_ops import DiffNode, Parameter, constant, no_grad
from .signal_core import MultiChannelSeries, SampleBuffer

# Depthwise kernel width used in all separator/EEG/attention convolutions.
DEPTHWISE_KERNEL = 3

# Attention Q/K/V projections start small so the C x C logit matrix stays
# O(1) when dot products run over a few hundred frames.
_ATTENTION_INIT_SCALE = 0.25


class ModelError(ValueError):
    """Bad configuration, incompatible inputs, or a broken checkpoint."""


@dataclass(frozen=True)
class BasenConfig:
    """Architecture hyperparameters.

    The defaults instantiate the full-rate network; feature_channels=64 puts
    the total parameter count at 641,786 with cmca_layers=3.
    """

    audio_rate: float = 14700.0
    eeg_rate: float = 128.0
    eeg_channels: int = 128
    feature_channels: int = 64
    encoder_kernel: int = 16
    encoder_strides: tuple = (8, 8)
    stack_depth: int = 8
    n_stacks: int = 3
    cmca_layers: int = 3
    n_sources: int = 2
    cmca_groups: int = 8
    fusion: str = "cmca"

    def __post_init__(self):
        if self.audio_rate <= 0 or self.eeg_rate <= 0:
            raise ModelError("rates must be positive")
        if self.eeg_channels < 1:
            raise ModelError("eeg_channels must be positive")
        if self.feature_channels < 1:
            raise ModelError("feature_channels must be positive")
        if self.stack_depth < 1:
            raise ModelError("stack_depth must be at least 1")
        if self.n_stacks < 1:
            raise ModelError("n_stacks must be at least 1")
        if self.cmca_layers < 1:
            raise ModelError("cmca_layers must be at least 1")
        if self.n_sources < 2:
            raise ModelError("n_sources must be at least 2")
        if self.feature_channels % self.cmca_groups:
            raise ModelError(
                f"feature_channels {self.feature_channels} not divisible by "
                f"cmca_groups {self.cmca_groups}")
        object.__setattr__(self, "encoder_strides", tuple(int(s) for s in self.encoder_strides))
        if not self.encoder_strides or any(s < 1 for s in self.encoder_strides):
            raise ModelError(f"bad encoder_strides {self.encoder_strides}")
        # the eeg front conv reuses the kernel at its fixed stride of 8
        for s in set(self.encoder_strides) | {8}:
            if self.encoder_kernel < s or (self.encoder_kernel - s) % 2:
                raise ModelError(
                    f"encoder_kernel {self.encoder_kernel} and stride {s} must "
                    f"differ by a non-negative even number")
        if self.fusion not in ("cmca", "concat"):
            raise ModelError(f"unknown fusion {self.fusion!r}")

    @property
    def downsample_factor(self) -> int:
        out = 1
        for s in self.encoder_strides:
            out *= s
        return out


def tiny_config() -> BasenConfig:
    """Smallest end-to-end configuration, sized for finite-difference checks."""
    return BasenConfig(audio_rate=2000.0, eeg_rate=128.0, eeg_channels=4,
                       feature_channels=8, stack_depth=2, cmca_layers=2,
                       cmca_groups=2)


def desk_config() -> BasenConfig:
    """Reduced-rate configuration for the synthetic benchmark."""
    return BasenConfig(audio_rate=8000.0, eeg_channels=16)


# ---------------------------------------------------------------------------
# Parameter registry and small layer wrappers.

class _Registry:
    def __init__(self, seed, dtype):
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        self.dtype = dtype
        self.params: list[Parameter] = []

    def normal(self, name, shape, std):
        p = Parameter(name, (self.rng.normal(size=shape) * std).astype(self.dtype))
        self.params.append(p)
        return p

    def full(self, name, shape, value):
        p = Parameter(name, np.full(shape, value, dtype=self.dtype))
        self.params.append(p)
        return p


class _Conv:
    def __init__(self, reg, name, c_in, c_out, kernel, stride=1, dilation=1,
                 padding=0, init_scale=1.0):
        std = init_scale / math.sqrt(c_in * kernel)
        self.w = reg.normal(f"{name}.w", (c_out, c_in, kernel), std)
        self.b = reg.full(f"{name}.b", (c_out,), 0.0)
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def __call__(self, x):
        return ops.conv1d(x, self.w.node, self.b.node, stride=self.stride,
                          dilation=self.dilation, padding=self.padding)


class _ConvT:
    def __init__(self, reg, name, c_in, c_out, kernel, stride, padding):
        std = 1.0 / math.sqrt(c_in * kernel)
        self.w = reg.normal(f"{name}.w", (c_in, c_out, kernel), std)
        self.b = reg.full(f"{name}.b", (c_out,), 0.0)
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return ops.conv_transpose1d(x, self.w.node, self.b.node,
                                    stride=self.stride, padding=self.padding)


class _Depthwise:
    def __init__(self, reg, name, channels, kernel, dilation=1, init_scale=1.0):
        std = init_scale / math.sqrt(kernel)
        self.w = reg.normal(f"{name}.w", (channels, kernel), std)
        self.b = reg.full(f"{name}.b", (channels,), 0.0)
        self.dilation = dilation
        self.padding = dilation * (kernel - 1) // 2

    def __call__(self, x):
        return ops.depthwise_conv1d(x, self.w.node, self.b.node,
                                    dilation=self.dilation, padding=self.padding)


class _PRelu:
    def __init__(self, reg, name):
        self.slope = reg.full(f"{name}.slope", (1,), 0.25)

    def __call__(self, x):
        return ops.prelu(x, self.slope.node)


class _Norm:
    def __init__(self, reg, name, channels, groups):
        self.gain = reg.full(f"{name}.gain", (channels,), 1.0)
        self.bias = reg.full(f"{name}.bias", (channels,), 0.0)
        self.groups = groups

    def __call__(self, x):
        return ops.group_norm(x, self.groups, self.gain.node, self.bias.node)


class _EegBlock:
    """Depthwise-separable layer with a residual connection."""

    def __init__(self, reg, name, channels):
        self.dw = _Depthwise(reg, f"{name}.dw", channels, DEPTHWISE_KERNEL)
        self.act = _PRelu(reg, f"{name}.act")
        self.pw = _Conv(reg, f"{name}.pw", channels, channels, 1)

    def __call__(self, x):
        return ops.add(x, self.pw(self.act(self.dw(x))))


class _SeparatorBlock:
    """Dilated depthwise block with residual and skip outputs."""

    def __init__(self, reg, name, channels, dilation):
        self.inp = _Conv(reg, f"{name}.in", channels, channels, 1)
        self.act1 = _PRelu(reg, f"{name}.act1")
        self.norm1 = _Norm(reg, f"{name}.norm1", channels, 1)
        self.dw = _Depthwise(reg, f"{name}.dw", channels, DEPTHWISE_KERNEL, dilation)
        self.act2 = _PRelu(reg, f"{name}.act2")
        self.norm2 = _Norm(reg, f"{name}.norm2", channels, 1)
        self.res = _Conv(reg, f"{name}.res", channels, channels, 1)
        self.skip = _Conv(reg, f"{name}.skip", channels, channels, 1)

    def __call__(self, x):
        h = self.norm2(self.act2(self.dw(self.norm1(self.act1(self.inp(x))))))
        return ops.add(x, self.res(h)), self.skip(h)


class _Stack:
    def __init__(self, reg, name, channels, depth):
        self.blocks = [_SeparatorBlock(reg, f"{name}.block{d}", channels, 2 ** d)
                       for d in range(depth)]

    def __call__(self, x):
        skip_sum = None
        for block in self.blocks:
            x, skip = block(x)
            skip_sum = skip if skip_sum is None else ops.add(skip_sum, skip)
        return x, skip_sum


class _CrossAttention:
    """Q from one modality, K and V from the other, via depthwise projections."""

    def __init__(self, reg, name, channels):
        self.q = _Depthwise(reg, f"{name}.q", channels, DEPTHWISE_KERNEL,
                            init_scale=_ATTENTION_INIT_SCALE)
        self.k = _Depthwise(reg, f"{name}.k", channels, DEPTHWISE_KERNEL,
                            init_scale=_ATTENTION_INIT_SCALE)
        self.v = _Depthwise(reg, f"{name}.v", channels, DEPTHWISE_KERNEL,
                            init_scale=_ATTENTION_INIT_SCALE)

    def __call__(self, query_src, kv_src, collect=None, tag=None):
        if query_src.value.shape != kv_src.value.shape:
            raise ModelError(
                f"cross-attention shape mismatch {query_src.value.shape} vs "
                f"{kv_src.value.shape}")
        q = self.q(query_src)
        k = self.k(kv_src)
        v = self.v(kv_src)
        weights = ops.softmax_rows(ops.matmul(q, ops.transpose_last2(k)))
        attended = ops.matmul(weights, v)
        if collect is not None:
            collect.setdefault("attention_weights", {})[tag] = weights.value
        return attended


class _CmcaLayer:
    def __init__(self, reg, name, channels, groups):
        self.left_att = _CrossAttention(reg, f"{name}.left", channels)
        self.right_att = _CrossAttention(reg, f"{name}.right", channels)
        self.left_norm = _Norm(reg, f"{name}.left_norm", channels, groups)
        self.right_norm = _Norm(reg, f"{name}.right_norm", channels, groups)

    def __call__(self, a_prev, e_prev, collect=None, tag=None):
        a_new = self.left_norm(ops.add(
            a_prev, self.left_att(e_prev, a_prev, collect, f"{tag}.left")))
        e_new = self.right_norm(ops.add(
            e_prev, self.right_att(a_prev, e_prev, collect, f"{tag}.right")))
        return a_new, e_new


class _CmcaFusion:
    """Coupled cross-attention layers, layer-sum aggregation, 1x1 fusion."""

    def __init__(self, reg, name, channels, layers, groups):
        self.layers = [_CmcaLayer(reg, f"{name}.layer{i}", channels, groups)
                       for i in range(layers)]
        self.fuse = _Conv(reg, f"{name}.fuse", 4 * channels, channels, 1)

    def __call__(self, a_x, e_x, collect=None):
        a, e = a_x, e_x
        sum_a, sum_e = None, None
        for i, layer in enumerate(self.layers):
            a, e = layer(a, e, collect, f"layer{i}")
            sum_a = a if sum_a is None else ops.add(sum_a, a)
            sum_e = e if sum_e is None else ops.add(sum_e, e)
            if collect is not None:
                collect.setdefault("cmca_audio", []).append(a.value)
                collect.setdefault("cmca_eeg", []).append(e.value)
        return self.fuse(ops.concat_channels([sum_a, sum_e, a_x, e_x]))


class _ConcatFusion:
    """Channel concatenation followed by a 1x1 convolution."""

    def __init__(self, reg, name, channels):
        self.fuse = _Conv(reg, f"{name}.fuse", 2 * channels, channels, 1)

    def __call__(self, a_x, e_x, collect=None):
        return self.fuse(ops.concat_channels([a_x, e_x]))


# ---------------------------------------------------------------------------

class BasenModel:
    """End-to-end network over the differentiable operator set."""

    def __init__(self, config: BasenConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        reg = _Registry(seed, self.dtype)
        c = config.feature_channels
        k = config.encoder_kernel

        chans = [1] + [c] * len(config.encoder_strides)
        self.audio_enc = [
            _Conv(reg, f"audio_enc.conv{i}", chans[i], chans[i + 1], k,
                  stride=s, padding=(k - s) // 2)
            for i, s in enumerate(config.encoder_strides)]
        dec_chans = list(reversed(chans))
        self.audio_dec = [
            _ConvT(reg, f"audio_dec.conv{i}", dec_chans[i], dec_chans[i + 1], k,
                   stride=s, padding=(k - s) // 2)
            for i, s in enumerate(reversed(config.encoder_strides))]

        self.eeg_in = _Conv(reg, "eeg_enc.in", config.eeg_channels, c, k,
                            stride=8, padding=(k - 8) // 2)
        self.eeg_blocks = [_EegBlock(reg, f"eeg_enc.block{i}", c) for i in range(8)]

        self.stacks = [_Stack(reg, f"sep.stack{i}", c, config.stack_depth)
                       for i in range(config.n_stacks)]
        if config.fusion == "cmca":
            self.fusion = _CmcaFusion(reg, "fusion", c, config.cmca_layers,
                                      config.cmca_groups)
        else:
            self.fusion = _ConcatFusion(reg, "fusion", c)

        self.mask_act = _PRelu(reg, "mask.act")
        self.mask_out = _Conv(reg, "mask.out", c, config.n_sources * c, 1)

        self.parameters = reg.params
        self._by_name = {p.name: p for p in reg.params}

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters)

    def param(self, name: str) -> Parameter:
        if name not in self._by_name:
            raise ModelError(f"no parameter named {name!r}")
        return self._by_name[name]

    # -- forward pieces ------------------------------------------------------

    def encode_audio(self, x: DiffNode) -> DiffNode:
        for conv in self.audio_enc:
            x = conv(x)
        return x

    def decode_audio(self, x: DiffNode) -> DiffNode:
        for conv in self.audio_dec:
            x = conv(x)
        return x

    def encode_eeg(self, n: DiffNode) -> DiffNode:
        h = self.eeg_in(n)
        total = None
        for block in self.eeg_blocks:
            h = block(h)
            total = h if total is None else ops.add(total, h)
        return total

    def forward_nodes(self, audio: DiffNode, eeg: DiffNode, collect=None):
        """Run the network on padded batches.

        audio: (B, 1, L) with L a multiple of the downsample factor;
        eeg: (B, eeg_channels, frames).  Returns a list of n_sources
        waveform nodes shaped (B, 1, L), attended source first.
        """
        factor = self.config.downsample_factor
        if audio.value.ndim != 3 or audio.value.shape[1] != 1:
            raise ModelError(f"audio batch must be (B, 1, L), got {audio.value.shape}")
        if audio.value.shape[2] % factor:
            raise ModelError(
                f"padded length {audio.value.shape[2]} not a multiple of {factor}")
        if eeg.value.ndim != 3 or eeg.value.shape[1] != self.config.eeg_channels:
            raise ModelError(
                f"eeg batch must be (B, {self.config.eeg_channels}, frames), "
                f"got {eeg.value.shape}")

        w_x = self.encode_audio(audio)
        e_feat = self.encode_eeg(eeg)
        e_x = ops.linear_interp_frames(e_feat, w_x.value.shape[-1])

        a_x, skip_total = self.stacks[0](w_x)
        c_x = self.fusion(a_x, e_x, collect)
        h = c_x
        for stack in self.stacks[1:]:
            h, skip = stack(h)
            skip_total = ops.add(skip_total, skip)
        d_x = h

        mask_in = self.mask_act(ops.add(d_x, skip_total))
        mask_flat = ops.sigmoid(self.mask_out(mask_in))
        c = self.config.feature_channels
        masks = [ops.narrow_channels(mask_flat, t * c, c)
                 for t in range(self.config.n_sources)]
        if collect is not None:
            collect["w_x"] = w_x.value
            collect["a_x"] = a_x.value
            collect["e_x"] = e_x.value
            collect["c_x"] = c_x.value
            collect["masks"] = [m.value for m in masks]
        return [self.decode_audio(ops.mul(w_x, m)) for m in masks]

    # -- whole-waveform interface ---------------------------------------------

    def padded_length(self, n_samples: int) -> int:
        factor = self.config.downsample_factor
        if n_samples < factor:
            raise ModelError(
                f"input of {n_samples} samples is shorter than the minimum "
                f"{factor}")
        return -(-n_samples // factor) * factor

    def check_span(self, n_samples: int, eeg_frames: int) -> None:
        audio_span = n_samples / self.config.audio_rate
        eeg_span = eeg_frames / self.config.eeg_rate
        if abs(audio_span - eeg_span) > 1.0 / self.config.eeg_rate + 1e-9:
            raise ModelError(
                f"audio covers {audio_span:.6f} s but eeg covers "
                f"{eeg_span:.6f} s; spans must agree within one eeg frame")

    def separate(self, x: SampleBuffer, eeg: MultiChannelSeries):
        """Estimate all source waveforms for one mixture; no gradients kept."""
        if x.rate != self.config.audio_rate:
            raise ModelError(f"expected {self.config.audio_rate} Hz audio, got {x.rate}")
        if eeg.rate != self.config.eeg_rate:
            raise ModelError(f"expected {self.config.eeg_rate} Hz eeg, got {eeg.rate}")
        if eeg.channel_count != self.config.eeg_channels:
            raise ModelError(
                f"expected {self.config.eeg_channels} eeg channels, got "
                f"{eeg.channel_count}")
        self.check_span(len(x), eeg.frame_count)
        padded = self.padded_length(len(x))
        audio = np.zeros((1, 1, padded), dtype=self.dtype)
        audio[0, 0, :len(x)] = x.samples
        eeg_arr = eeg.data[None].astype(self.dtype)
        with no_grad():
            outs = self.forward_nodes(constant(audio), constant(eeg_arr))
        return [SampleBuffer(o.value[0, 0, :len(x)].astype(np.float64), x.rate)
                for o in outs]


# ---------------------------------------------------------------------------
# Checkpoints.

_CKPT_MAGIC = b"BASEN-CKPT 1"


def _config_lines(config: BasenConfig):
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name == "encoder_strides":
            v = ",".join(str(s) for s in v)
        yield f"{f.name}={v}"


def _parse_config(lines) -> BasenConfig:
    kwargs = {}
    known = {f.name for f in fields(BasenConfig)}
    for line in lines:
        key, sep, val = line.partition("=")
        if not sep or key not in known:
            raise ModelError(f"bad checkpoint config line {line!r}")
        if key == "encoder_strides":
            kwargs[key] = tuple(int(s) for s in val.split(","))
        elif key == "fusion":
            kwargs[key] = val
        elif key in ("audio_rate", "eeg_rate"):
            kwargs[key] = float(val)
        else:
            kwargs[key] = int(val)
    return BasenConfig(**kwargs)


def save_checkpoint(path, model: BasenModel) -> None:
    """Write config plus every parameter tensor as little-endian float32."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + b"\n")
        for line in _config_lines(model.config):
            fh.write(line.encode("ascii") + b"\n")
        fh.write(b"\n")
        for p in model.parameters:
            dims = "x".join(str(d) for d in p.value.shape)
            fh.write(f"{p.name} shape={dims}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> BasenModel:
    """Rebuild a model from a checkpoint; validates names and shapes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, rest = raw.partition(b"\n\n")
    if not sep:
        raise ModelError(f"malformed checkpoint {path}: missing header terminator")
    lines = head.decode("ascii", errors="replace").split("\n")
    if lines[0].encode() != _CKPT_MAGIC:
        raise ModelError(f"malformed checkpoint {path}: bad magic")
    config = _parse_config(lines[1:])
    model = BasenModel(config, seed=0, dtype=dtype)

    tensors = {}
    offset = 0
    while offset < len(rest):
        nl = rest.find(b"\n", offset)
        if nl < 0:
            raise ModelError(f"malformed checkpoint {path}: truncated tensor header")
        try:
            name, shape_txt = rest[offset:nl].decode("ascii").rsplit(" shape=", 1)
            shape = tuple(int(d) for d in shape_txt.split("x"))
        except ValueError as exc:
            raise ModelError(f"malformed checkpoint {path}: {exc}") from exc
        count = int(np.prod(shape, dtype=np.int64))
        start, stop = nl + 1, nl + 1 + 4 * count
        if stop > len(rest):
            raise ModelError(f"malformed checkpoint {path}: tensor {name} truncated")
        tensors[name] = np.frombuffer(rest[start:stop], dtype="<f4").reshape(shape)
        offset = stop

    expected = {p.name: p.value.shape for p in model.parameters}
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    wrong = sorted(name for name in set(expected) & set(tensors)
                   if tensors[name].shape != expected[name])
    if missing or extra or wrong:
        raise ModelError(
            f"checkpoint {path} does not match the model: "
            f"missing={missing} extra={extra} shape_mismatch={wrong}")
    for p in model.parameters:
        p.node.value = tensors[p.name].astype(dtype)
        p.m = np.zeros_like(p.node.value)
        p.v = np.zeros_like(p.node.value)
        p.step = 0
    return model
