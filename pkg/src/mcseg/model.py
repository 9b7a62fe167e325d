"""Dual-encoder (frame + motion cue) segmentation network and its checkpoint format."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor

VARIANTS = ("dual_diff", "dual_flow", "single")
STAGE_CHANNELS = (256, 512, 1024, 2048)
STAGE_STRIDES = (1, 2, 2, 2)
STEM_CHANNELS = 64
# encoder outputs: stem (after max-pool), stage1..stage4; downsampling factor of each
LEVEL_FACTORS = (4, 4, 8, 16, 32)
WEIGHTS_MAGIC = b"MCSEGW01"


@dataclass
class NetConfig:
    width_mult: float = 1.0
    blocks_per_stage: Tuple[int, int, int, int] = (3, 4, 6, 3)
    bottleneck_channels: int = 1024
    num_classes: int = 2
    variant: str = "dual_diff"
    decoder_channels: Tuple[int, ...] = (256, 128, 64, 32, 16)

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.validate()

    def validate(self):
        if not self.width_mult > 0:
            raise ConfigError(f"width_mult must be positive, got {self.width_mult}", field="width_mult")
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ConfigError(f"blocks_per_stage must be 4 positive integers, got {self.blocks_per_stage}",
                              field="blocks_per_stage")
        if self.bottleneck_channels < 1:
            raise ConfigError("bottleneck_channels must be >= 1", field="bottleneck_channels")
        if self.num_classes != 2:
            raise ConfigError("num_classes is fixed at 2", field="num_classes")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}", field="variant")
        if len(self.decoder_channels) != 5 or min(self.decoder_channels) < 1:
            raise ConfigError("decoder_channels must be 5 positive integers", field="decoder_channels")
        base = (STEM_CHANNELS, *STAGE_CHANNELS, self.bottleneck_channels, *self.decoder_channels)
        for c in base + tuple(c // 4 for c in STAGE_CHANNELS):
            if round(c * self.width_mult) < 1:
                raise ConfigError(f"width_mult {self.width_mult} scales {c} channels below 1", field="width_mult")

    def ch(self, c: int) -> int:
        return max(1, int(round(c * self.width_mult)))

    @property
    def dual(self) -> bool:
        return self.variant != "single"

    @classmethod
    def toy(cls, variant="dual_diff"):
        return cls(width_mult=0.25, blocks_per_stage=(1, 1, 1, 1), variant=variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown NetConfig fields {sorted(unknown)}", field=sorted(unknown)[0])
        return cls(**d)


# ---------------------------------------------------------------- layers


class Module:
    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def param(self, name, array) -> Tensor:
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for n, p in self._params.items():
            yield prefix + n, p
        for cn, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cn}.")

    def named_buffers(self, prefix=""):
        for n, b in self._buffers.items():
            yield prefix + n, b
        for cn, c in self._children.items():
            yield from c.named_buffers(f"{prefix}{cn}.")


def _he(rng, shape):
    if rng is None:
        return np.zeros(shape, np.float32)
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, bias=False, rng=None):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.weight = self.param("weight", _he(rng, (cout, cin, k, k)))
        self.bias = self.param("bias", np.zeros(cout, np.float32)) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    def __init__(self, c):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(c))
        self.beta = self.param("beta", np.zeros(c))
        self._buffers["running_mean"] = np.zeros(c, np.float32)
        self._buffers["running_var"] = np.ones(c, np.float32)

    def __call__(self, x, training):
        return T.batchnorm2d(x, self.gamma, self.beta, self._buffers["running_mean"],
                             self._buffers["running_var"], training)


class ConvBN(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, rng=None):
        super().__init__()
        self.conv = self.child("conv", Conv(cin, cout, k, stride, pad, rng=rng))
        self.bn = self.child("bn", BatchNorm(cout))

    def __call__(self, x, training, act=True):
        y = self.bn(self.conv(x), training)
        return T.relu(y) if act else y


class Bottleneck(Module):
    """1x1 reduce -> 3x3 (carries the stride) -> 1x1 expand, plus shortcut."""

    def __init__(self, cin, mid, cout, stride, rng):
        super().__init__()
        self.reduce = self.child("reduce", ConvBN(cin, mid, 1, rng=rng))
        self.spatial = self.child("spatial", ConvBN(mid, mid, 3, stride, 1, rng=rng))
        self.expand = self.child("expand", ConvBN(mid, cout, 1, rng=rng))
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = self.child("shortcut", ConvBN(cin, cout, 1, stride, rng=rng))

    def __call__(self, x, training):
        y = self.expand(self.spatial(self.reduce(x, training), training), training, act=False)
        s = x if self.shortcut is None else self.shortcut(x, training, act=False)
        return T.relu(T.add(y, s))


class Encoder(Module):
    def __init__(self, config: NetConfig, rng):
        super().__init__()
        c0 = config.ch(STEM_CHANNELS)
        self.stem = self.child("stem", ConvBN(3, c0, 7, 2, 3, rng=rng))
        self.stages: List[List[Bottleneck]] = []
        cin = c0
        for i, (n_blocks, width, stride) in enumerate(zip(config.blocks_per_stage, STAGE_CHANNELS, STAGE_STRIDES)):
            cout, mid = config.ch(width), config.ch(width // 4)
            blocks = []
            for b in range(n_blocks):
                blocks.append(self.child(f"stage{i + 1}_{b}",
                                         Bottleneck(cin, mid, cout, stride if b == 0 else 1, rng)))
                cin = cout
            self.stages.append(blocks)
        self.channels = [c0] + [config.ch(w) for w in STAGE_CHANNELS]

    def __call__(self, x, training) -> List[Tensor]:
        h = T.maxpool2d(self.stem(x, training), 3, 2, pad=1)
        feats = [h]
        for blocks in self.stages:
            for block in blocks:
                h = block(h, training)
            feats.append(h)
        return feats


def build_encoder(config: NetConfig, rng=None) -> Encoder:
    config.validate()
    return Encoder(config, np.random.default_rng(0) if rng is None else rng)


def encoder_output_size(size: int) -> List[int]:
    """Spatial size of each encoder level for a given input size (stride arithmetic)."""
    def out(s, k, stride, pad):
        return (s + 2 * pad - k) // stride + 1
    s = out(size, 7, 2, 3)
    s = out(s, 3, 2, 1)
    sizes = [s, s]
    for stride in STAGE_STRIDES[1:]:
        s = out(s, 3, stride, 1)
        sizes.append(s)
    return sizes


class SegNet(Module):
    """Encoder(s) -> 1x1 fusion bottleneck -> five upsampling decoder stages -> 2 logits."""

    def __init__(self, config: NetConfig, seed: Optional[int] = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = None if seed is None else np.random.default_rng(seed)
        self.frame_encoder = self.child("frame_encoder", Encoder(config, rng))
        self.cue_encoder = self.child("cue_encoder", Encoder(config, rng)) if config.dual else None
        mult = 2 if config.dual else 1
        enc_ch = self.frame_encoder.channels
        self.fusion_in = mult * enc_ch[-1]
        width = config.ch(config.bottleneck_channels)
        self.fusion = self.child("fusion", ConvBN(self.fusion_in, width, 1, rng=rng))
        self.decoder: List[ConvBN] = []
        self.skip_levels: List[List[int]] = []
        cin = width
        factor = LEVEL_FACTORS[-1]
        for j, dch in enumerate(config.decoder_channels):
            factor //= 2
            levels = [i for i, f in enumerate(LEVEL_FACTORS[:-1]) if f == factor]
            self.skip_levels.append(levels)
            skip_ch = mult * sum(enc_ch[i] for i in levels)
            cout = config.ch(dch)
            self.decoder.append(self.child(f"decoder{j + 1}", ConvBN(cin + skip_ch, cout, 3, 1, 1, rng=rng)))
            cin = cout
        self.head = self.child("head", Conv(cin, config.num_classes, 1, bias=True, rng=rng))

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def __call__(self, frame, cue=None, training=False) -> Tensor:
        return self.forward(frame, cue, training)

    def forward(self, frame, cue=None, training=False) -> Tensor:
        frame = frame if isinstance(frame, Tensor) else Tensor(frame)
        if frame.data.ndim != 4 or frame.shape[1] != 3:
            raise ShapeError(f"frame must be n x 3 x H x W, got {frame.shape}")
        n, _, h, w = frame.shape
        if h % 32 or w % 32:
            raise ShapeError(f"input height and width must be multiples of 32, got {h}x{w}")
        variant = self.config.variant
        if self.config.dual:
            if cue is None:
                raise ShapeError(f"variant {variant} needs a motion cue input")
            cue = cue if isinstance(cue, Tensor) else Tensor(cue)
            if cue.shape != frame.shape:
                raise ShapeError(f"variant {variant}: cue shape {cue.shape} != frame shape {frame.shape}")
        elif cue is not None:
            raise ShapeError("variant single takes no motion cue")

        feats = self.frame_encoder(frame, training)
        if self.config.dual:
            cue_feats = self.cue_encoder(cue, training)
            feats = [T.concat_channels(a, b) for a, b in zip(feats, cue_feats)]
        x = self.fusion(feats[-1], training)
        for stage, levels in zip(self.decoder, self.skip_levels):
            x = T.upsample_bilinear2x(x)
            for i in levels:
                x = T.concat_channels(x, feats[i])
            x = stage(x, training)
        return self.head(x)

    def predict(self, frame, cue=None) -> np.ndarray:
        """Per-pixel argmax over the two logits, as an (n, H, W) uint8 mask."""
        logits = self.forward(frame, cue, training=False).data
        return (logits[:, 1] > logits[:, 0]).astype(np.uint8)

    # ------------------------------------------------------------ weights

    def state(self) -> "ModelWeights":
        tensors, roles = OrderedDict(), {}
        for name, p in self.named_parameters():
            tensors[name] = p.data
            roles[name] = "param"
        for name, b in self.named_buffers():
            tensors[name] = b
            roles[name] = "buffer"
        return ModelWeights(tensors, roles, self.config)

    def load_state(self, weights: "ModelWeights") -> None:
        problem = first_mismatch(self.state().tensors, weights.tensors)
        if problem:
            raise FormatError(f"checkpoint does not fit variant {self.config.variant}: {problem}")
        for name, p in self.named_parameters():
            p.data[...] = weights.tensors[name]
        for name, b in self.named_buffers():
            b[...] = weights.tensors[name]


def first_mismatch(expected, got) -> Optional[str]:
    """Describe the first missing, misshapen or unexpected entry, or None."""
    for name, arr in expected.items():
        if name not in got:
            return f"missing parameter {name!r}"
        if got[name].shape != arr.shape:
            return f"parameter {name!r} has shape {got[name].shape}, expected {arr.shape}"
    extra = [n for n in got if n not in expected]
    return f"unexpected parameter {extra[0]!r}" if extra else None


def parameter_count(config: NetConfig) -> int:
    return sum(p.data.size for _, p in SegNet(config, seed=None).named_parameters())


def forward(frame, cue, config: NetConfig, weights: "ModelWeights", training=False) -> Tensor:
    net = SegNet(config, seed=None)
    net.load_state(weights)
    return net.forward(frame, cue, training)


# ---------------------------------------------------------------- checkpoint container


@dataclass
class ModelWeights:
    tensors: "OrderedDict[str, np.ndarray]"
    roles: Dict[str, str] = field(default_factory=dict)
    config: Optional[NetConfig] = None
    meta: Dict[str, object] = field(default_factory=dict)  # free-form run info, e.g. seed and fold

    def __post_init__(self):
        self.tensors = OrderedDict(self.tensors)


def _header_bytes(weights: ModelWeights) -> Tuple[bytes, List[np.ndarray]]:
    entries, blobs, offset = [], [], 0
    for name, arr in weights.tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "role": weights.roles.get(name, "param"), "dtype": "float32",
                        "shape": list(blob.shape), "offset": offset, "nbytes": blob.nbytes})
        blobs.append(blob)
        offset += blob.nbytes
    header = {"config": weights.config.to_dict() if weights.config else None, "tensors": entries}
    if weights.meta:
        header["meta"] = weights.meta
    return json.dumps(header, separators=(",", ":")).encode("utf-8"), blobs


def save_weights(weights: ModelWeights, path) -> None:
    """Layout: magic, uint64 header length, UTF-8 JSON header, raw float32 blobs."""
    for name, arr in weights.tensors.items():
        if not np.all(np.isfinite(arr)):
            raise ShapeError(f"refusing to save non-finite parameter {name!r}")
    header, blobs = _header_bytes(weights)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b.tobytes())


def read_weights_header(path) -> dict:
    raw = Path(path).read_bytes()
    return _parse_header(raw, path)[0]


def _parse_header(raw: bytes, path):
    if raw[:8] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not an MCSEGW01 checkpoint", offset=0)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header length", offset=len(raw))
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + hlen:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})", offset=16) from None
    return header, 16 + hlen


def load_weights(path, config: Optional[NetConfig] = None) -> ModelWeights:
    """Read a checkpoint; with ``config`` given, check names and shapes against it."""
    raw = Path(path).read_bytes()
    header, base = _parse_header(raw, path)
    tensors, roles = OrderedDict(), {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if e["dtype"] != "float32":
            raise FormatError(f"{path}: unsupported dtype {e['dtype']} for {e['name']}", offset=start)
        if start + e["nbytes"] > len(raw):
            raise FormatError(f"{path}: payload of {e['name']!r} truncated", offset=len(raw))
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
        roles[e["name"]] = e.get("role", "param")
    stored = NetConfig.from_dict(header["config"]) if header.get("config") else None
    weights = ModelWeights(tensors, roles, stored, dict(header.get("meta") or {}))
    if config is not None:
        if stored is not None and stored.variant != config.variant:
            problem = first_mismatch(SegNet(config, seed=None).state().tensors, tensors)
            raise FormatError(f"{path}: checkpoint variant {stored.variant} does not match "
                              f"requested {config.variant}; {problem}")
        SegNet(config, seed=None).load_state(weights)
        weights.config = config
    return weights
