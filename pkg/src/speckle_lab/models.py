"""DisplacementCNN / StrainCNN encoder-decoder networks and checkpoints.

Encoder (channel counts at ``width_scale=1``)::

    conv 7x7/2 64 -> maxpool 3x3/2 -> conv 3x3 192 -> maxpool
    -> inception (128, 128, 192, 32, 96, 64)   = 480 channels -> maxpool
    -> inception (256, 160, 320, 32, 128, 128) = 832 channels -> maxpool
    -> 1x1 bottleneck 256 -> avgpool 3x3/1 -> dropout

The decoder climbs back through five x2 nearest-neighbour upsamplings, each
followed by a 3x3 conv, mirroring the encoder depths (832, 480, 192, 64, 64),
and a linear 1x1 conv emits 2 (u, v) or 3 (exx, eyy, exy) channels.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .fields import DisplacementField, GrayImage, StrainField
from .nn import AdamState, Conv2d, ConvBNReLU, Module, Tensor

HEADS = {"displacement": 2, "strain": 3}
INCEPTION_1 = (128, 128, 192, 32, 96, 64)
INCEPTION_2 = (256, 160, 320, 32, 128, 128)
STRIDE = 32


def scaled(c: int, scale: float) -> int:
    return max(1, math.ceil(c * scale - 1e-9))


@dataclass(frozen=True)
class InceptionSpec:
    n1x1: int
    n3x3red: int
    n3x3: int
    n5x5red: int
    n5x5: int
    npool: int

    @property
    def out_channels(self) -> int:
        return self.n1x1 + self.n3x3 + self.n5x5 + self.npool

    def scaled(self, s: float) -> "InceptionSpec":
        return InceptionSpec(*(scaled(c, s) for c in dataclasses.astuple(self)))


@dataclass(frozen=True)
class ModelConfig:
    head: str = "displacement"
    width_scale: float = 1.0
    in_channels: int = 2
    bottleneck: int = 256
    decoder: tuple = (832, 480, 192, 64, 64)
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {sorted(HEADS)}, got {self.head!r}")
        if not 0 < self.width_scale <= 1:
            raise ValueError("width_scale must lie in (0, 1]")
        if len(self.decoder) != 5:
            raise ValueError("decoder needs one channel count per x2 upsampling (5)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        object.__setattr__(self, "decoder", tuple(int(c) for c in self.decoder))

    @property
    def out_channels(self) -> int:
        return HEADS[self.head]

    def ch(self, c: int) -> int:
        return scaled(c, self.width_scale)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decoder"] = list(self.decoder)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


class Inception(Module):
    """Four parallel branches concatenated along channels."""

    def __init__(self, cin: int, spec: InceptionSpec, seed: int):
        self.spec = spec
        self.b1 = ConvBNReLU(cin, spec.n1x1, 1, seed=seed)
        self.b3 = nn.Sequential(ConvBNReLU(cin, spec.n3x3red, 1, seed=seed + 1),
                                ConvBNReLU(spec.n3x3red, spec.n3x3, 3, seed=seed + 2))
        self.b5 = nn.Sequential(ConvBNReLU(cin, spec.n5x5red, 1, seed=seed + 3),
                                ConvBNReLU(spec.n5x5red, spec.n5x5, 5, seed=seed + 4))
        self.bp = nn.Sequential(nn.MaxPool(3, 1, 1), ConvBNReLU(cin, spec.npool, 1, seed=seed + 5))

    @property
    def out_channels(self):
        return self.spec.out_channels

    def forward(self, x, **kw):
        return nn.concat_channels([self.b1(x), self.b3(x), self.b5(x), self.bp(x)])


def _seed(cfg, k):
    return int(np.random.SeedSequence([cfg.seed, k]).generate_state(1)[0])


class Encoder(Module):
    def __init__(self, cfg: ModelConfig):
        s = cfg.width_scale
        self.conv1 = ConvBNReLU(cfg.in_channels, cfg.ch(64), 7, stride=2, seed=_seed(cfg, 1))
        self.pool1 = nn.MaxPool(3, 2, 1)
        self.conv2 = ConvBNReLU(cfg.ch(64), cfg.ch(192), 3, seed=_seed(cfg, 2))
        self.pool2 = nn.MaxPool(3, 2, 1)
        self.inception1 = Inception(cfg.ch(192), InceptionSpec(*INCEPTION_1).scaled(s),
                                    seed=_seed(cfg, 3))
        self.pool3 = nn.MaxPool(3, 2, 1)
        self.inception2 = Inception(self.inception1.out_channels,
                                    InceptionSpec(*INCEPTION_2).scaled(s), seed=_seed(cfg, 4))
        self.pool4 = nn.MaxPool(3, 2, 1)
        self.bottleneck = ConvBNReLU(self.inception2.out_channels, cfg.ch(cfg.bottleneck), 1,
                                     seed=_seed(cfg, 5))
        self.avgpool = nn.AvgPool(3, 1, 1)
        self.dropout = nn.Dropout(cfg.dropout)

    @property
    def out_channels(self):
        return self.bottleneck.out_channels

    def forward(self, x, rng=None):
        for layer in (self.conv1, self.pool1, self.conv2, self.pool2, self.inception1,
                      self.pool3, self.inception2, self.pool4, self.bottleneck, self.avgpool):
            x = layer(x)
        return self.dropout(x, rng=rng)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, cin: int):
        self.up = nn.Upsample(2)
        stages = []
        for i, c in enumerate(cfg.decoder):
            stages.append(ConvBNReLU(cin, cfg.ch(c), 3, seed=_seed(cfg, 10 + i)))
            cin = cfg.ch(c)
        self.stages = stages
        self.head = Conv2d(cin, cfg.out_channels, 1, seed=_seed(cfg, 20))

    def forward(self, x, **kw):
        for stage in self.stages:
            x = stage(self.up(x))
        return self.head(x)


class DeformationCNN(Module):
    """Encoder-decoder mapping a stacked (reference, deformed) pair to a field."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg, self.encoder.out_channels)

    def forward(self, x, rng=None):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.data.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (N, {self.cfg.in_channels}, H, W) input, got {x.shape}")
        h, w = x.shape[2:]
        if h % STRIDE or w % STRIDE or h == 0 or w == 0:
            raise ValueError(f"input sides must be positive multiples of {STRIDE}, got {h}x{w}")
        return self.decoder(self.encoder(x, rng=rng))

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def state_arrays(self) -> tuple[dict, dict]:
        return ({k: p.data for k, p in self.named_parameters()},
                {k: b for k, b in self.named_buffers()})


def build_encoder(cfg: ModelConfig) -> Encoder:
    return Encoder(cfg)


def build_model(cfg: ModelConfig) -> DeformationCNN:
    return DeformationCNN(cfg)


def encoder_layer_table(enc: Encoder) -> list[dict]:
    """The ten encoder rows: conv, BN+ReLU and pool stages, then inceptions and pools."""
    def conv_row(name, block):
        return {"name": name, "type": "conv", "kernels": block.conv.cout,
                "kernel_size": (block.conv.k, block.conv.k), "stride": block.conv.stride}

    def pool_row(pool):
        return {"name": "Max Pooling", "type": "maxpool", "pool_size": (pool.k, pool.k),
                "stride": (pool.stride, pool.stride)}

    def inc_row(name, inc):
        return {"name": name, "type": "inception", "filters": dataclasses.astuple(inc.spec),
                "out_channels": inc.out_channels}

    return [
        conv_row("CNN 1", enc.conv1),
        {"name": "Batch Normalization", "type": "batchnorm", "channels": enc.conv1.bn.gamma.shape[0]},
        pool_row(enc.pool1),
        conv_row("CNN 2", enc.conv2),
        {"name": "Batch Normalization", "type": "batchnorm", "channels": enc.conv2.bn.gamma.shape[0]},
        pool_row(enc.pool2),
        inc_row("Inception Layer 1", enc.inception1),
        pool_row(enc.pool3),
        inc_row("Inception Layer 2", enc.inception2),
        pool_row(enc.pool4),
    ]


def forward_batch(model: DeformationCNN, inputs, batch_size: int = 32) -> np.ndarray:
    """Inference-mode predictions for an (N, 2, H, W) array."""
    model.eval()
    inputs = np.asarray(inputs, dtype=np.float32)
    out = [model(Tensor(inputs[i:i + batch_size])).data for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out, axis=0)


def stack_pair(ref: GrayImage, deformed: GrayImage) -> np.ndarray:
    if ref.shape != deformed.shape:
        raise ValueError(f"pair images differ in shape: {ref.shape} vs {deformed.shape}")
    return np.stack([ref.data, deformed.data]).astype(np.float32)


def forward_pair(model: DeformationCNN, ref: GrayImage, deformed: GrayImage):
    """Predict the field between two frames (inference mode)."""
    out = forward_batch(model, stack_pair(ref, deformed)[None])[0].astype(np.float64)
    cls = DisplacementField if model.cfg.head == "displacement" else StrainField
    return cls.from_array(out)


class CnnPredictor:
    """Trained network behind the ``predictor(ref, deformed) -> field`` interface."""

    def __init__(self, model: DeformationCNN):
        self.model = model
        self.kind = model.cfg.head

    def __call__(self, ref, deformed):
        return forward_pair(self.model, ref, deformed)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SPKLCKPT"


@dataclass(eq=False)
class ModelCheckpoint:
    """Architecture, weights, BN statistics and Adam moments at one epoch."""

    config: ModelConfig
    params: dict
    buffers: dict
    optimizer: AdamState | None = None
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: DeformationCNN, optimizer: AdamState | None = None, epoch=0,
                   extra=None) -> "ModelCheckpoint":
        params, buffers = model.state_arrays()
        opt = None
        if optimizer is not None:
            opt = AdamState({k: v.copy() for k, v in optimizer.m.items()},
                            {k: v.copy() for k, v in optimizer.v.items()},
                            optimizer.t, optimizer.beta1, optimizer.beta2, optimizer.eps)
        return cls(model.cfg, {k: v.copy() for k, v in params.items()},
                   {k: v.copy() for k, v in buffers.items()}, opt, epoch, dict(extra or {}))

    def to_model(self) -> DeformationCNN:
        model = build_model(self.config)
        self.load_into(model)
        return model

    def load_into(self, model: DeformationCNN):
        params, buffers = model.state_arrays()
        problems = architecture_diff(params, buffers, self.params, self.buffers)
        if problems:
            raise ValueError("checkpoint does not match the architecture:\n  " + "\n  ".join(problems))
        for k, arr in params.items():
            arr[...] = self.params[k]
        for k, arr in buffers.items():
            arr[...] = self.buffers[k]

    def _tensors(self):
        yield from (("param/" + k, v) for k, v in self.params.items())
        yield from (("buffer/" + k, v) for k, v in self.buffers.items())
        if self.optimizer is not None:
            yield from (("adam_m/" + k, v) for k, v in self.optimizer.m.items())
            yield from (("adam_v/" + k, v) for k, v in self.optimizer.v.items())

    def to_bytes(self) -> bytes:
        directory, chunks, offset = [], [], 0
        for name, arr in self._tensors():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset,
                              "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        opt = None
        if self.optimizer is not None:
            o = self.optimizer
            opt = {"t": o.t, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps}
        header = {"format": 1, "architecture": self.config.to_dict(), "epoch": self.epoch,
                  "optimizer": opt, "extra": self.extra, "tensors": directory}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)

    def save(self, path):
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise OSError(f"failed to write checkpoint {path}: {exc.strerror or exc}") from exc

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelCheckpoint":
        if raw[:8] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        payload = memoryview(raw)[16 + hlen:]
        groups = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
        for entry in header["tensors"]:
            kind, name = entry["name"].split("/", 1)
            buf = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(entry["shape"])
            groups[kind][name] = arr
        opt = None
        if header["optimizer"] is not None:
            o = header["optimizer"]
            opt = AdamState(groups["adam_m"], groups["adam_v"], o["t"], o["beta1"], o["beta2"],
                            o["eps"])
        return cls(ModelConfig.from_dict(header["architecture"]), groups["param"],
                   groups["buffer"], opt, header["epoch"], header.get("extra", {}))

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())


def architecture_diff(params, buffers, ck_params, ck_buffers) -> list[str]:
    """Human-readable, layer-by-layer differences between two state layouts."""
    out = []
    for kind, mine, theirs in (("parameter", params, ck_params), ("buffer", buffers, ck_buffers)):
        for k in mine:
            if k not in theirs:
                out.append(f"{kind} {k}: missing from checkpoint")
            elif tuple(np.shape(mine[k])) != tuple(np.shape(theirs[k])):
                out.append(f"{kind} {k}: model {tuple(np.shape(mine[k]))} "
                           f"vs checkpoint {tuple(np.shape(theirs[k]))}")
        for k in theirs:
            if k not in mine:
                out.append(f"{kind} {k}: not present in model")
    return out
