"""Encoder-decoder construction, transfer heads, and checkpoint files.

The restoration network is a 3D U-Net: per encoder stage two conv-bn-relu
blocks then max pooling, a bottleneck, and a mirrored decoder with nearest
upsampling and skip concatenation, closed by a 1x1x1 convolution with a
sigmoid.  Transfer either reuses the encoder under a classification head or
the full encoder-decoder under a fresh segmentation head.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensornet as tn
from .tensornet import ComputeGraph, InitScheme, Tensor


class CheckpointError(ValueError):
    """Malformed checkpoint file or incompatible restore."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Restore failed; the message lists the offending tensor names."""


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 4
    out_channels: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    pool_z: bool = True

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.base_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @classmethod
    def toy(cls, **overrides) -> "UNetConfig":
        """Desk-scale preset: 4 base channels, depth 2, for 16x16x8 inputs."""
        merged = dict(base_channels=4, depth=2)
        merged.update(overrides)
        return cls(**merged)

    @property
    def pool_factor(self) -> tuple[int, int, int]:
        return (2, 2, 2) if self.pool_z else (2, 2, 1)

    def stage_channels(self, i: int) -> int:
        return self.base_channels * (2**i)


def receptive_field(cfg: UNetConfig) -> tuple[int, int, int]:
    """Receptive field of one bottleneck voxel along each input axis."""
    rf = [1, 1, 1]
    jump = [1, 1, 1]
    for stage in range(cfg.depth + 1):
        for _conv in range(2):
            for ax in range(3):
                rf[ax] += 2 * jump[ax]
        if stage < cfg.depth:
            for ax, f in enumerate(cfg.pool_factor):
                rf[ax] += (f - 1) * jump[ax]
                jump[ax] *= f
    return tuple(rf)  # type: ignore[return-value]


class _ConvBNRelu:
    def __init__(self, graph: ComputeGraph, name: str, cin: int, cout: int, cfg: UNetConfig):
        self.conv = tn.Conv3dLayer(graph, f"{name}.conv", cin, cout, 3, padding=1)
        self.bn = tn.BatchNorm3dLayer(graph, f"{name}.bn", cout, cfg.bn_eps, cfg.bn_momentum)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.relu(self.bn(self.conv(x)))


class UNetGraph(ComputeGraph):
    """Shared U-Net body; the output head name distinguishes the variants."""

    def __init__(self, cfg: UNetConfig, head_name: str = "final"):
        super().__init__()
        self.cfg = cfg
        self.head_name = head_name
        self.enc: list[tuple[_ConvBNRelu, _ConvBNRelu]] = []
        cin = cfg.in_channels
        for i in range(cfg.depth):
            c = cfg.stage_channels(i)
            self.enc.append(
                (
                    _ConvBNRelu(self, f"enc{i}.block1", cin, c, cfg),
                    _ConvBNRelu(self, f"enc{i}.block2", c, c, cfg),
                )
            )
            cin = c
        c_bot = cfg.stage_channels(cfg.depth)
        self.bottleneck = (
            _ConvBNRelu(self, "bottleneck.block1", cin, c_bot, cfg),
            _ConvBNRelu(self, "bottleneck.block2", c_bot, c_bot, cfg),
        )
        self.dec: list[tuple[_ConvBNRelu, _ConvBNRelu]] = []
        upper = c_bot
        for i in reversed(range(cfg.depth)):
            c = cfg.stage_channels(i)
            self.dec.append(
                (
                    _ConvBNRelu(self, f"dec{i}.block1", upper + c, c, cfg),
                    _ConvBNRelu(self, f"dec{i}.block2", c, c, cfg),
                )
            )
            upper = c
        self.head = tn.Conv3dLayer(self, head_name, cfg.base_channels, cfg.out_channels, 1)

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 5 or x.data.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected (batch, {self.cfg.in_channels}, x, y, z), got {x.data.shape}"
            )
        for ax, f in enumerate(self.cfg.pool_factor):
            extent = x.data.shape[2 + ax]
            if extent % (f**self.cfg.depth) != 0:
                raise ValueError(
                    f"spatial axis {ax} extent {extent} not divisible by "
                    f"{f}^{self.cfg.depth}; indivisible dims cannot round-trip the pooling"
                )

    def body(self, x: Tensor) -> Tensor:
        """Encoder, bottleneck, decoder; everything except the output head."""
        self._check_input(x)
        skips = []
        for block1, block2 in self.enc:
            x = block2(block1(x))
            skips.append(x)
            x = tn.maxpool3d(x, self.cfg.pool_factor)
        x = self.bottleneck[1](self.bottleneck[0](x))
        for (block1, block2), skip in zip(self.dec, reversed(skips)):
            x = tn.upsample3d(x, self.cfg.pool_factor)
            x = tn.concat_channels([x, skip])
            x = block2(block1(x))
        return x

    def encode(self, x: Tensor) -> Tensor:
        """Encoder and bottleneck only, for classification transfer."""
        self._check_input(x)
        for block1, block2 in self.enc:
            x = tn.maxpool3d(block2(block1(x)), self.cfg.pool_factor)
        return self.bottleneck[1](self.bottleneck[0](x))

    def forward(self, x: Tensor) -> Tensor:
        return tn.sigmoid(self.head(self.body(x)))

    def encoder_names(self) -> list[str]:
        return [
            n
            for reg in (self.params, self.buffers)
            for n in reg
            if n.startswith(("enc", "bottleneck"))
        ]


class ClassifierNet(ComputeGraph):
    """Encoder + global average pooling + dense head with a sigmoid output."""

    def __init__(self, cfg: UNetConfig, n_classes: int = 1, fc_widths: tuple[int, ...] = (1024,)):
        super().__init__()
        if n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        self.cfg = cfg
        self.enc: list[tuple[_ConvBNRelu, _ConvBNRelu]] = []
        cin = cfg.in_channels
        for i in range(cfg.depth):
            c = cfg.stage_channels(i)
            self.enc.append(
                (
                    _ConvBNRelu(self, f"enc{i}.block1", cin, c, cfg),
                    _ConvBNRelu(self, f"enc{i}.block2", c, c, cfg),
                )
            )
            cin = c
        c_bot = cfg.stage_channels(cfg.depth)
        self.bottleneck = (
            _ConvBNRelu(self, "bottleneck.block1", cin, c_bot, cfg),
            _ConvBNRelu(self, "bottleneck.block2", c_bot, c_bot, cfg),
        )
        self.fcs: list[tn.DenseLayer] = []
        fin = c_bot
        for j, width in enumerate(fc_widths):
            self.fcs.append(tn.DenseLayer(self, f"head.fc{j}", fin, width))
            fin = width
        self.fcs.append(tn.DenseLayer(self, f"head.fc{len(fc_widths)}", fin, n_classes))

    def forward(self, x: Tensor) -> Tensor:
        for block1, block2 in self.enc:
            x = tn.maxpool3d(block2(block1(x)), self.cfg.pool_factor)
        x = self.bottleneck[1](self.bottleneck[0](x))
        x = tn.spatial_mean(x)
        for fc in self.fcs[:-1]:
            x = tn.relu(fc(x))
        return tn.sigmoid(self.fcs[-1](x))

    def encoder_names(self) -> list[str]:
        return [
            n
            for reg in (self.params, self.buffers)
            for n in reg
            if n.startswith(("enc", "bottleneck"))
        ]


@dataclass
class EncoderBundle:
    """Copied encoder+bottleneck tensors, ready to seed a transfer model."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]


def build_restoration_unet(cfg: UNetConfig, scheme: InitScheme | None = None) -> UNetGraph:
    net = UNetGraph(cfg, head_name="final")
    tn.init_weights(net, scheme or InitScheme())
    return net


def extract_encoder(graph: ComputeGraph) -> EncoderBundle:
    """Copy encoder and bottleneck tensors out of a trained graph."""
    names = [n for n in graph.params if n.startswith(("enc", "bottleneck"))]
    if not names:
        raise ValueError("graph holds no encoder parameters")
    return EncoderBundle(
        params={n: graph.params[n].data.copy() for n in names},
        buffers={
            n: b.copy() for n, b in graph.buffers.items() if n.startswith(("enc", "bottleneck"))
        },
    )


def _install(graph: ComputeGraph, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
    bad = [n for n in params if n not in graph.params]
    bad += [n for n in buffers if n not in graph.buffers]
    if bad:
        raise CheckpointMismatchError(f"names not in target graph: {sorted(bad)}")
    shape_bad = [
        n for n, v in params.items() if tuple(v.shape) != tuple(graph.params[n].data.shape)
    ]
    if shape_bad:
        raise CheckpointMismatchError(f"shape mismatch for: {sorted(shape_bad)}")
    for n, v in params.items():
        graph.params[n].data = v.astype(np.float32).copy()
    for n, v in buffers.items():
        graph.buffers[n][...] = v


def _zero_layer(layer) -> None:
    """Zero a task head so the logits start flat.

    The first updates then fit a readout of the incoming features before any
    gradient reaches the body, which keeps a transferred body intact through
    the early steps instead of scrambling it under a randomly initialized head.
    """
    layer.weight.data[...] = 0.0
    layer.bias.data[...] = 0.0


def attach_classification_head(
    encoder: EncoderBundle | None,
    cfg: UNetConfig,
    n_classes: int = 1,
    fc_widths: tuple[int, ...] = (1024,),
    scheme: InitScheme | None = None,
    freeze_encoder: bool = False,
) -> ClassifierNet:
    """Build a classifier; seed its encoder from ``encoder`` when given.

    With ``freeze_encoder`` the seeded tensors stop receiving gradients and
    their batch-norm layers stay on running statistics.
    """
    net = ClassifierNet(cfg, n_classes, fc_widths)
    tn.init_weights(net, scheme or InitScheme())
    _zero_layer(net.fcs[-1])
    if encoder is not None:
        _install(net, encoder.params, encoder.buffers)
    if freeze_encoder:
        for name in net.encoder_names():
            if name in net.params:
                net.params[name].requires_grad = False
        for stage in net.enc:
            for block in stage:
                block.bn.frozen = True
        for block in net.bottleneck:
            block.bn.frozen = True
    return net


def attach_segmentation_head(
    source: "Checkpoint | None", cfg: UNetConfig, scheme: InitScheme | None = None
) -> UNetGraph:
    """Full encoder-decoder transfer with a freshly initialized output head.

    The head parameter names differ from the restoration head's, so restoring
    from a checkpoint can never silently reuse the proxy-task output layer.
    """
    net = UNetGraph(cfg, head_name="seg_head")
    tn.init_weights(net, scheme or InitScheme())
    _zero_layer(net.head)
    if source is not None:
        params = {n: v for n, v in source.tensors.items() if not n.startswith("final")}
        buffers = {n: params.pop(n) for n in list(params) if n in net.buffers}
        _install(net, params, buffers)
    return net


# ---------------------------------------------------------------------------
# checkpoint container and MGEN file format

CHECKPOINT_MAGIC = b"MGEN"
CHECKPOINT_VERSION = 1
_CKPT_DTYPE_F32 = 1


@dataclass
class Checkpoint:
    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def checkpoint_from_graph(graph: ComputeGraph, metadata: dict[str, str]) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, t in graph.params.items():
        tensors[name] = t.data.astype(np.float32).copy()
    for name, b in graph.buffers.items():
        tensors[name] = b.astype(np.float32).copy()
    return Checkpoint(dict(metadata), tensors)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write the MGEN container; keys and tensors are sorted for stable bytes."""
    for key, value in ckpt.metadata.items():
        if "=" in key or "\n" in key or "\n" in value:
            raise CheckpointError(f"metadata key/value not encodable: {key!r}")
    meta = "".join(f"{k}={v}\n" for k, v in sorted(ckpt.metadata.items())).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _CKPT_DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointTruncatedError(f"{path}: truncated while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta_text = bytes(take(meta_len, "metadata")).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: metadata is not valid UTF-8") from exc
    metadata: dict[str, str] = {}
    for line in meta_text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}: malformed metadata line {line!r}")
        key, _, value = line.partition("=")
        metadata[key] = value
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype_code != _CKPT_DTYPE_F32:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype {dtype_code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(4 * n_values, f"payload of {name!r}")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes after tensor table")
    return Checkpoint(metadata, tensors)


def restore(graph: ComputeGraph, ckpt: Checkpoint, strict: bool = True) -> None:
    """Load checkpoint tensors into a graph.

    Strict mode requires the checkpoint to cover every graph tensor and
    reports the missing names (a restoration net cannot run on an
    encoder-only checkpoint).  Non-strict fills the intersection, so a fresh
    head stays fresh.  Shape disagreements are always errors.
    """
    graph_names = set(graph.params) | set(graph.buffers)
    ckpt_names = set(ckpt.tensors)
    if strict:
        missing = sorted(graph_names - ckpt_names)
        if missing:
            raise CheckpointMismatchError(f"checkpoint lacks tensors for: {missing}")
    shared_params = {n: v for n, v in ckpt.tensors.items() if n in graph.params}
    shared_buffers = {n: v for n, v in ckpt.tensors.items() if n in graph.buffers}
    _install(graph, shared_params, shared_buffers)
