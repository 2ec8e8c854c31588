"""Three-stream interaction network: per-branch early blocks, middle fusion,
main blocks, pooled classifier, compound scaling and probability fusion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .features import STREAM_BRANCHES, stream_inputs
from .graph import build_adjacency
from .layers import AdaptiveGraphConv, JointAttention, TemporalConv
from .nn import BatchNorm, Linear, Module
from .skeleton import SkeletonClip
from .tensor import Value


@dataclass(frozen=True)
class BlockSpec:
    """One block: optional graph convolution, ``temporal_layers`` temporal
    convolutions (the first carries the stride), optional attention."""

    channels: int
    stride: int = 1
    temporal_layers: int = 1
    graph: bool = True
    attention: bool = True

    def __post_init__(self):
        if self.channels < 4 or self.stride not in (1, 2) or self.temporal_layers < 1:
            raise ValueError(f"invalid block {self}")


@dataclass(frozen=True)
class StreamSpec:
    name: str
    graph: str
    branches: tuple[str, ...]
    in_channels: int


STREAMS = {
    "A": StreamSpec("A", "intra", STREAM_BRANCHES["A"], 3),
    "B": StreamSpec("B", "inter", STREAM_BRANCHES["B"], 3),
    "C": StreamSpec("C", "inter", STREAM_BRANCHES["C"], 6),
}

B0_BRANCH_BLOCKS = (BlockSpec(80, 1, 2),)
B0_MAIN_BLOCKS = (BlockSpec(32, 2, 1), BlockSpec(136, 2, 1))


def round_channels(c: float) -> int:
    """Nearest multiple of 4 (halves round up), at least 4."""
    return max(4, int(math.floor(c / 4 + 0.5)) * 4)


@dataclass(frozen=True)
class ModelConfig:
    phi: int = 0
    alpha: float = 1.2
    beta: float = 1.35
    num_classes: int = 26
    frames: int = 150
    branch_blocks: tuple[BlockSpec, ...] = B0_BRANCH_BLOCKS
    main_blocks: tuple[BlockSpec, ...] = B0_MAIN_BLOCKS
    temporal_kernel: int = 5
    residual: bool = True
    similarity: bool = True
    width_divisor: int = 1
    streams: tuple[str, ...] = ("A", "B", "C")

    def __post_init__(self):
        if self.phi < 0:
            raise ValueError("phi must be non-negative")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not self.streams or set(self.streams) - set(STREAMS) or len(set(self.streams)) != len(self.streams):
            raise ValueError(f"streams must be a nonempty subset of {tuple(STREAMS)}, got {self.streams}")
        if self.temporal_kernel not in (5, 9):
            raise ValueError("temporal kernel must be 5 or 9")

    @property
    def name(self) -> str:
        return model_name(self)

    def with_streams(self, streams) -> "ModelConfig":
        return replace(self, streams=tuple(sorted(streams)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_blocks"] = [asdict(b) for b in self.branch_blocks]
        d["main_blocks"] = [asdict(b) for b in self.main_blocks]
        d["streams"] = list(self.streams)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        for key in ("branch_blocks", "main_blocks"):
            if key in d:
                d[key] = tuple(BlockSpec(**b) for b in d[key])
        if "streams" in d:
            d["streams"] = tuple(d["streams"])
        return cls(**d)


def model_name(config: ModelConfig) -> str:
    return f"3s-EGCN-IIG (B{config.phi})"


def scale_config(base: ModelConfig, phi: int) -> ModelConfig:
    """Compound scaling of a base (phi=0) layout.

    Widths are multiplied by ``alpha**phi`` and rounded to a multiple of 4.
    Depth grows through the number of temporal layers in each post-fusion
    block, multiplied by ``beta**phi`` and rounded; the single-block branch
    stacks keep their depth.
    """
    if phi < 0:
        raise ValueError("phi must be non-negative")
    if base.phi != 0:
        raise ValueError("scale_config expects a base configuration (phi=0)")
    if phi == 0:
        return base
    width = base.alpha**phi
    depth = base.beta**phi

    def scale(b: BlockSpec, deepen: bool) -> BlockSpec:
        layers = max(1, round(b.temporal_layers * depth)) if deepen else b.temporal_layers
        return replace(b, channels=round_channels(b.channels * width), temporal_layers=layers)

    return replace(
        base,
        phi=phi,
        branch_blocks=tuple(scale(b, False) for b in base.branch_blocks),
        main_blocks=tuple(scale(b, True) for b in base.main_blocks),
    )


def tiny_config(base: ModelConfig | None = None, **overrides) -> ModelConfig:
    """The desk-scale variant: every width divided by 4."""
    return replace(base or ModelConfig(), width_divisor=4, **overrides)


class Block(Module):
    def __init__(self, c_in: int, spec: BlockSpec, config: ModelConfig, adjacency: np.ndarray, rng):
        c_out = round_channels(spec.channels / config.width_divisor) if config.width_divisor != 1 else spec.channels
        layers = []
        c = c_in
        if spec.graph:
            layers.append(AdaptiveGraphConv(c, c_out, adjacency, config.residual, config.similarity, rng=rng))
            c = c_out
        for j in range(spec.temporal_layers):
            stride = spec.stride if j == 0 else 1
            layers.append(TemporalConv(c, c_out, stride, config.temporal_kernel, config.residual, rng=rng))
            c = c_out
        if spec.attention:
            layers.append(JointAttention(c_out, rng=rng))
        self.layers = layers
        self.c_in, self.c_out = c_in, c_out

    def forward(self, x: Value) -> Value:
        for layer in self.layers:
            x = layer(x)
        return x

    def cost(self, shape):
        items = []
        for i, layer in enumerate(self.layers):
            out, flops = layer.cost(shape)
            items.append((f"layers.{i}", layer, flops))
            shape = out
        return shape, items


class Branch(Module):
    """Input batch norm followed by the early blocks of one branch."""

    def __init__(self, tag: str, c_in: int, config: ModelConfig, adjacency, rng):
        self.tag = tag
        self.bn = BatchNorm(c_in)
        self.blocks = []
        c = c_in
        for spec in config.branch_blocks:
            self.blocks.append(Block(c, spec, config, adjacency, rng))
            c = self.blocks[-1].c_out
        self.c_out = c

    def forward(self, x: Value) -> Value:
        x = self.bn(x)
        for b in self.blocks:
            x = b(x)
        return x


class Stream(Module):
    def __init__(self, spec: StreamSpec, config: ModelConfig, adjacency: np.ndarray, rng):
        if adjacency.shape[-1] != (25 if spec.graph == "intra" else 50):
            raise ValueError(f"stream {spec.name}: adjacency of {adjacency.shape[-1]} nodes does not fit a {spec.graph} graph")
        self.spec = spec
        self.branches = [Branch(tag, spec.in_channels, config, adjacency, rng) for tag in spec.branches]
        widths = {b.c_out for b in self.branches}
        if len(widths) != 1:
            raise ValueError(f"stream {spec.name}: branch widths {widths} differ at the fusion point")
        c = sum(b.c_out for b in self.branches)
        self.fusion_channels = c
        self.main = []
        for bspec in config.main_blocks:
            self.main.append(Block(c, bspec, config, adjacency, rng))
            c = self.main[-1].c_out
        self.fc = Linear(c, config.num_classes, rng=rng)

    def forward(self, x) -> Value:
        """``x`` is (N, I, C, T, V, M); returns (N, classes) logits."""
        x = x.data if isinstance(x, Value) else np.asarray(x)
        n, i, c, t, v, m = x.shape
        if i != len(self.branches) or c != self.spec.in_channels:
            raise T.ShapeError(f"stream {self.spec.name}: input {x.shape} does not match {len(self.branches)} branches of {self.spec.in_channels} channels")
        xs = x.transpose(1, 0, 5, 2, 3, 4).reshape(i, n * m, c, t, v)
        dtype = self.fc.weight.dtype
        feats = [br(Value(xs[k].astype(dtype, copy=False))) for k, br in enumerate(self.branches)]
        h = T.concat(feats, axis=1) if len(feats) > 1 else feats[0]
        for b in self.main:
            h = b(h)
        _, cc, tt, vv = h.shape
        pooled = h.reshape(n, m, cc, tt * vv).mean(axis=(1, 3))
        return self.fc(pooled)


class InteractionModel(Module):
    """The selected streams, each with its own parameters; scores fuse by averaging."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        rng = np.random.default_rng(seed)
        adjacency = {kind: build_adjacency(kind)[1].normalized for kind in ("intra", "inter")}
        for s in config.streams:
            spec = STREAMS[s]
            setattr(self, f"stream_{s}", Stream(spec, config, adjacency[spec.graph], rng))
        if dtype != np.float64:
            self.astype(dtype)

    @property
    def stream_names(self) -> tuple[str, ...]:
        return self.config.streams

    def stream(self, name: str) -> Stream:
        return getattr(self, f"stream_{name}")

    def _select(self, streams) -> tuple[str, ...]:
        if streams is None:
            return self.stream_names
        streams = tuple(streams)
        unknown = set(streams) - set(self.stream_names)
        if not streams or unknown:
            raise ValueError(f"streams must be a nonempty subset of {self.stream_names}, got {streams}")
        return streams

    def forward(self, inputs: dict, streams=None) -> dict[str, Value]:
        streams = self._select(streams)
        missing = set(streams) - set(inputs)
        if missing:
            raise KeyError(f"missing stream inputs: {sorted(missing)}")
        return {s: self.stream(s)(inputs[s]) for s in streams}

    def probabilities(self, inputs: dict, streams=None) -> np.ndarray:
        """Fused class probabilities over ``streams`` (default: all built streams)."""
        with T.no_grad():
            logits = self(inputs, streams)
        return fuse_probabilities([T.softmax(lg, axis=-1).data for lg in logits.values()])


def fuse_probabilities(probs) -> np.ndarray:
    """Equal-weight average of per-stream probability vectors."""
    probs = [np.asarray(p, dtype=np.float64) for p in probs]
    if not probs:
        raise ValueError("no stream probabilities to fuse")
    return np.mean(probs, axis=0)


def forward_model(features: dict, model: InteractionModel) -> np.ndarray:
    return model.probabilities(features)


def predict(clip: SkeletonClip, model: InteractionModel) -> tuple[int, np.ndarray]:
    """Class index and fused probabilities for one aligned, paired clip (inference mode)."""
    if clip.frames != model.config.frames or clip.bodies != 2:
        raise ValueError(
            f"clip must be aligned to {model.config.frames} frames with 2 body slots, got {clip.frames} x {clip.bodies}"
        )
    was_training = model.training
    model.eval()
    try:
        feats = {s: x[None] for s, x in stream_inputs(clip, model.stream_names).items()}
        probs = model.probabilities(feats)[0]
    finally:
        model.train(was_training)
    return int(np.argmax(probs)), probs
