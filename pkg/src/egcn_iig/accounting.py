"""Static parameter and FLOP counts of a built model.

FLOPs follow the MAC=1 convention: a multiply-accumulate is one FLOP.
Normalization, activations, pooling and other elementwise work count one
FLOP per output element. Input-independent work (such as ``A_k + B_k``, which
can be folded into the weights once) is not counted, so FLOPs are exactly
linear in the batch size.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from .model import InteractionModel, Stream

CONVENTION = "MAC=1"


@dataclass
class LayerCost:
    stream: str
    name: str
    kind: str
    params: int
    flops: Counter

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())


@dataclass
class CostReport:
    layers: list[LayerCost]
    frames: int
    batch: int
    convention: str = CONVENTION
    streams: tuple[str, ...] = field(default_factory=tuple)

    def stream_params(self, stream: str) -> int:
        return sum(l.params for l in self.layers if l.stream == stream)

    def stream_flops(self, stream: str) -> int:
        return sum(l.total_flops for l in self.layers if l.stream == stream)

    def stream_category(self, stream: str, category: str) -> int:
        return sum(l.flops[category] for l in self.layers if l.stream == stream)

    @property
    def total_params(self) -> int:
        return sum(self.stream_params(s) for s in self.streams)

    @property
    def total_flops(self) -> int:
        return sum(self.stream_flops(s) for s in self.streams)

    @property
    def similarity_flops(self) -> int:
        return sum(l.flops["similarity"] for l in self.layers)

    def categories(self) -> list[str]:
        seen = Counter()
        for l in self.layers:
            seen.update(l.flops)
        return sorted(seen)

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "frames": self.frames,
            "batch": self.batch,
            "total": {"params": self.total_params, "flops": self.total_flops, "similarity_flops": self.similarity_flops},
            "streams": {
                s: {
                    "params": self.stream_params(s),
                    "flops": self.stream_flops(s),
                    "flops_by_category": {c: self.stream_category(s, c) for c in self.categories()},
                }
                for s in self.streams
            },
            "layers": [
                {"stream": l.stream, "name": l.name, "kind": l.kind, "params": l.params, "flops": dict(l.flops)}
                for l in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self, layers: bool = False, title: str = "") -> str:
        lines = []
        if title:
            lines.append(title)
        lines.append(f"convention {self.convention}, T={self.frames}, batch={self.batch}")
        lines.append(f"{'stream':<8}{'params (M)':>12}{'FLOPs (G)':>12}{'C_k FLOPs (G)':>16}")
        for s in self.streams:
            lines.append(
                f"{s:<8}{self.stream_params(s) / 1e6:>12.4f}{self.stream_flops(s) / 1e9:>12.4f}"
                f"{self.stream_category(s, 'similarity') / 1e9:>16.4f}"
            )
        lines.append(
            f"{'total':<8}{self.total_params / 1e6:>12.4f}{self.total_flops / 1e9:>12.4f}{self.similarity_flops / 1e9:>16.4f}"
        )
        if layers:
            lines.append("")
            lines.append(f"{'layer':<44}{'kind':<20}{'params':>10}{'MFLOPs':>12}")
            for l in self.layers:
                lines.append(f"{l.stream + '.' + l.name:<44}{l.kind:<20}{l.params:>10}{l.total_flops / 1e6:>12.3f}")
        return "\n".join(lines)


def _params(module) -> int:
    return sum(p.size for p in module.parameters())


def _stream_layers(name: str, stream: Stream, frames: int, batch: int) -> list[LayerCost]:
    spec = stream.spec
    nodes, bodies = (25, 2) if spec.graph == "intra" else (50, 1)
    out = []
    fused = None
    for bi, branch in enumerate(stream.branches):
        shape = (batch * bodies, spec.in_channels, frames, nodes)
        out.append(LayerCost(name, f"branches.{bi}.bn", "BatchNorm", _params(branch.bn), Counter(elementwise=math.prod(shape))))
        for ki, block in enumerate(branch.blocks):
            shape, items = block.cost(shape)
            for lname, layer, flops in items:
                out.append(LayerCost(name, f"branches.{bi}.blocks.{ki}.{lname}", type(layer).__name__, _params(layer), flops))
        fused = shape if fused is None else (shape[0], fused[1] + shape[1]) + shape[2:]
    shape = fused
    for ki, block in enumerate(stream.main):
        shape, items = block.cost(shape)
        for lname, layer, flops in items:
            out.append(LayerCost(name, f"main.{ki}.{lname}", type(layer).__name__, _params(layer), flops))
    n, c, t, v = shape
    out.append(LayerCost(name, "pool", "GlobalAvgPool", 0, Counter(elementwise=n * c * t * v)))
    classes = stream.fc.weight.shape[0]
    out.append(LayerCost(name, "fc", "Linear", _params(stream.fc), Counter(fc=batch * c * classes)))
    return out


def count_costs(model: InteractionModel, frames: int | None = None, batch: int = 1) -> CostReport:
    """Per-layer parameters and FLOPs at input length ``frames`` (default: the model's)."""
    frames = model.config.frames if frames is None else frames
    if frames < 1 or batch < 1:
        raise ValueError("frames and batch must be positive")
    layers = []
    for s in model.stream_names:
        layers.extend(_stream_layers(s, model.stream(s), frames, batch))
    report = CostReport(layers, frames, batch, streams=tuple(model.stream_names))
    if report.total_params != model.num_parameters():
        raise AssertionError("cost report does not cover every parameter")
    return report


def count_parameters(model: InteractionModel) -> CostReport:
    return count_costs(model)


def count_flops(model: InteractionModel, input_shape: tuple[int, int] | None = None) -> CostReport:
    """``input_shape`` is (batch, frames)."""
    batch, frames = input_shape or (1, model.config.frames)
    return count_costs(model, frames, batch)
