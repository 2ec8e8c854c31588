"""Finite-difference checks of the network layers on tiny double-precision instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import BodyGraph, normalize_adjacency, partition_spatial
from .layers import AdaptiveGraphConv, JointAttention, TemporalConv
from .tensor import Value

LAYERS = ("agc", "tgc", "att")
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    layer: str
    tensor: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def tiny_adjacency(nodes: int = 5) -> np.ndarray:
    """Normalized 3-subset adjacency of a path graph laid out on a line."""
    graph = BodyGraph(nodes, tuple((i, i + 1) for i in range(nodes - 1)), "path")
    pose = np.stack([np.arange(nodes, dtype=np.float64), np.zeros(nodes), np.zeros(nodes)], axis=1)
    return normalize_adjacency(partition_spatial(graph, pose)).normalized


def build_layer(name: str, rng: np.random.Generator, channels: int = 4, nodes: int = 5):
    """A tiny layer with every parameter moved off its initial value."""
    if name == "agc":
        # c_in < c_out and c_in > c_out exercise both aggregation orders
        layer = AdaptiveGraphConv(channels, channels + 4, tiny_adjacency(nodes), rng=rng)
    elif name == "agc_wide_in":
        layer = AdaptiveGraphConv(channels + 4, channels, tiny_adjacency(nodes), rng=rng)
    elif name == "tgc":
        layer = TemporalConv(channels, channels + 4, stride=2, kernel=5, rng=rng)
    elif name == "att":
        layer = JointAttention(channels + 4, rng=rng)
    else:
        raise ValueError(f"unknown layer {name!r}; choose from {LAYERS}")
    for p in layer.parameters():
        p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)
    return layer


def check_layer(name: str, seed: int = 0, frames: int = 8, nodes: int = 5, eps: float = 1e-6) -> list[GradCheckResult]:
    """Max relative error of every parameter's and the input's gradient."""
    rng = np.random.default_rng(seed)
    variants = ("agc", "agc_wide_in") if name == "agc" else (name,)
    out = []
    for variant in variants:
        layer = build_layer(variant, rng, nodes=nodes)
        c_in = layer.channels if variant == "att" else layer.c_in
        x = Value(rng.normal(size=(2, c_in, frames, nodes)))
        probe = None

        def loss(_):
            nonlocal probe
            y = layer(x)
            if probe is None:
                probe = rng.normal(size=y.shape)
            return (y * probe).sum()

        targets = [("input", x)] + list(layer.named_parameters())
        for tname, t in targets:
            out.append(GradCheckResult(variant, tname, T.finite_diff_check(loss, t, eps)))
    return out


def run(layer: str = "all", seed: int = 0) -> list[GradCheckResult]:
    names = LAYERS if layer == "all" else (layer,)
    results = []
    for name in names:
        results.extend(check_layer(name, seed))
    return results
