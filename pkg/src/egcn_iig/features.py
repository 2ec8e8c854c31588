"""Branch inputs (joint, velocity, bone, relative distance) computed from aligned clips.

Every feature is laid out as ``values[c, t, v, m]``. The intra layout keeps the
two bodies as separate 25-node graphs (M=2); the inter layout stacks them into
one 50-node graph (M=1) with the first person at nodes 0-24.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import NUM_JOINTS, REPRESENTATIVE_JOINTS, parent_map
from .skeleton import SkeletonClip

BRANCH_TAGS = ("J1", "V1", "B1", "J2", "V2", "B2")
STREAM_BRANCHES = {"A": ("J1", "V1", "B1"), "B": ("J2", "V2"), "C": ("B2",)}
STREAM_NAMES = tuple(STREAM_BRANCHES)

_PARENT = parent_map()


@dataclass
class BranchInput:
    tag: str
    values: np.ndarray
    single_person: bool = False

    def __post_init__(self):
        if self.tag not in BRANCH_TAGS:
            raise ValueError(f"unknown branch tag {self.tag!r}")
        c, _, v, m = self.values.shape
        want_c = 6 if self.tag == "B2" else 3
        want_vm = (NUM_JOINTS, 2) if self.tag.endswith("1") else (2 * NUM_JOINTS, 1)
        if c != want_c or (v, m) != want_vm:
            raise ValueError(f"{self.tag}: unexpected shape {self.values.shape}")

    @property
    def layout(self) -> str:
        return "intra" if self.tag.endswith("1") else "inter"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def _coords(clip) -> np.ndarray:
    """(T, 2, 25, 3) coordinates from a paired clip or a raw array."""
    x = clip.coords if isinstance(clip, SkeletonClip) else np.asarray(clip)
    if x.ndim != 4 or x.shape[1] != 2 or x.shape[2:] != (NUM_JOINTS, 3):
        raise ValueError(f"expected paired coordinates (T, 2, {NUM_JOINTS}, 3), got {x.shape}")
    return x


def _is_single(x: np.ndarray) -> bool:
    return not np.any(x[:, 1])


def _layout(x: np.ndarray, layout: str) -> np.ndarray:
    """(T, 2, 25, C) -> (C, T, V, M) for the requested layout."""
    if layout == "intra":
        return np.ascontiguousarray(x.transpose(3, 0, 2, 1))
    if layout == "inter":
        t, _, _, c = x.shape
        return np.ascontiguousarray(x.reshape(t, 2 * NUM_JOINTS, c).transpose(2, 0, 1)[..., None])
    raise ValueError(f"unknown layout {layout!r}")


def _tag(kind: str, layout: str) -> str:
    return kind + ("1" if layout == "intra" else "2")


def joint_feature(clip, layout: str = "intra") -> BranchInput:
    x = _coords(clip)
    return BranchInput(_tag("J", layout), _layout(x, layout), _is_single(x))


def velocity(x: np.ndarray) -> np.ndarray:
    """Frame differences along axis 0; frame 0 is zero."""
    out = np.zeros_like(x)
    out[1:] = x[1:] - x[:-1]
    return out


def velocity_feature(clip, layout: str = "intra") -> BranchInput:
    x = _coords(clip)
    return BranchInput(_tag("V", layout), _layout(velocity(x), layout), _is_single(x))


def bones(x: np.ndarray) -> np.ndarray:
    """Vector from each joint's parent to the joint; zero at the root."""
    return x - x[..., _PARENT, :]


def bone_feature(clip) -> BranchInput:
    x = _coords(clip)
    return BranchInput("B1", _layout(bones(x), "intra"), _is_single(x))


def relative_distances(x: np.ndarray) -> np.ndarray:
    """(T, 2, 25, 6): distance from every joint to the other body's representative joints."""
    reps = x[:, ::-1][:, :, list(REPRESENTATIVE_JOINTS)]
    return np.linalg.norm(x[:, :, :, None, :] - reps[:, :, None, :, :], axis=-1)


def relative_distance_feature(clip) -> BranchInput:
    x = _coords(clip)
    return BranchInput("B2", _layout(relative_distances(x), "inter"), _is_single(x))


def branch_feature(clip, tag: str) -> BranchInput:
    if tag == "B1":
        return bone_feature(clip)
    if tag == "B2":
        return relative_distance_feature(clip)
    layout = "intra" if tag.endswith("1") else "inter"
    if tag[0] == "J":
        return joint_feature(clip, layout)
    if tag[0] == "V":
        return velocity_feature(clip, layout)
    raise ValueError(f"unknown branch tag {tag!r}")


def assemble_stream_input(branches) -> np.ndarray:
    """Stack branches on a new leading axis: (I, C, T, V, M)."""
    branches = list(branches)
    tags = tuple(b.tag for b in branches)
    if tags not in STREAM_BRANCHES.values():
        raise ValueError(f"branch combination {tags} is not a stream")
    shapes = {b.shape for b in branches}
    if len(shapes) != 1:
        raise ValueError(f"branches disagree on shape: {sorted(shapes)}")
    return np.stack([b.values for b in branches])


def stream_inputs(clip, streams=STREAM_NAMES) -> dict[str, np.ndarray]:
    return {s: assemble_stream_input(branch_feature(clip, t) for t in STREAM_BRANCHES[s]) for s in streams}


def batch_stream_inputs(coords: np.ndarray, streams=STREAM_NAMES, dtype=np.float32) -> dict[str, np.ndarray]:
    """Vectorized features for a batch ``coords[n, t, m, v, :]`` -> {stream: (N, I, C, T, V, M)}."""
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim != 5 or x.shape[2] != 2 or x.shape[3:] != (NUM_JOINTS, 3):
        raise ValueError(f"expected (N, T, 2, {NUM_JOINTS}, 3), got {x.shape}")
    n, t = x.shape[:2]

    def intra(a):  # (N, T, 2, 25, C) -> (N, C, T, 25, 2)
        return a.transpose(0, 4, 1, 3, 2)

    def inter(a):  # -> (N, C, T, 50, 1)
        return a.reshape(n, t, 2 * NUM_JOINTS, -1).transpose(0, 3, 1, 2)[..., None]

    vel = np.zeros_like(x)
    vel[:, 1:] = x[:, 1:] - x[:, :-1]
    out = {}
    for s in streams:
        if s == "A":
            out[s] = np.stack([intra(x), intra(vel), intra(x - x[:, :, :, _PARENT])], axis=1)
        elif s == "B":
            out[s] = np.stack([inter(x), inter(vel)], axis=1)
        elif s == "C":
            reps = x[:, :, ::-1][:, :, :, list(REPRESENTATIVE_JOINTS)]
            d = np.linalg.norm(x[:, :, :, :, None] - reps[:, :, :, None], axis=-1)
            out[s] = inter(d)[:, None]
        else:
            raise ValueError(f"unknown stream {s!r}")
        out[s] = np.ascontiguousarray(out[s], dtype=dtype)
    return out
