"""Two-person skeleton clips: NTU text parsing, alignment, body pairing, synthesis."""

from __future__ import annotations

import io
import logging
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import NUM_JOINTS, REPRESENTATIVE_JOINTS, canonical_pose

log = logging.getLogger(__name__)

ALIGNED_FRAMES = 150
MAX_BODIES = 2


class SkeletonFormatError(ValueError):
    """Malformed skeleton text; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class SkeletonClip:
    """Joint coordinates ``coords[t, m, v, :]`` for up to two tracked bodies.

    ``present[t, m]`` records whether body ``m`` was observed at frame ``t``;
    unobserved slots hold zeros.
    """

    coords: np.ndarray
    present: np.ndarray
    tracking_ids: tuple[int, ...]
    label: int = -1
    dropped_bodies: int = 0
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.coords.ndim != 4 or self.coords.shape[2:] != (NUM_JOINTS, 3):
            raise ValueError(f"coords must be (T, M, {NUM_JOINTS}, 3), got {self.coords.shape}")
        if self.present.shape != self.coords.shape[:2]:
            raise ValueError("present mask does not match coords")
        if len(self.tracking_ids) != self.coords.shape[1]:
            raise ValueError("one tracking id per body slot is required")

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def bodies(self) -> int:
        return self.coords.shape[1]

    @property
    def single_person(self) -> bool:
        return self.bodies < 2 or not np.any(self.coords[:, 1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SkeletonClip):
            return NotImplemented
        return (
            self.coords.shape == other.coords.shape
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.present, other.present)
            and self.tracking_ids == other.tracking_ids
            and self.label == other.label
        )


_ACTION_RE = re.compile(r"A(\d{3})")


def label_from_name(name: str) -> int:
    """NTU file names carry the action number as ``A###``; returns it 0-based, or -1."""
    m = _ACTION_RE.search(os.path.basename(name))
    return int(m.group(1)) - 1 if m else -1


def parse_skeleton_file(text, name: str = "") -> SkeletonClip:
    """Parse the NTU RGB+D ``.skeleton`` text layout.

    Bodies are keyed by tracking id (the first metadata field). Only the first
    two distinct ids in order of appearance are kept; the number of dropped
    tracks is recorded in ``dropped_bodies``.
    """
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("ascii", errors="replace")
    lines = text.splitlines()
    pos = 0

    def next_line() -> tuple[int, str]:
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise SkeletonFormatError("unexpected end of file", pos + 1)
        pos += 1
        return pos, lines[pos - 1]

    def parse_int(lineno: int, s: str, what: str) -> int:
        try:
            return int(s.split()[0])
        except (ValueError, IndexError):
            raise SkeletonFormatError(f"expected {what}, got {s.strip()!r}", lineno) from None

    lineno, s = next_line()
    n_frames = parse_int(lineno, s, "frame count")
    if n_frames < 0:
        raise SkeletonFormatError("negative frame count", lineno)
    ids: list[int] = []
    dropped: set[int] = set()
    coords = np.zeros((n_frames, MAX_BODIES, NUM_JOINTS, 3))
    present = np.zeros((n_frames, MAX_BODIES), dtype=bool)
    for t in range(n_frames):
        lineno, s = next_line()
        n_bodies = parse_int(lineno, s, "body count")
        for _ in range(n_bodies):
            lineno, s = next_line()
            fields = s.split()
            if not fields:
                raise SkeletonFormatError("missing body metadata", lineno)
            try:
                body_id = int(fields[0])
            except ValueError:
                try:
                    body_id = int(float(fields[0]))
                except ValueError:
                    raise SkeletonFormatError(f"bad tracking id {fields[0]!r}", lineno) from None
            lineno, s = next_line()
            n_joints = parse_int(lineno, s, "joint count")
            if n_joints != NUM_JOINTS:
                raise SkeletonFormatError(f"joint count {n_joints} != {NUM_JOINTS}", lineno)
            joints = np.empty((NUM_JOINTS, 3))
            for v in range(NUM_JOINTS):
                lineno, s = next_line()
                parts = s.split()
                if len(parts) < 3:
                    raise SkeletonFormatError("joint line has fewer than 3 fields", lineno)
                try:
                    joints[v] = [float(p) for p in parts[:3]]
                except ValueError:
                    raise SkeletonFormatError(f"non-numeric coordinate in {s.strip()!r}", lineno) from None
                if not np.all(np.isfinite(joints[v])):
                    raise SkeletonFormatError("non-finite coordinate", lineno)
            if body_id not in ids:
                if len(ids) >= MAX_BODIES:
                    dropped.add(body_id)
                    continue
                ids.append(body_id)
            m = ids.index(body_id)
            coords[t, m] = joints
            present[t, m] = True
    if dropped:
        log.warning("%s: dropped %d body track(s) beyond the first %d", name or "clip", len(dropped), MAX_BODIES)
    m = len(ids)
    return SkeletonClip(
        coords[:, :m], present[:, :m], tuple(ids),
        label=label_from_name(name), dropped_bodies=len(dropped), name=os.path.basename(name),
    )


def read_skeleton_file(path: str | os.PathLike) -> SkeletonClip:
    with open(path, "rb") as fh:
        return parse_skeleton_file(fh.read(), name=str(path))


def serialize_skeleton(clip: SkeletonClip) -> str:
    """Write a clip in the NTU text layout; only observed bodies are emitted per frame."""
    out = io.StringIO()
    out.write(f"{clip.frames}\n")
    for t in range(clip.frames):
        bodies = [m for m in range(clip.bodies) if clip.present[t, m]]
        out.write(f"{len(bodies)}\n")
        for m in bodies:
            out.write(f"{clip.tracking_ids[m]} 0 0 0 0 0 0 0 0 2\n{NUM_JOINTS}\n")
            for x, y, z in clip.coords[t, m].tolist():
                out.write(f"{x!r} {y!r} {z!r} 0 0 0 0 0 0 0 0 2\n")
    return out.getvalue()


def align_clip_length(clip: SkeletonClip, target: int = ALIGNED_FRAMES) -> SkeletonClip:
    """Zero-pad short clips at the end; center-crop long ones."""
    t = clip.frames
    if t < 1:
        raise ValueError("cannot align an empty clip")
    if t == target:
        return clip
    if t > target:
        start = (t - target) // 2
        return replace(clip, coords=clip.coords[start : start + target].copy(), present=clip.present[start : start + target].copy())
    coords = np.zeros((target,) + clip.coords.shape[1:])
    present = np.zeros((target, clip.bodies), dtype=bool)
    coords[:t] = clip.coords
    present[:t] = clip.present
    return replace(clip, coords=coords, present=present, meta={**clip.meta, "valid_frames": t})


def motion_energy(coords: np.ndarray, present: np.ndarray) -> float:
    """Sum over frames and joints of displacement magnitudes between observed frames."""
    both = present[1:] & present[:-1]
    step = np.linalg.norm(coords[1:] - coords[:-1], axis=-1).sum(axis=-1)
    return float(step[both].sum())


def select_two_bodies(clip: SkeletonClip) -> SkeletonClip:
    """Exactly two body slots, most active first; an absent second body is all zeros."""
    if clip.bodies < 1:
        raise ValueError("clip has no body tracks")
    energy = [motion_energy(clip.coords[:, m], clip.present[:, m]) for m in range(clip.bodies)]
    order = sorted(range(clip.bodies), key=lambda m: (-energy[m], clip.tracking_ids[m]))[:MAX_BODIES]
    coords = np.zeros((clip.frames, MAX_BODIES, NUM_JOINTS, 3))
    present = np.zeros((clip.frames, MAX_BODIES), dtype=bool)
    ids = [-1] * MAX_BODIES
    for slot, m in enumerate(order):
        coords[:, slot] = clip.coords[:, m]
        present[:, slot] = clip.present[:, m]
        ids[slot] = clip.tracking_ids[m]
    return replace(clip, coords=coords, present=present, tracking_ids=tuple(ids))


def prepare_clip(clip: SkeletonClip, frames: int = ALIGNED_FRAMES) -> SkeletonClip:
    return align_clip_length(select_two_bodies(clip), frames)


# synthetic interactions

CATALOGS = {
    # differ mainly in how the inter-body distance and bearing evolve
    "motion": ("approach", "retreat", "circle", "sway"),
    # identical per-body motion; only the relative placement differs
    "relative": ("facing", "side_by_side", "back_to_back", "tandem"),
}

_UP = np.array([0.0, 1.0, 0.0])


def _animate_body(rng: np.random.Generator, frames: int, fps: float = 30.0, walk_speed=None) -> np.ndarray:
    """Body-frame joint trajectories (frames, 25, 3): arm swings, breathing, gait bob."""
    pose = canonical_pose()
    pose = pose * rng.uniform(0.92, 1.08)
    t = np.arange(frames) / fps
    out = np.repeat(pose[None], frames, axis=0)
    arm_l = (4, 5, 6, 7, 21, 22)
    arm_r = (8, 9, 10, 11, 23, 24)
    for side, joints, phase in ((-1, arm_l, rng.uniform(0, 2 * np.pi)), (1, arm_r, rng.uniform(0, 2 * np.pi))):
        freq = rng.uniform(0.3, 1.2)
        amp = rng.uniform(0.05, 0.25)
        swing = amp * np.sin(2 * np.pi * freq * t + phase)
        lift = 0.5 * amp * (1 - np.cos(2 * np.pi * freq * t + phase))
        for rank, j in enumerate(joints):
            w = min(1.0, 0.3 + 0.25 * rank)
            out[:, j, 2] += w * swing
            out[:, j, 1] += w * lift
    if walk_speed is not None:
        gait = np.sin(2 * np.pi * 1.8 * t)
        for j, sgn in ((13, 1), (14, 1), (15, 1), (17, -1), (18, -1), (19, -1)):
            out[:, j, 2] += sgn * 0.12 * gait * np.clip(np.abs(walk_speed), 0, 1.5)
        out[:, :, 1] += 0.015 * np.abs(gait)[:, None]
    out += rng.normal(0.0, 0.006, size=out.shape)
    return out


def _place(body: np.ndarray, yaw: np.ndarray, root: np.ndarray) -> np.ndarray:
    """Rotate body-frame joints by per-frame yaw and translate to per-frame root positions."""
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    x, y, z = body[..., 0], body[..., 1], body[..., 2]
    world = np.stack([c * x + s * z, y, -s * x + c * z], axis=-1)
    return world + root[:, None, :]


def generate_synthetic_clip(
    cls: int, seed: int, catalog: str = "motion", frames: int | None = None
) -> SkeletonClip:
    """Deterministic two-person clip for class ``cls`` of ``catalog``."""
    if catalog not in CATALOGS:
        raise ValueError(f"unknown catalog {catalog!r}")
    names = CATALOGS[catalog]
    if not 0 <= cls < len(names):
        raise ValueError(f"unknown class {cls} for catalog {catalog!r} ({len(names)} classes)")
    kind = names[cls]
    rng = np.random.default_rng([seed, cls, len(catalog)])
    n = frames if frames is not None else int(rng.integers(100, ALIGNED_FRAMES + 1))
    s = np.linspace(0.0, 1.0, n)
    heading = rng.uniform(-np.pi, np.pi)
    mid = np.array([rng.uniform(-0.6, 0.6), 0.0, rng.uniform(2.6, 3.6)])
    axis = np.array([np.sin(heading), 0.0, np.cos(heading)])
    side = np.cross(_UP, axis)
    hip_height = 0.9

    if catalog == "motion":
        if kind in ("approach", "retreat"):
            d0, d1 = rng.uniform(2.2, 2.9), rng.uniform(0.6, 0.9)
            ease = 0.5 - 0.5 * np.cos(np.pi * s)
            dist = d0 + (d1 - d0) * ease if kind == "approach" else d1 + (d0 - d1) * ease
            bearing = np.zeros(n)
            speed = np.gradient(dist) * 30.0
        elif kind == "circle":
            dist = np.full(n, rng.uniform(1.1, 1.6))
            bearing = rng.choice([-1, 1]) * rng.uniform(1.2, 2.4) * s
            speed = np.full(n, 0.6)
        else:  # sway
            dist = np.full(n, rng.uniform(1.1, 1.6))
            bearing = np.zeros(n)
            speed = None
        offset_a = -0.5 * dist[:, None] * axis
        offset_b = 0.5 * dist[:, None] * axis
        if kind == "circle":
            ca, sa = np.cos(bearing)[:, None], np.sin(bearing)[:, None]
            rot = ca * axis + sa * side
            offset_a, offset_b = -0.5 * dist[:, None] * rot, 0.5 * dist[:, None] * rot
        if kind == "sway":
            freq, amp = rng.uniform(0.6, 1.2), rng.uniform(0.3, 0.5)
            lateral = amp * np.sin(2 * np.pi * freq * s * n / 30.0 + rng.uniform(0, 2 * np.pi))
            offset_b = offset_b + lateral[:, None] * side
        root_a = mid + offset_a + hip_height * _UP
        root_b = mid + offset_b + hip_height * _UP
        face_a = np.arctan2((root_b - root_a)[:, 0], (root_b - root_a)[:, 2])
        face_b = face_a + np.pi
        walk = None if speed is None else speed
        body_a = _animate_body(rng, n, walk_speed=walk)
        body_b = _animate_body(rng, n, walk_speed=walk)
    else:
        dist = rng.uniform(0.8, 1.2)
        face = np.full(n, heading)
        if kind == "facing":
            off_a, off_b, face_a, face_b = -0.5 * dist * axis, 0.5 * dist * axis, face, face + np.pi
        elif kind == "back_to_back":
            off_a, off_b, face_a, face_b = -0.5 * dist * axis, 0.5 * dist * axis, face + np.pi, face
        elif kind == "side_by_side":
            off_a, off_b, face_a, face_b = -0.5 * dist * side, 0.5 * dist * side, face, face
        else:  # tandem
            off_a, off_b, face_a, face_b = -0.5 * dist * axis, 0.5 * dist * axis, face, face
        drift = np.cumsum(rng.normal(0.0, 0.004, size=(n, 3)) * np.array([1.0, 0.0, 1.0]), axis=0)
        root_a = mid + off_a + hip_height * _UP + drift
        root_b = mid + off_b + hip_height * _UP + drift
        body_a = _animate_body(rng, n)
        body_b = _animate_body(rng, n)

    coords = np.stack([_place(body_a, face_a, root_a), _place(body_b, face_b, root_b)], axis=1)
    present = np.ones((n, 2), dtype=bool)
    ids = (int(rng.integers(1, 10**9)), int(rng.integers(1, 10**9)))
    if ids[0] == ids[1]:
        ids = (ids[0], ids[0] + 1)
    return SkeletonClip(coords, present, ids, label=cls, name=synthetic_name(cls, seed), meta={"catalog": catalog, "kind": kind})


def synthetic_name(cls: int, seed: int) -> str:
    return f"S000C000P{seed % 1000:03d}R{seed // 1000:03d}A{cls + 1:03d}_{seed:06d}.skeleton"


def torso_distance(clip: SkeletonClip) -> np.ndarray:
    torso = REPRESENTATIVE_JOINTS[1]
    return np.linalg.norm(clip.coords[:, 0, torso] - clip.coords[:, 1, torso], axis=-1)


# preprocessed corpus file

CORPUS_MAGIC = "EGCN-CORPUS"
CORPUS_VERSION = 1
LABEL_WIDTH = 8


@dataclass
class Corpus:
    """Aligned, paired clips ``coords[n, t, m, v, :]`` with integer labels."""

    coords: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def frames(self) -> int:
        return self.coords.shape[1]

    def subset(self, index) -> "Corpus":
        return Corpus(self.coords[index], self.labels[index])

    @classmethod
    def from_clips(cls, clips) -> "Corpus":
        clips = list(clips)
        if not clips:
            raise ValueError("empty corpus")
        return cls(np.stack([c.coords for c in clips]).astype(np.float32), np.array([c.label for c in clips], dtype=np.int64))


def write_corpus(path: str | os.PathLike, corpus: Corpus) -> None:
    n, t, m, v, _ = corpus.coords.shape
    with open(path, "wb") as fh:
        fh.write(f"{CORPUS_MAGIC} {CORPUS_VERSION} {n} {t} {v} {m} {LABEL_WIDTH}\n".encode())
        for i in range(n):
            fh.write(np.ascontiguousarray(corpus.coords[i], dtype="<f4").tobytes())
            fh.write(np.asarray(corpus.labels[i], dtype="<i8").tobytes())


def read_corpus(path: str | os.PathLike) -> Corpus:
    with open(path, "rb") as fh:
        header = fh.readline().decode(errors="replace").split()
        if len(header) != 7 or header[0] != CORPUS_MAGIC:
            raise SkeletonFormatError("not a corpus file", 1)
        n, t, v, m, width = (int(x) for x in header[2:])
        if width != LABEL_WIDTH:
            raise SkeletonFormatError(f"unsupported label width {width}", 1)
        block = t * m * v * 3
        coords = np.empty((n, t, m, v, 3), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        for i in range(n):
            raw = fh.read(block * 4)
            lab = fh.read(width)
            if len(raw) != block * 4 or len(lab) != width:
                raise SkeletonFormatError(f"truncated corpus at clip {i}")
            coords[i] = np.frombuffer(raw, dtype="<f4").reshape(t, m, v, 3)
            labels[i] = np.frombuffer(lab, dtype="<i8")[0]
    return Corpus(coords, labels)


def synthetic_corpus(classes: int = 4, clips_per_class: int = 100, seed: int = 0, catalog: str = "motion") -> Corpus:
    clips = [
        prepare_clip(generate_synthetic_clip(c, seed * 100_003 + k, catalog))
        for k in range(clips_per_class)
        for c in range(classes)
    ]
    return Corpus.from_clips(clips)
