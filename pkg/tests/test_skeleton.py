import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egcn_iig.skeleton import (
    CATALOGS,
    Corpus,
    SkeletonClip,
    SkeletonFormatError,
    align_clip_length,
    generate_synthetic_clip,
    label_from_name,
    parse_skeleton_file,
    prepare_clip,
    read_corpus,
    select_two_bodies,
    serialize_skeleton,
    synthetic_corpus,
    torso_distance,
    write_corpus,
)


def body_lines(body_id, value=0.0):
    return [f"{body_id} 0 0 0 0 0 0 0 0 2", "25"] + [f"{value} {value} {value} 0 0 0 0 0 0 0 0 2"] * 25


def skeleton_text(frames):
    """``frames`` is a list of lists of body ids."""
    lines = [str(len(frames))]
    for ids in frames:
        lines.append(str(len(ids)))
        for i in ids:
            lines += body_lines(i)
    return "\n".join(lines) + "\n"


def test_parse_single_zero_frame():
    clip = parse_skeleton_file(skeleton_text([[7]]))
    assert clip.frames == 1 and clip.bodies == 1
    assert not clip.coords.any() and clip.tracking_ids == (7,)


def test_parse_two_bodies_two_frames():
    clip = parse_skeleton_file(skeleton_text([[1, 2], [1, 2]]))
    assert clip.coords.shape == (2, 2, 25, 3) and clip.present.all()


def test_parse_drops_third_body():
    clip = parse_skeleton_file(skeleton_text([[1, 2, 3]]))
    assert clip.bodies == 2 and clip.dropped_bodies == 1 and clip.tracking_ids == (1, 2)


def test_parse_accepts_bytes_and_label_from_name():
    clip = parse_skeleton_file(skeleton_text([[1]]).encode(), name="S001C001P001R001A050.skeleton")
    assert clip.label == 49
    assert label_from_name("no_label.skeleton") == -1


@pytest.mark.parametrize(
    "mutate,line",
    [
        (lambda ls: ls[:10], 11),  # truncated
        (lambda ls: ls[:4] + ["0.1 abc 0.3"] + ls[5:], 5),  # non-numeric coordinate
        (lambda ls: ls[:3] + ["24"] + ls[4:], 4),  # joint count
        (lambda ls: ["x"] + ls[1:], 1),  # frame count
    ],
)
def test_parse_errors_carry_line_numbers(mutate, line):
    lines = skeleton_text([[1]]).splitlines()
    with pytest.raises(SkeletonFormatError) as err:
        parse_skeleton_file("\n".join(mutate(lines)))
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


@pytest.mark.parametrize("catalog", sorted(CATALOGS))
def test_serialize_round_trip(catalog):
    for cls in range(len(CATALOGS[catalog])):
        clip = generate_synthetic_clip(cls, seed=3, catalog=catalog)
        back = parse_skeleton_file(serialize_skeleton(clip), name=clip.name)
        assert back == clip


def test_round_trip_with_missing_body():
    clip = parse_skeleton_file(skeleton_text([[1, 2], [2], [1, 2]]))
    assert not clip.present[1, 0]
    assert parse_skeleton_file(serialize_skeleton(clip)) == clip


def make_clip(t, bodies=2, seed=0):
    rng = np.random.default_rng(seed)
    return SkeletonClip(rng.normal(size=(t, bodies, 25, 3)), np.ones((t, bodies), bool), tuple(range(1, bodies + 1)))


def test_align_identity_pad_crop():
    c150 = make_clip(150)
    assert align_clip_length(c150) is c150
    c100 = make_clip(100)
    out = align_clip_length(c100)
    assert out.frames == 150
    np.testing.assert_array_equal(out.coords[:100], c100.coords)
    assert not out.coords[100:].any() and not out.present[100:].any()
    c300 = make_clip(300)
    np.testing.assert_array_equal(align_clip_length(c300).coords, c300.coords[75:225])
    with pytest.raises(ValueError):
        align_clip_length(make_clip(0))


@given(t=st.integers(1, 320))
def test_align_idempotent(t):
    once = align_clip_length(make_clip(t, seed=t))
    assert once.frames == 150
    assert align_clip_length(once) == once


def test_select_orders_by_motion_energy():
    clip = make_clip(20)
    clip.coords[:, 0] = clip.coords[0, 0]  # body 0 static
    out = select_two_bodies(clip)
    assert out.tracking_ids == (2, 1)
    np.testing.assert_array_equal(out.coords[:, 0], clip.coords[:, 1])


def test_select_one_body_pads_zeros():
    out = select_two_bodies(make_clip(10, bodies=1))
    assert out.bodies == 2 and not out.coords[:, 1].any() and out.single_person


def test_select_tie_breaks_on_tracking_id():
    coords = np.zeros((5, 2, 25, 3))
    clip = SkeletonClip(coords, np.ones((5, 2), bool), (9, 4))
    assert select_two_bodies(clip).tracking_ids == (4, 9)


@given(bodies=st.integers(1, 2), seed=st.integers(0, 100))
def test_select_deterministic_and_at_most_two(bodies, seed):
    clip = make_clip(8, bodies, seed)
    a, b = select_two_bodies(clip), select_two_bodies(clip)
    assert a.bodies == 2 and a == b


def test_synthetic_determinism_and_variation():
    a = generate_synthetic_clip(1, seed=5)
    assert a == generate_synthetic_clip(1, seed=5)
    b = generate_synthetic_clip(1, seed=6)
    assert not np.array_equal(a.coords[: min(a.frames, b.frames)], b.coords[: min(a.frames, b.frames)])
    assert a.label == b.label == 1


def test_approach_closes_distance():
    for seed in range(10):
        d = torso_distance(generate_synthetic_clip(CATALOGS["motion"].index("approach"), seed))
        assert d[-1] < d[0]


def test_synthetic_rejects_unknown_class():
    with pytest.raises(ValueError):
        generate_synthetic_clip(4, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_clip(0, seed=0, catalog="dance")


def test_synthetic_clips_are_finite_and_plausible():
    clip = prepare_clip(generate_synthetic_clip(2, seed=1))
    assert clip.frames == 150 and np.all(np.isfinite(clip.coords))
    valid = clip.meta.get("valid_frames", 150)
    from egcn_iig.features import bones

    lengths = np.linalg.norm(bones(clip.coords[:valid]), axis=-1)
    lengths = np.delete(lengths, 20, axis=-1)  # the root has no bone
    assert lengths.min() > 0.01 and lengths.max() < 0.8


def test_corpus_file_round_trip(tmp_path):
    corpus = synthetic_corpus(classes=2, clips_per_class=3, seed=1)
    path = tmp_path / "c.bin"
    write_corpus(path, corpus)
    back = read_corpus(path)
    np.testing.assert_array_equal(back.coords, corpus.coords)
    np.testing.assert_array_equal(back.labels, corpus.labels)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(SkeletonFormatError):
        read_corpus(path)
    path.write_bytes(b"garbage\n")
    with pytest.raises(SkeletonFormatError):
        read_corpus(path)


def test_corpus_balanced_labels():
    corpus = synthetic_corpus(classes=4, clips_per_class=2)
    assert isinstance(corpus, Corpus) and sorted(np.bincount(corpus.labels)) == [2, 2, 2, 2]
    assert corpus.coords.shape == (8, 150, 2, 25, 3)
