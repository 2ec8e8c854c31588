import numpy as np
import pytest

from egcn_iig import tensor as T
from egcn_iig.features import batch_stream_inputs
from egcn_iig.model import (
    B0_MAIN_BLOCKS,
    BlockSpec,
    InteractionModel,
    ModelConfig,
    fuse_probabilities,
    model_name,
    predict,
    round_channels,
    scale_config,
    tiny_config,
)
from egcn_iig.skeleton import generate_synthetic_clip, prepare_clip


def small_config(**kw):
    return tiny_config(num_classes=4, frames=12, **kw)


def inputs(rng, config, n=2):
    coords = rng.normal(size=(n, config.frames, 2, 25, 3))
    return batch_stream_inputs(coords, config.streams, dtype=np.float64)


def test_scaling_constants_and_identity():
    base = ModelConfig()
    assert base.alpha**2 * base.beta == pytest.approx(1.944)
    assert scale_config(base, 0) == base
    assert base.alpha**4 == pytest.approx(2.0736) and base.beta**4 == pytest.approx(3.3215, abs=1e-4)
    with pytest.raises(ValueError):
        scale_config(base, -1)
    with pytest.raises(ValueError):
        scale_config(scale_config(base, 1), 1)


def test_scaled_widths_and_depths():
    b4 = scale_config(ModelConfig(), 4)
    for old, new in zip(B0_MAIN_BLOCKS, b4.main_blocks):
        assert new.channels == round_channels(old.channels * 1.2**4) and new.channels % 4 == 0
        assert new.temporal_layers == max(1, round(old.temporal_layers * 1.35**4))
    assert round_channels(1) == 4 and round_channels(10) == 12 and round_channels(9.9) == 8


def test_model_names():
    assert model_name(ModelConfig()) == "3s-EGCN-IIG (B0)"
    assert scale_config(ModelConfig(), 4).name == "3s-EGCN-IIG (B4)"


def test_stream_structure():
    model = InteractionModel(ModelConfig())
    a, c = model.stream("A"), model.stream("C")
    assert len(a.branches) == 3 and len(model.stream("B").branches) == 2 and len(c.branches) == 1
    assert a.fusion_channels == 3 * a.branches[0].c_out
    assert c.fusion_channels == c.branches[0].c_out


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(streams=())
    with pytest.raises(ValueError):
        ModelConfig(streams=("A", "D"))
    with pytest.raises(ValueError):
        ModelConfig(temporal_kernel=7)
    with pytest.raises(ValueError):
        BlockSpec(16, stride=3)
    cfg = scale_config(ModelConfig(num_classes=11, temporal_kernel=9), 2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})


def test_forward_shapes_and_probabilities(rng):
    cfg = small_config()
    model = InteractionModel(cfg)
    logits = model(inputs(rng, cfg))
    assert set(logits) == {"A", "B", "C"} and all(v.shape == (2, 4) for v in logits.values())
    probs = model.probabilities(inputs(rng, cfg))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_fusion_examples():
    p = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(fuse_probabilities([p, p, p]), p)
    a, b = np.eye(3)[0], np.eye(3)[1]
    assert np.argmax(fuse_probabilities([a, a, b])) == 0
    rng = np.random.default_rng(0)
    ps = [rng.dirichlet(np.ones(5)) for _ in range(3)]
    np.testing.assert_allclose(fuse_probabilities(ps).sum(), 1.0, atol=1e-9)
    np.testing.assert_allclose(fuse_probabilities(ps), fuse_probabilities(ps[::-1]), atol=1e-15)
    with pytest.raises(ValueError):
        fuse_probabilities([])


def test_streams_are_disjoint(rng):
    cfg = small_config()
    model = InteractionModel(cfg).eval()
    x = inputs(rng, cfg)
    with T.no_grad():
        before = {k: v.data for k, v in model(x).items()}
        for p in model.stream("B").parameters():
            p.data = np.zeros_like(p.data)
        after = {k: v.data for k, v in model(x).items()}
    assert np.array_equal(before["A"], after["A"]) and np.array_equal(before["C"], after["C"])
    assert not np.array_equal(before["B"], after["B"])
    ids = [{id(p) for p in model.stream(s).parameters()} for s in "ABC"]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_zero_relative_distance_input_gives_classifier_bias(rng):
    cfg = small_config(streams=("C",))
    model = InteractionModel(cfg).eval()
    zero = {"C": np.zeros((1, 1, 6, cfg.frames, 50, 1))}
    with T.no_grad():
        out = model(zero)["C"].data[0]
    np.testing.assert_allclose(out, model.stream("C").fc.bias.data, atol=1e-15)


def test_predict_deterministic_and_lengths():
    clip = prepare_clip(generate_synthetic_clip(0, seed=1))
    for classes in (26, 11):
        model = InteractionModel(tiny_config(num_classes=classes))
        k1, p1 = predict(clip, model)
        k2, p2 = predict(clip, model)
        assert len(p1) == classes and k1 == k2 and np.array_equal(p1, p2)
        assert model.training  # mode restored
    with pytest.raises(ValueError):
        predict(generate_synthetic_clip(0, seed=1, frames=120), model)


def test_stream_input_shape_is_checked(rng):
    model = InteractionModel(small_config())
    with pytest.raises(T.ShapeError):
        model.stream("A")(np.zeros((1, 2, 3, 12, 25, 2)))
    with pytest.raises(KeyError):
        model({"A": np.zeros((1, 3, 3, 12, 25, 2))})


def test_float32_model(rng):
    cfg = small_config()
    model = InteractionModel(cfg, dtype=np.float32)
    out = model(inputs(rng, cfg))
    assert all(v.dtype == np.float32 for v in out.values())


def test_seeded_initialization_is_reproducible():
    a = InteractionModel(small_config(), seed=3).state_dict()
    b = InteractionModel(small_config(), seed=3).state_dict()
    c = InteractionModel(small_config(), seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
