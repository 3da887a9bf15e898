import numpy as np
import pytest

from enerf import diffcore as dc
from enerf.config import Variant
from enerf.diffcore import ParamStore
from enerf.exceptions import FieldError
from enerf.field import (
    ProposalDensity,
    build_variant,
    channel_names,
    copy_decoder,
    joint_color,
    joint_color_test1,
    pretrain_decoders,
)
from enerf.scenegen import generate_dataset, preset_scene

from .conftest import tiny_run_config


def unit_directions(rng, count: int) -> np.ndarray:
    d = rng.normal(size=(count, 3))
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


@pytest.mark.parametrize("variant", Variant.names())
def test_variant_output_shapes(variant, rng):
    field = build_variant(tiny_run_config(variant).field, n_images=3)
    out = field.forward(rng.uniform(-3, 3, size=(2, 5, 3)), unit_directions(rng, 2), np.array([0, 2]))

    assert out.sigma.shape == (2, 5)
    assert np.all(out.sigma.data > 0)
    assert out.c_fine.shape[0] == 2 and out.c_fine.shape[-1] == 3
    if variant == "no_multiperf":
        assert field.channels == ("fine",)
        assert out.c_mid is None and out.c_coarse is None
    else:
        assert field.channels == ("fine", "mid", "coarse")
        assert out.c_coarse.shape == (2, 5, 3)
        assert out.y.shape == (2, 5, 1)
        for name in field.channels:
            values = out.channel(name).data
            assert np.all((values >= 0) & (values <= 1))


def test_joint_color_endpoints():
    c_mid = np.array([0.9, 0.1, 0.3])
    c_coarse = np.array([0.2, 0.7, 0.5])
    np.testing.assert_array_equal(joint_color(1.0, c_mid, c_coarse), c_mid)
    np.testing.assert_array_equal(joint_color(0.0, c_mid, c_coarse), c_coarse)
    # With x = 1 - y both blends agree.
    np.testing.assert_allclose(joint_color_test1(0.75, 0.25, c_mid, c_coarse), joint_color(0.25, c_mid, c_coarse))


def test_fine_is_blend_of_mid_and_coarse(rng):
    field = build_variant(tiny_run_config().field, n_images=2)
    out = field.forward(rng.uniform(-1, 1, size=(3, 4, 3)), unit_directions(rng, 3))
    expected = out.y.data * out.c_mid.data + (1 - out.y.data) * out.c_coarse.data
    np.testing.assert_allclose(out.c_fine.data, expected, rtol=1e-5)


def test_mid_depends_only_on_ray_without_spatial_features(rng):
    field = build_variant(tiny_run_config().field, n_images=2)
    out = field.forward(rng.uniform(-1, 1, size=(3, 4, 3)), unit_directions(rng, 3))
    assert out.c_mid.shape == (3, 1, 3)

    cfg = tiny_run_config(field={"mid_uses_spatial_features": True}).field
    field = build_variant(cfg, n_images=2)
    out = field.forward(rng.uniform(-1, 1, size=(3, 4, 3)), unit_directions(rng, 3))
    assert out.c_mid.shape == (3, 4, 3)


def test_mid_is_identical_for_every_position_on_a_ray(field64, rng):
    field = field64("enhance", n_images=2)
    positions = rng.uniform(-3, 3, size=(100, 1, 3))
    directions = np.tile(unit_directions(rng, 1), (100, 1))
    out = field.forward(positions, directions, np.zeros(100, dtype=np.int64))
    np.testing.assert_allclose(out.c_mid.data, np.broadcast_to(out.c_mid.data[:1], out.c_mid.shape), atol=1e-12)
    assert np.ptp(out.sigma.data) > 0


def test_no_pretrained_equals_enhance_with_silent_decoders(field64, rng):
    enhance = field64("enhance", n_images=2)
    plain = field64("no_pretrained", n_images=2)
    for mlp in (enhance.decoder.coarse, enhance.decoder.fine):
        mlp.weights[-1].data[...] = 0.0
        mlp.biases[-1].data[...] = 0.0

    position_dim = enhance.hash_config.output_dim
    direction_dim = enhance.direction_level**2
    width = enhance.config.decoder_features
    for name in plain.store.names("field."):
        values = enhance.store[name].data
        if name == "field.spatial.0.weight":
            values = values[:position_dim]
        elif name == "field.directional.0.weight":
            values = np.concatenate([values[:direction_dim], values[direction_dim + width :]])
        plain.store[name].data[...] = values

    positions = rng.uniform(-3, 3, size=(4, 5, 3))
    directions = unit_directions(rng, 4)
    appearance = np.array([0, 1, 1, 0])
    expected = enhance.forward(positions, directions, appearance)
    actual = plain.forward(positions, directions, appearance)
    for name in ("sigma", "c_fine", "c_mid", "c_coarse"):
        np.testing.assert_allclose(getattr(actual, name).data, getattr(expected, name).data, rtol=1e-10, atol=1e-12)


def test_unknown_variant():
    cfg = tiny_run_config().field.model_copy(update={"variant": "bogus"})
    with pytest.raises(FieldError, match="bogus"):
        build_variant(cfg, n_images=1)


def test_unknown_appearance_index(rng):
    field = build_variant(tiny_run_config().field, n_images=2)
    with pytest.raises(FieldError, match="appearance"):
        field.forward(rng.uniform(-1, 1, size=(1, 2, 3)), unit_directions(rng, 1), np.array([5]))


def test_decoder_entries_are_frozen():
    field = build_variant(tiny_run_config().field, n_images=2)
    decoder_names = field.store.names("decoder.")
    assert decoder_names
    assert all(field.store.is_frozen(name) for name in decoder_names)
    assert not any(field.store.is_frozen(name) for name in field.store.names("field."))

    test2 = build_variant(tiny_run_config("test2").field, n_images=2)
    assert all(test2.store.is_frozen(name) for name in test2.store.names("field.head."))

    plain = build_variant(tiny_run_config("no_pretrained").field, n_images=2)
    assert plain.decoder is None
    assert not plain.store.names("decoder.")


def test_same_seed_same_parameters():
    a = build_variant(tiny_run_config().field, n_images=2)
    b = build_variant(tiny_run_config().field, n_images=2)
    assert a.store.snapshot() == b.store.snapshot()


def test_forward_gradients(field64, rng):
    field = field64("test1", n_images=2)
    positions = rng.uniform(-2.5, 2.5, size=(2, 3, 3))
    directions = unit_directions(rng, 2)
    scale = rng.normal(size=(2, 3, 3))

    def loss():
        out = field.forward(positions, directions, np.array([0, 1]))
        return dc.sum(out.c_fine * scale) + dc.mean(out.sigma)

    dc.backward(loss())
    for name in ("field.spatial.0.weight", "field.directional.1.bias", "field.appearance"):
        target = field.store[name]
        positions_checked = list(np.ndindex(*target.shape))[:12]
        numeric = dc.numerical_gradient(loss, target, positions_checked)
        analytic = np.array([target.grad[p] for p in positions_checked])
        assert dc.gradients_match(analytic, numeric), name


def test_proposal_density_shape(rng):
    store = ParamStore()
    proposal = ProposalDensity(store, "proposal.0", table_log2=6, resolution=8, hidden=8, rng=rng)
    sigma = proposal.density(rng.uniform(-5, 5, size=(4, 6, 3)))
    assert sigma.shape == (4, 6)
    assert np.all(sigma.data > 0)
    assert proposal.table_name in store


def test_channel_names():
    assert channel_names("fine, coarse") == ["fine", "coarse"]
    with pytest.raises(FieldError, match="blue"):
        channel_names(["fine", "blue"])


def test_pretrain_lowers_reconstruction_loss():
    calibration = generate_dataset(
        preset_scene("calibration"), n_train=3, n_eval=1, resolution=(8, 8), seed=0, n_quadrature=32
    )
    cfg = tiny_run_config(field={"decoder_pretrain_steps": 30}).field
    decoder, report = pretrain_decoders(calibration, steps=30, field_config=cfg, batch_size=64, lr=1e-2)

    assert report.steps == 30
    assert report.final_loss < report.initial_loss
    assert all(decoder.store.is_frozen(name) for name in decoder.store)

    field = build_variant(cfg, n_images=3)
    assert copy_decoder(decoder.store, field.store) == len(decoder.store.names("decoder."))
    assert field.store.snapshot("decoder.") == decoder.store.snapshot("decoder.")
