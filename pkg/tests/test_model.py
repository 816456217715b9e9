import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionshift import dataio as di
from motionshift import diffcore as dc
from motionshift.model import GROUPS, Architecture, ModelError, ModularForecaster, window_style_features
from motionshift.simkit import TrajectoryScene

from conftest import autodiff_grad, central_difference, rel_error

SMALL = dict(z_dim=6, c_dim=4, proj_dim=3, phi_hidden=(8,), psi_hidden=(8,), f_hidden=(5,), g_hidden=(7,),
             h_hidden=(4,))


def small_model(seed=0, input_dim=10, style_dim=12):
    return ModularForecaster(Architecture(input_dim=input_dim, style_dim=style_dim, **SMALL), seed=seed)


def randomize_f(model, rng):
    for p in model.f.parameters():
        p.data = rng.normal(size=p.shape) * 0.3


def test_default_widths_match_design():
    w = Architecture(input_dim=di.input_dim(False)).widths()
    assert w["phi"] == [101, 128, 64]
    assert w["psi"] == [80, 128, 32]
    assert w["f"] == [96, 64, 64]
    assert w["g"] == [64, 128, 24]
    assert w["h"] == [32, 32, 16]


def test_modulator_starts_at_zero(rng):
    model = small_model()
    assert np.all(model.f.weights[-1].data == 0) and np.all(model.f.biases[-1].data == 0)
    x, obs = rng.normal(size=(5, 10)), rng.normal(size=(5, 3, 12))
    y_mod, _ = model.forward(x, obs)
    assert np.array_equal(y_mod.data, model.invariant_forward(x).data)


def test_identical_inputs_identical_z(rng):
    model = small_model()
    x = np.repeat(rng.normal(size=(1, 10)), 3, 0)
    z = model.encode_invariant(x).data
    assert np.array_equal(z[0], z[1]) and np.array_equal(z[0], z[2])
    assert np.array_equal(model.encode_invariant(x).data, z)


def test_zero_params_give_zero_z_and_constant_output(rng):
    model = small_model()
    for g in ("phi", "g"):
        for p in model.nets[g].parameters():
            p.data[:] = 0
    assert np.all(model.encode_invariant(rng.normal(size=(4, 10))).data == 0)
    assert np.all(model.invariant_forward(rng.normal(size=(4, 10))).data == 0)


def test_input_dimension_mismatch(rng):
    with pytest.raises(ModelError):
        small_model().encode_invariant(rng.normal(size=(2, 9)))
    with pytest.raises(ModelError):
        small_model().decode(rng.normal(size=(2, 5)))
    with pytest.raises(ModelError):
        small_model().encode_style(np.zeros((1, 0, 12)))


def test_z_norm_gradient_wrt_inputs(rng):
    model = small_model()
    for net in model.nets.values():
        net.activations = ["tanh"] * (len(net.activations) - 1) + ["identity"]
    x0 = rng.normal(size=(3, 10))
    ana = autodiff_grad(lambda v: dc.sq_l2norm(model.encode_invariant(v)), x0)
    num = central_difference(lambda a: dc.sq_l2norm(model.encode_invariant(a)).item(), x0)
    assert rel_error(ana, num) < 1e-5


def test_decoder_gradient(rng):
    model = small_model()
    model.g.activations = ["tanh", "identity"]
    t0 = rng.normal(size=(2, 6))
    y = rng.normal(size=(2, 12, 2))
    ana = autodiff_grad(lambda v: dc.squared_error(model.decode(v), y), t0)
    num = central_difference(lambda a: dc.squared_error(model.decode(a), y).item(), t0)
    assert rel_error(ana, num) < 1e-5


def test_style_single_and_duplicated_observation(rng):
    model = small_model()
    o = rng.normal(size=(1, 12))
    single = model.encode_style(o[None]).data
    np.testing.assert_array_equal(single, model.psi(o).data)
    np.testing.assert_allclose(model.encode_style(np.stack([o, o], axis=1)).data, single, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_style_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    model = small_model(seed=seed % 7)
    obs = rng.normal(size=(2, 5, 12))
    perm = rng.permutation(5)
    np.testing.assert_allclose(model.encode_style(obs).data, model.encode_style(obs[:, perm]).data, rtol=1e-12)


def test_more_observations_reduce_style_variance(rng):
    model = small_model(style_dim=12)
    pool = rng.normal(size=(400, 12))
    singles = np.stack([model.encode_style(pool[rng.choice(400, 1)][None]).data[0] for _ in range(200)])
    eights = np.stack([model.encode_style(pool[rng.choice(400, 8)][None]).data[0] for _ in range(200)])
    assert eights.var(axis=0).sum() < singles.var(axis=0).sum()


def test_modulate_identity_and_scaling(rng):
    model = small_model()
    z, c = rng.normal(size=(3, 6)), rng.normal(size=(3, 4))
    np.testing.assert_array_equal(model.modulate(z, c).data, z)
    np.testing.assert_array_equal(model.modulate(2.5 * z, c).data, 2.5 * z)


def test_style_gradient_flows_only_through_f(rng):
    model = small_model()
    randomize_f(model, rng)
    x, y = rng.normal(size=(3, 10)), rng.normal(size=(3, 12, 2))
    c0 = rng.normal(size=(3, 4))

    def loss(c):
        return dc.squared_error(model.decode(model.modulate(model.encode_invariant(x), c)), y)

    assert np.any(autodiff_grad(loss, c0) != 0)
    for w in model.f.weights:
        w.data[:] = 0
    assert np.all(autodiff_grad(loss, c0) == 0)


def test_projection_unit_norm_and_scale_invariant(rng):
    model = small_model()
    model.h.activations = ["tanh", "identity"]
    c = rng.normal(size=(6, 4))
    p = model.project(c).data
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, rtol=1e-12)
    for w in (model.h.weights[-1], model.h.biases[-1]):
        w.data *= 3.0
    np.testing.assert_allclose(model.project(c).data, p, rtol=1e-12)
    cos = p @ p.T
    assert np.all(cos <= 1 + 1e-12) and np.all(cos >= -1 - 1e-12)


def test_degenerate_projection_raises(rng):
    model = small_model()
    for prm in model.h.parameters():
        prm.data[:] = 0
    with pytest.raises(ModelError):
        model.project(rng.normal(size=(1, 4)))


def toy_windows():
    rng = np.random.default_rng(0)
    base = np.cumsum(rng.normal(size=(20, 3, 2)) * 0.1 + [0.4, 0.1], axis=0)
    scene = TrajectoryScene("t", "style-0.3", 0.4, np.arange(20), [0, 1, 2], base)
    return di.window_scenes([scene])


def test_forward_full_world_frame_and_identity():
    windows = toy_windows()
    model = ModularForecaster(Architecture(input_dim=di.input_dim(False)), seed=3)
    y_world, p = model.forward_full(windows[0], windows[1:])
    inv = model.invariant_forward(di.input_features(windows[0])[None]).data[0]
    np.testing.assert_array_equal(y_world, inv + windows[0].origin)
    assert np.linalg.norm(p) == pytest.approx(1.0, abs=1e-12)
    again, _ = model.forward_full(windows[0], windows[1:])
    assert np.array_equal(again, y_world)


def test_forward_full_style_observations_matter_once_f_is_nonzero(rng):
    windows = toy_windows()
    model = ModularForecaster(Architecture(input_dim=di.input_dim(False)), seed=3)
    randomize_f(model, rng)
    a, _ = model.forward_full(windows[0], windows[1:2])
    b, _ = model.forward_full(windows[0], windows[2:3])
    assert np.abs(a - b).max() > 0


def test_forward_full_rejects_mixed_environments():
    windows = toy_windows()
    windows[2].env_id = "style-0.5"
    model = ModularForecaster(Architecture(input_dim=di.input_dim(False)), seed=3)
    with pytest.raises(ModelError):
        model.forward_full(windows[0], windows[1:])
    with pytest.raises(ModelError):
        model.forward_full(windows[0], [])


def test_window_style_features_layout():
    w = toy_windows()[0]
    feats = window_style_features(w)
    primary = np.concatenate([w.past, w.future])
    np.testing.assert_array_equal(feats[:40], primary.ravel())
    np.testing.assert_allclose(feats[40:], (w.style_neighbor - primary).ravel())


def test_freeze_toggles_requires_grad():
    model = small_model()
    model.only_trainable(("f",))
    assert all(p.requires_grad for p in model.parameters(("f",)))
    assert not any(p.requires_grad for p in model.parameters(("phi", "psi", "g", "h")))
    model.unfreeze(*GROUPS)
    assert all(p.requires_grad for p in model.parameters())


def test_frozen_phi_bit_stable_under_optimizer_steps(rng):
    model = small_model()
    randomize_f(model, rng)
    before = model.group_digest("phi")
    model.only_trainable(("psi", "f", "g"))
    opt = dc.Adam(model.parameters(("psi", "f", "g")), lr=0.01)
    x, obs, y = rng.normal(size=(4, 10)), rng.normal(size=(4, 2, 12)), rng.normal(size=(4, 12, 2))
    for _ in range(10):
        y_hat, _ = model.forward(x, obs)
        dc.backward(dc.squared_error(y_hat, y))
        opt.step()
    assert model.group_digest("phi") == before
    assert all(p.grad is None for p in model.parameters(("phi",)))


def test_checkpoint_round_trip(tmp_path, rng):
    model = small_model(seed=4)
    randomize_f(model, rng)
    model.save(tmp_path / "ck")
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == sorted(
        [f"{g}.json" for g in GROUPS] + ["architecture.json"])
    back = ModularForecaster.load(tmp_path / "ck")
    assert back.digest() == model.digest()
    assert back.arch == model.arch


def test_load_missing_descriptor(tmp_path):
    with pytest.raises(FileNotFoundError):
        ModularForecaster.load(tmp_path)
