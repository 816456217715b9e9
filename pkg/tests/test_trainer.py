import json

import numpy as np
import pytest

from motionshift import dataio as di
from motionshift import diffcore as dc
from motionshift import trainer as tr
from motionshift.losses import task_loss
from motionshift.model import Architecture, ModularForecaster

SMALL = dict(z_dim=8, c_dim=4, proj_dim=4, phi_hidden=(16,), psi_hidden=(16,), f_hidden=(8,), g_hidden=(16,),
             h_hidden=(8,))


def linear_toy(n=2000, seed=0, noise=0.1):
    """y = z + beta_e * s; env 1 has beta=+1 and var(s)=4, env 2 beta=-1 and var(s)=1."""
    rng = np.random.default_rng(seed)
    envs = []
    for name, beta, sd in (("e1", 1.0, 2.0), ("e2", -1.0, 1.0)):
        z = rng.normal(size=n)
        s = rng.normal(size=n) * sd
        y = z + beta * s + noise * rng.normal(size=n)
        envs.append(tr.ArrayEnv(name, np.stack([z, s], axis=1), y[:, None, None]))
    return envs


def closed_form_pooled(envs):
    x = np.concatenate([e.inputs for e in envs])
    y = np.concatenate([e.targets[:, 0, 0] for e in envs])
    design = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    return np.linalg.lstsq(design, y, rcond=None)[0]


def test_config_defaults_and_validation():
    cfg = tr.TrainConfig()
    assert cfg.batch_size == 64
    assert cfg.stage_epochs == (100, 50, 20, 300)
    assert cfg.group_lrs() == {"phi": 1e-3, "g": 1e-3, "psi": 5e-4, "h": 1e-2, "f": 1e-2}
    assert cfg.group_lrs(adapt=True)["f"] == 1e-3
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        tr.TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(lr_modulator=0.0)


def test_linear_toy_invariance_vs_erm():
    envs = linear_toy()
    cfg = tr.TrainConfig(batch_size=64, seed=0)
    erm = tr.LinearRegressor(2)
    tr.train_erm(erm, envs, envs, cfg, epochs=40, lr=0.003)
    irm = tr.LinearRegressor(2)
    tr.train_invariant(irm, envs, envs, cfg, lam=100.0, epochs=60, lr=0.02)
    oracle = closed_form_pooled(envs)
    assert oracle[1] == pytest.approx(0.6, abs=0.05)
    assert abs(erm.weights[1] - oracle[1]) < 0.02
    assert abs(erm.weights[1]) > 0.3
    assert abs(irm.weights[1]) < 0.05


def test_invariant_lambda_zero_matches_mean_env_risk_loop():
    envs = linear_toy(n=300)
    cfg = tr.TrainConfig(batch_size=32, seed=3)
    model = tr.LinearRegressor(2)
    res = tr.train_invariant(model, envs, envs, cfg, lam=0.0, epochs=3, lr=0.01)

    # independent loop: same sampling stream, loss built as the plain mean of per-env risks
    ref = tr.LinearRegressor(2)
    rng = np.random.default_rng(cfg.seed)
    cyclers = [tr._Cycler(len(e), cfg.batch_size, rng) for e in envs]
    opt = dc.Adam(ref.parameters(), lr=0.01)
    steps = int(np.ceil(600 / (32 * 2)))
    losses = []
    for _ in range(3):
        total = 0.0
        for _ in range(steps):
            risks = []
            for e, c in zip(envs, cyclers):
                idx = c.next()
                risks.append(task_loss(ref(e.inputs[idx]), e.targets[idx]))
            loss = dc.scale(dc.add(risks[0], risks[1]), 0.5)
            dc.backward(loss)
            opt.step()
            total += loss.item()
        losses.append(total / steps)
    np.testing.assert_allclose(res.losses("invariant"), losses, rtol=1e-12)


def test_invariant_needs_two_envs():
    envs = linear_toy(n=50)
    with pytest.raises(tr.TrainingError):
        tr.train_invariant(tr.LinearRegressor(2), envs[:1], envs, tr.TrainConfig(), epochs=1)


def test_env_starvation_reshuffles():
    big, small = linear_toy(n=400)
    small = tr.ArrayEnv("e2", small.inputs[:10], small.targets[:10])
    res = tr.train_invariant(tr.LinearRegressor(2), [big, small], [big], tr.TrainConfig(), lam=1.0, epochs=2)
    assert len(res.losses("invariant")) == 2


def constant_velocity_envs(n=600, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1.2, 1.2, size=(n, 2)) * 0.4
    steps_past = np.arange(-7, 1)[None, :, None]
    steps_fut = np.arange(1, 13)[None, :, None]
    past = steps_past * v[:, None, :]
    fut = steps_fut * v[:, None, :]
    return tr.ArrayEnv("cv", past.reshape(n, -1), fut)


def test_erm_constant_velocity_fits():
    train, val = constant_velocity_envs(600, 0), constant_velocity_envs(200, 1)
    lin = dc.Mlp([16, 24], ["identity"], rng=np.random.default_rng(0))

    class Wrap:
        def __call__(self, x):
            return dc.reshape(lin(x), (x.shape[0], 12, 2))

        def parameters(self):
            return lin.parameters()

    res = tr.train_erm(Wrap(), [train], [val], tr.TrainConfig(seed=0), epochs=100, lr=0.01)
    assert res.best["erm"][1] < 0.01


def test_erm_rerun_bit_identical():
    envs = linear_toy(n=200)

    def run():
        m = tr.LinearRegressor(2, seed=1)
        return tr.train_erm(m, envs, envs, tr.TrainConfig(seed=9), epochs=4).losses("erm"), m.weights

    (a, wa), (b, wb) = run(), run()
    assert a == b and np.array_equal(wa, wb)


def test_divergence_raises_with_epoch():
    envs = linear_toy(n=200)
    envs = [tr.ArrayEnv(e.env_id, e.inputs * 1e200, e.targets * 1e200) for e in envs]
    with pytest.raises(tr.TrainingDiverged) as err:
        tr.train_erm(tr.LinearRegressor(2), envs, envs, tr.TrainConfig(), epochs=3, lr=1.0)
    assert err.value.epoch == 1


def test_lambda_grid_emits_one_checkpoint_each(tmp_path):
    envs = linear_toy(n=128)
    cfg = tr.TrainConfig(spurious_epochs=(1, 1))

    def save(pred, target):
        dc.save_mlp(pred.mlp, target / "model.json")

    runs = tr.lambda_grid_checkpoints(lambda: tr.LinearRegressor(2), envs, envs, cfg, out_dir=tmp_path, save=save)
    assert sorted(runs) == [0.001, 0.01, 0.1, 1.0, 10.0, 100.0]
    dirs = sorted(p.name for p in tmp_path.iterdir())
    assert dirs == sorted(f"lam-{v:g}" for v in runs)
    assert json.loads((tmp_path / "lam-100" / "config.json").read_text())["lam"] == 100.0


def style_toy_envs(n=96, seed=0):
    """Three fake style environments whose future offset depends on the environment."""
    rng = np.random.default_rng(seed)
    envs = []
    for k in range(3):
        inputs = rng.normal(size=(n, 12))
        targets = np.repeat(inputs[:, :2, None].transpose(0, 2, 1), 12, axis=1) * 0.1 + 0.3 * k
        style = rng.normal(size=(n, 10)) + 2.0 * k
        arr = di.WindowArrays(f"env{k}", inputs, targets, np.zeros((n, 8, 2)), np.zeros((n, 2)), style,
                              np.zeros((n, 20, 2)), np.zeros(n, bool))
        envs.append(arr)
    return envs


def small_modular(seed=0):
    return ModularForecaster(Architecture(input_dim=12, style_dim=10, **SMALL), seed=seed)


def test_staged_training_freezes_phi_and_records_stages():
    train, val = style_toy_envs(seed=0), style_toy_envs(n=48, seed=1)
    cfg = tr.TrainConfig(stage_epochs=(3, 2, 2, 3), contrastive_per_env=8, stage1="erm")
    model = small_modular()
    stage1 = tr.train_modular_staged(model.copy(), train, val, replace_epochs(cfg, (3, 0, 0, 0)))
    model_after_1 = small_modular()
    tr.train_modular_staged(model_after_1, train, val, replace_epochs(cfg, (3, 0, 0, 0)))
    phi = model_after_1.group_digest("phi")
    g_before = model_after_1.group_digest("g")
    res = tr.train_modular_staged(model_after_1, train, val, cfg, start_stage=2, stage1_result=stage1)
    assert model_after_1.group_digest("phi") == phi
    assert model_after_1.group_digest("g") != g_before
    stages = {r.stage for r in res.history}
    assert stages == {"stage1", "stage2", "stage3", "stage4"}
    assert not model_after_1.frozen


def replace_epochs(cfg, epochs):
    from dataclasses import replace

    return replace(cfg, stage_epochs=epochs)


def test_stage_three_only_touches_f():
    train, val = style_toy_envs(seed=0), style_toy_envs(n=48, seed=1)
    model = small_modular()
    digests = {g: model.group_digest(g) for g in ("phi", "psi", "g", "h", "f")}
    tr.train_modular_staged(model, train, val, tr.TrainConfig(stage_epochs=(0, 0, 2, 0)), start_stage=3,
                            stage1_result=tr.TrainResult())
    assert all(model.group_digest(g) == digests[g] for g in ("phi", "psi", "g", "h"))
    assert model.group_digest("f") != digests["f"]


def test_missing_stage_one_checkpoint():
    train = style_toy_envs()
    with pytest.raises(tr.MissingCheckpoint):
        tr.train_modular_staged(small_modular(), train, train, tr.TrainConfig(), start_stage=2)


def test_observation_sampling_stays_in_environment():
    pool = tr.StyleEnvs.from_arrays(style_toy_envs(n=20))
    rng = np.random.default_rng(0)
    rows = np.arange(len(pool))
    obs = tr.sample_observations(pool, rows, 6, rng)
    for r in rows:
        env_rows = pool.style[pool.members(pool.env_index[r])]
        for o in obs[r]:
            assert np.any(np.all(env_rows == o, axis=1))
            assert not np.array_equal(o, pool.style[r])
