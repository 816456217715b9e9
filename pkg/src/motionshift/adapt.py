"""Low-shot transfer to a new style environment and test-time refinement of
the modulated latent against reference style embeddings."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .dataio import OBS_LEN, WindowArrays
from .model import ModularForecaster
from .trainer import (
    StyleEnvs,
    TrainConfig,
    TrainResult,
    _Cycler,
    _run_epochs,
    ade_array,
    predict_with_style,
    sample_observations,
)
from .losses import task_loss

log = logging.getLogger(__name__)

STRATEGIES = {"all": ("psi", "f", "g"), "mod": ("f",)}
MAX_K = 6


class AdaptError(Exception):
    pass


@dataclass
class AdaptConfig:
    epochs: int = 50
    patience: int = 10
    holdout: float = 0.25
    n_refs: int = 8
    refine_iters: int = 3
    refine_step: float = 0.05
    max_halvings: int = 5
    seed: int = 0


@dataclass
class AdaptResult:
    model: ModularForecaster
    history: TrainResult
    train_rows: np.ndarray
    holdout_rows: np.ndarray
    reference_rows: np.ndarray


def adaptation_rows(n_available: int, k: int, seed: int, holdout: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """First ``k * 64`` rows of a seeded permutation, split into train and held-out parts."""
    if not 1 <= k <= MAX_K:
        raise AdaptError(f"k must be in [1, {MAX_K}], got {k}")
    n = k * 64
    if n > n_available:
        raise AdaptError(f"need {n} adaptation samples, only {n_available} available")
    rows = np.random.default_rng(seed).permutation(n_available)[:n]
    n_hold = max(1, int(round(holdout * n)))
    return rows[n_hold:], rows[:n_hold]


def finetune(
    model: ModularForecaster,
    samples: WindowArrays,
    strategy: str,
    k: int,
    cfg: TrainConfig,
    acfg: AdaptConfig | None = None,
) -> AdaptResult:
    """Adapt a copy of ``model`` on ``k * 64`` samples of a new environment.

    ``strategy='all'`` updates every style-related group reachable from the
    task loss (psi, f, g); ``'mod'`` updates only f at the adaptation rate.
    phi is always frozen and the input model is never modified.
    """
    if strategy not in STRATEGIES:
        raise AdaptError(f"unknown strategy {strategy!r}; expected one of {sorted(STRATEGIES)}")
    acfg = acfg or AdaptConfig(seed=cfg.seed)
    train_rows, hold_rows = adaptation_rows(len(samples), k, acfg.seed, acfg.holdout)
    groups = STRATEGIES[strategy]
    adapted = model.copy()
    adapted.only_trainable(groups)
    lrs = cfg.group_lrs(adapt=True)
    opt = dc.Adam([{"params": adapted.parameters((g,)), "lr": lrs[g]} for g in groups])

    train = StyleEnvs.from_arrays([samples.subset(train_rows)])
    hold = samples.subset(hold_rows)
    rng = np.random.default_rng(acfg.seed + 1)
    cycler = _Cycler(len(train), cfg.batch_size, rng)
    steps = int(np.ceil(len(train) / cfg.batch_size))
    n_obs = min(cfg.n_style_obs, max(1, len(train) - 1))
    ref_obs = train.style[: min(acfg.n_refs, len(train))]

    def step_loss():
        idx = cycler.next()
        obs = sample_observations(train, idx, n_obs, rng)
        y_hat, _ = adapted.forward(train.inputs[idx], obs)
        return task_loss(y_hat, train.targets[idx])

    def validate():
        return ade_array(predict_with_style(adapted, hold.inputs, ref_obs), hold.targets)

    history = TrainResult()
    _run_epochs_early_stop(f"adapt-{strategy}", acfg.epochs, acfg.patience, steps, step_loss, opt, validate, history)
    adapted.unfreeze(*groups)
    adapted.frozen = set()
    return AdaptResult(adapted, history, train_rows, hold_rows, train_rows[: len(ref_obs)])


def _run_epochs_early_stop(stage, epochs, patience, steps, step_loss, opt, validate, result) -> None:
    # one epoch at a time through the shared loop so selection/restoration stays identical
    params = opt.parameters()
    best, best_state, since = validate(), [p.data.copy() for p in params], 0
    for epoch in range(1, epochs + 1):
        _run_epochs(stage, 1, steps, step_loss, opt, validate, result, select=False, epoch_offset=epoch - 1)
        val = result.history[-1].val_metric
        if val < best:
            best, best_state, since = val, [p.data.copy() for p in params], 0
        else:
            since += 1
            if since >= patience:
                break
    for p, s in zip(params, best_state):
        p.data = s
        p.grad = None
    result.best[stage] = (int(np.argmin([np.inf] + result.stage_curve(stage))), float(best))


# ---------------------------------------------------------------- references and refinement


def build_style_references(model: ModularForecaster, observations: np.ndarray, count: int | None = None) -> np.ndarray:
    """Unit embeddings ``p`` of individual observations ``(M, style_dim)``; the first ``count`` are used."""
    observations = np.asarray(observations, dtype=np.float64)
    if observations.ndim != 2 or observations.shape[0] == 0:
        raise AdaptError("no reference observations")
    if count is not None:
        if count < 1:
            raise AdaptError("reference count must be >= 1")
        observations = observations[:count]
    c = model.encode_style(observations[:, None, :])
    return model.project(c).data


def _pseudo_observation(past: np.ndarray, y_hat: dc.Value, nb_traj: np.ndarray, has_nb: np.ndarray) -> dc.Value:
    """Style features of ``[past; y_hat]`` with the neighbour track, differentiable in ``y_hat``."""
    n = past.shape[0]
    primary = dc.concat([dc.Value(past), y_hat], axis=1)  # (N, 20, 2)
    rel = dc.mul(dc.sub(nb_traj, primary), has_nb[:, None, None].astype(np.float64))
    return dc.concat([dc.reshape(primary, (n, -1)), dc.reshape(rel, (n, -1))], axis=1)


def _objective(model, z_mod, past, nb_traj, has_nb, refs) -> tuple[dc.Value, dc.Value]:
    """Per-instance ``mean_r (1 - cos(p_hat, p_r))`` and the prediction."""
    y_hat = model.decode(z_mod)
    feats = _pseudo_observation(past, y_hat, nb_traj, has_nb)
    p_hat = model.project(model.encode_style(dc.reshape(feats, (feats.shape[0], 1, feats.shape[1]))))
    cos = dc.matmul(p_hat, dc.Value(refs.T))  # both unit norm
    per = dc.sub(1.0, dc.mean(cos, axis=1))
    return per, y_hat


@dataclass
class RefineResult:
    y_hat: np.ndarray  # refined predictions, normalised frame
    y_init: np.ndarray
    objective: np.ndarray  # (iters + 1, N) value after each iteration
    accepted: np.ndarray  # (N,) number of accepted steps
    aborted: bool = False
    step_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0))


def neighbor_futures(model: ModularForecaster, arrays: WindowArrays, c: np.ndarray) -> np.ndarray:
    """Neighbour tracks with the unknown future filled in.

    The observed part comes from the window; the future is the model's own
    (unrefined) prediction for that neighbour when its window is available,
    else a constant-velocity extrapolation. Coordinates are in each primary's frame.
    """
    nb = arrays.neighbor_traj.copy()
    past_nb = nb[:, :OBS_LEN]
    vel = past_nb[:, -1] - past_nb[:, -2]
    steps = np.arange(1, nb.shape[1] - OBS_LEN + 1)[None, :, None]
    nb[:, OBS_LEN:] = past_nb[:, -1:, :] + steps * vel[:, None, :]
    idx = arrays.neighbor_window if arrays.neighbor_window.size else np.full(len(arrays), -1)
    have = np.flatnonzero(arrays.has_neighbor & (idx >= 0))
    if have.size:
        src = idx[have]
        pred = predict_with_style(model, arrays.inputs[src], c)
        # the neighbour's prediction lives in its own frame: shift by its origin relative to the primary's
        shift = arrays.origins[src] - arrays.origins[have]
        nb[have, OBS_LEN:] = pred + shift[:, None, :]
    return nb


def test_time_refine(
    model: ModularForecaster,
    inputs: np.ndarray,
    past: np.ndarray,
    nb_traj: np.ndarray,
    has_nb: np.ndarray,
    style_obs: np.ndarray,
    refs: np.ndarray,
    iters: int = 3,
    step: float = 0.05,
    max_halvings: int = 5,
) -> RefineResult:
    """Gradient steps on the modulated latent only; model weights are read, never written.

    Each instance keeps its own step size; a step is accepted only if the
    instance's objective strictly decreases, otherwise the step is halved
    (at most ``max_halvings`` times) and the latent stays put.
    """
    refs = np.asarray(refs, dtype=np.float64)
    if refs.ndim != 2 or refs.shape[0] == 0:
        raise AdaptError("refinement needs at least one reference embedding")
    n = inputs.shape[0]
    c = model.encode_style(np.asarray(style_obs)[None]).data
    z = model.encode_invariant(inputs).data
    z_mod = model.modulate(z, np.repeat(c, n, axis=0)).data
    y0 = model.decode(z_mod).data
    # the latent is a fresh leaf; parameters are wrapped as constants so no grad lands on them
    frozen = model.copy()
    frozen.freeze(*frozen.nets)
    obj_hist = np.zeros((iters + 1, n))
    accepted = np.zeros(n, dtype=int)
    steps = np.full(n, float(step))
    try:
        obj, _ = _objective(frozen, dc.Value(z_mod), past, nb_traj, has_nb, refs)
        current = obj.data.copy()
        obj_hist[0] = current
        for it in range(1, iters + 1):
            leaf = dc.parameter(z_mod)
            per, _ = _objective(frozen, leaf, past, nb_traj, has_nb, refs)
            grad = dc.grad_wrt_activation(dc.sum_(per), leaf)
            pending = np.ones(n, dtype=bool)
            for _ in range(max_halvings + 1):
                cand = z_mod - steps[:, None] * grad
                trial, _ = _objective(frozen, dc.Value(cand), past, nb_traj, has_nb, refs)
                ok = pending & (trial.data < current)
                z_mod[ok] = cand[ok]
                current[ok] = trial.data[ok]
                accepted[ok] += 1
                pending &= ~ok
                if not pending.any():
                    break
                steps[pending] *= 0.5
            obj_hist[it] = current
    except dc.NonFiniteError:
        warnings.warn("refinement objective became non-finite; returning unrefined predictions")
        return RefineResult(y0, y0, obj_hist, np.zeros(n, dtype=int), aborted=True, step_sizes=steps)
    return RefineResult(frozen.decode(z_mod).data, y0, obj_hist, accepted, step_sizes=steps)


def refine_arrays(
    model: ModularForecaster,
    arrays: WindowArrays,
    style_obs: np.ndarray,
    refs: np.ndarray,
    acfg: AdaptConfig | None = None,
    chunk: int = 1024,
) -> RefineResult:
    """Refine every window of ``arrays``; neighbour futures come from the unrefined model."""
    acfg = acfg or AdaptConfig()
    nb = neighbor_futures(model, arrays, style_obs)
    parts = []
    for lo in range(0, len(arrays), chunk):
        sl = slice(lo, lo + chunk)
        parts.append(test_time_refine(model, arrays.inputs[sl], arrays.past[sl], nb[sl], arrays.has_neighbor[sl],
                                      style_obs, refs, acfg.refine_iters, acfg.refine_step, acfg.max_halvings))
    return RefineResult(
        y_hat=np.concatenate([p.y_hat for p in parts]),
        y_init=np.concatenate([p.y_init for p in parts]),
        objective=np.concatenate([p.objective for p in parts], axis=1),
        accepted=np.concatenate([p.accepted for p in parts]),
        aborted=any(p.aborted for p in parts),
        step_sizes=np.concatenate([p.step_sizes for p in parts]),
    )
