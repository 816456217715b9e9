"""Training drivers: pooled ERM, per-environment invariant training and the
staged modular protocol (backbone, contrastive pre-training, modulator,
end-to-end)."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import diffcore as dc
from .losses import combined_invariant_objective, style_contrastive, task_loss
from .model import GROUPS, ModularForecaster

log = logging.getLogger(__name__)


class TrainingError(Exception):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, stage: str, epoch: int, cause: Exception | None = None):
        super().__init__(f"{stage}: loss became non-finite at epoch {epoch}")
        self.stage = stage
        self.epoch = epoch
        self.cause = cause


class MissingCheckpoint(TrainingError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    stage_epochs: tuple[int, int, int, int] = (100, 50, 20, 300)
    spurious_epochs: tuple[int, int] = (150, 150)
    lr_baseline: float = 1e-3
    lr_style_encoder: float = 5e-4
    lr_projection: float = 1e-2
    lr_modulator: float = 1e-2
    lr_modulator_adapt: float = 1e-3
    lam: float = 0.0
    tau: float = 0.1
    contrastive_coef: float = 1.0
    contrastive_per_env: int = 16
    n_style_obs: int = 4
    n_eval_obs: int = 8
    stage1: str = "invariant"
    contrastive_pretrain: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0 or any(e < 0 for e in self.stage_epochs) or any(e < 0 for e in self.spurious_epochs):
            raise ValueError("batch size and epochs must be positive")
        for name in ("lr_baseline", "lr_style_encoder", "lr_projection", "lr_modulator", "lr_modulator_adapt", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.stage1 not in ("invariant", "erm"):
            raise ValueError("stage1 must be 'invariant' or 'erm'")
        self.stage_epochs = tuple(self.stage_epochs)
        self.spurious_epochs = tuple(self.spurious_epochs)

    def group_lrs(self, adapt: bool = False) -> dict[str, float]:
        return {
            "phi": self.lr_baseline,
            "g": self.lr_baseline,
            "psi": self.lr_style_encoder,
            "h": self.lr_projection,
            "f": self.lr_modulator_adapt if adapt else self.lr_modulator,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_epochs"] = list(self.stage_epochs)
        d["spurious_epochs"] = list(self.spurious_epochs)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("stage_epochs", "spurious_epochs"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


class EnvData(Protocol):
    env_id: str
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int: ...


@dataclass
class ArrayEnv:
    """Bare ``(inputs, targets)`` environment, e.g. for toy regressions."""

    env_id: str
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


class Predictor(Protocol):
    def __call__(self, inputs) -> dc.Value: ...

    def parameters(self) -> list[dc.Value]: ...


class InvariantPath:
    """``g(phi(x))`` of a modular model as a plain predictor."""

    def __init__(self, model: ModularForecaster):
        self.model = model

    def __call__(self, inputs) -> dc.Value:
        return self.model.invariant_forward(inputs)

    def parameters(self) -> list[dc.Value]:
        return self.model.parameters(("phi", "g"))


class LinearRegressor:
    """Single linear layer mapping ``(N, D)`` to ``(N, 1, 1)`` targets; used by toy checks."""

    def __init__(self, n_features: int, seed: int = 0):
        self.mlp = dc.Mlp([n_features, 1], ["identity"], rng=np.random.default_rng(seed))
        self.mlp.weights[0].data[:] = 0.0

    def __call__(self, inputs) -> dc.Value:
        out = self.mlp(inputs)
        return dc.reshape(out, (out.shape[0], 1, 1))

    def parameters(self) -> list[dc.Value]:
        return self.mlp.parameters()

    @property
    def weights(self) -> np.ndarray:
        return self.mlp.weights[0].data[:, 0].copy()


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    val_metric: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best: dict[str, tuple[int, float]] = field(default_factory=dict)

    def stage_curve(self, stage: str) -> list[float]:
        return [r.val_metric for r in self.history if r.stage == stage]

    def losses(self, stage: str) -> list[float]:
        return [r.train_loss for r in self.history if r.stage == stage]

    def write_csv(self, path: str | Path) -> None:
        rows = ["stage,epoch,train_loss,val_metric"]
        rows += [f"{r.stage},{r.epoch},{r.train_loss!r},{r.val_metric!r}" for r in self.history]
        Path(path).write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------- helpers


def ade_array(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.sqrt(((pred - target) ** 2).sum(axis=-1))))


def _predict(predictor: Predictor, inputs: np.ndarray, chunk: int = 2048) -> np.ndarray:
    outs = [predictor(inputs[i:i + chunk]).data for i in range(0, inputs.shape[0], chunk)]
    return np.concatenate(outs, axis=0)


def _pooled_val(predictor: Predictor, val_envs: Sequence[EnvData]) -> float:
    errs = [_predict(predictor, e.inputs) for e in val_envs]
    return ade_array(np.concatenate(errs), np.concatenate([e.targets for e in val_envs]))


class _Cycler:
    """Endless shuffled minibatches over one environment; reshuffles when exhausted."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            if self.n <= self.batch:
                return self.rng.permutation(self.n)
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return idx


def _snapshot(params: Sequence[dc.Value]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: Sequence[dc.Value], snap: Sequence[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data = s.copy()
        p.grad = None


def _run_epochs(
    stage: str,
    epochs: int,
    steps_per_epoch: int,
    step_loss: Callable[[], dc.Value],
    optimizer: dc.Optimizer,
    validate: Callable[[], float],
    result: TrainResult,
    select: bool = True,
    epoch_offset: int = 0,
    keep_start: bool = True,
) -> None:
    """Shared loop: step, record, keep the best validation state.

    With ``keep_start=False`` the incoming weights are not a candidate, so a
    stage that changes the objective cannot be skipped by selection.
    """
    params = optimizer.parameters()
    best_val, best_epoch, best_state = np.inf, -1, _snapshot(params)
    if select and epochs > 0 and keep_start:
        best_val, best_epoch = validate(), 0
    for epoch in range(1, epochs + 1):
        total = 0.0
        try:
            for _ in range(steps_per_epoch):
                loss = step_loss()
                dc.backward(loss)
                optimizer.step()
                total += loss.item()
        except dc.NonFiniteError as exc:
            raise TrainingDiverged(stage, epoch + epoch_offset, exc) from exc
        if not np.isfinite(total):
            raise TrainingDiverged(stage, epoch + epoch_offset)
        val = validate()
        result.history.append(EpochRecord(stage, epoch + epoch_offset, total / steps_per_epoch, val))
        log.debug("%s epoch %d loss %.5f val %.5f", stage, epoch, total / steps_per_epoch, val)
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch + epoch_offset, _snapshot(params)
    if select and epochs > 0:
        _restore(params, best_state)
        result.best[stage] = (best_epoch, float(best_val))


def _require_envs(envs, minimum: int = 1) -> list:
    envs = list(envs.values()) if isinstance(envs, Mapping) else list(envs)
    if len(envs) < minimum:
        raise TrainingError(f"need at least {minimum} environment(s), got {len(envs)}")
    if any(len(e) == 0 for e in envs):
        raise TrainingError("empty environment")
    return envs


# ---------------------------------------------------------------- ERM / invariant


def train_erm(
    predictor: Predictor,
    train_envs,
    val_envs,
    cfg: TrainConfig,
    epochs: int | None = None,
    stage: str = "erm",
    result: TrainResult | None = None,
    lr: float | None = None,
    keep_start: bool = True,
) -> TrainResult:
    """Pooled mean-squared-error training with the best validation ADE kept."""
    envs = _require_envs(train_envs)
    vals = _require_envs(val_envs)
    result = result if result is not None else TrainResult()
    rng = np.random.default_rng(cfg.seed)
    x = np.concatenate([e.inputs for e in envs])
    y = np.concatenate([e.targets for e in envs])
    cycler = _Cycler(len(x), cfg.batch_size, rng)
    steps = int(np.ceil(len(x) / cfg.batch_size))
    opt = dc.Adam(predictor.parameters(), lr=lr or cfg.lr_baseline)

    def step_loss():
        idx = cycler.next()
        return task_loss(predictor(x[idx]), y[idx])

    _run_epochs(stage, cfg.stage_epochs[0] if epochs is None else epochs, steps, step_loss, opt,
                lambda: _pooled_val(predictor, vals), result, keep_start=keep_start)
    return result


def train_invariant(
    predictor: Predictor,
    train_envs,
    val_envs,
    cfg: TrainConfig,
    lam: float | None = None,
    epochs: int | None = None,
    stage: str = "invariant",
    result: TrainResult | None = None,
    lr: float | None = None,
    keep_start: bool = True,
) -> TrainResult:
    """Each step draws one batch per environment and minimises mean risk + lam * penalty."""
    envs = _require_envs(train_envs, minimum=2)
    vals = _require_envs(val_envs)
    lam = cfg.lam if lam is None else lam
    if lam < 0:
        raise TrainingError("lam must be non-negative")
    result = result if result is not None else TrainResult()
    rng = np.random.default_rng(cfg.seed)
    cyclers = [_Cycler(len(e), cfg.batch_size, rng) for e in envs]
    total = sum(len(e) for e in envs)
    steps = int(np.ceil(total / (cfg.batch_size * len(envs))))
    opt = dc.Adam(predictor.parameters(), lr=lr or cfg.lr_baseline)

    def step_loss():
        batches = []
        for env, cyc in zip(envs, cyclers):
            idx = cyc.next()
            batches.append((predictor(env.inputs[idx]), env.targets[idx]))
        return combined_invariant_objective(batches, lam)

    _run_epochs(stage, cfg.stage_epochs[0] if epochs is None else epochs, steps, step_loss, opt,
                lambda: _pooled_val(predictor, vals), result, keep_start=keep_start)
    return result


def train_spurious(
    predictor: Predictor,
    train_envs,
    val_envs,
    cfg: TrainConfig,
    method: str,
    lam: float | None = None,
) -> TrainResult:
    """Two-stage schedule: backbone pre-training, then the full objective.

    ``method='erm'`` trains on the pooled data in both stages; ``'invariant'``
    pre-trains on per-environment batches without penalty and then adds it.
    """
    pre, full = cfg.spurious_epochs
    result = TrainResult()
    if method == "erm":
        train_erm(predictor, train_envs, val_envs, cfg, epochs=pre, stage="pretrain", result=result)
        train_erm(predictor, train_envs, val_envs, replace(cfg, seed=cfg.seed + 1), epochs=full, stage="full",
                  result=result, keep_start=False)
    elif method == "invariant":
        train_invariant(predictor, train_envs, val_envs, cfg, lam=0.0, epochs=pre, stage="pretrain", result=result)
        # the pre-penalty weights are not a selection candidate: in-distribution
        # validation would otherwise always prefer them over any penalised state
        train_invariant(predictor, train_envs, val_envs, replace(cfg, seed=cfg.seed + 1), lam=lam, epochs=full,
                        stage="full", result=result, keep_start=False)
    else:
        raise TrainingError(f"unknown method {method!r}")
    return result


# ---------------------------------------------------------------- modular


@dataclass
class StyleEnvs:
    """Windows of several style environments pooled into one set of arrays."""

    env_ids: list[str]
    inputs: np.ndarray
    targets: np.ndarray
    style: np.ndarray  # (N, style_dim)
    env_index: np.ndarray  # (N,)

    @classmethod
    def from_arrays(cls, envs) -> "StyleEnvs":
        envs = _require_envs(envs)
        return cls(
            env_ids=[e.env_id for e in envs],
            inputs=np.concatenate([e.inputs for e in envs]),
            targets=np.concatenate([e.targets for e in envs]),
            style=np.concatenate([e.style_features for e in envs]),
            env_index=np.concatenate([np.full(len(e), k) for k, e in enumerate(envs)]),
        )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.env_index == k)


def sample_observations(pool: StyleEnvs, rows: np.ndarray, n_obs: int, rng: np.random.Generator) -> np.ndarray:
    """``(len(rows), n_obs, style_dim)`` features drawn from each row's own environment, never the row itself."""
    members = [pool.members(k) for k in range(len(pool.env_ids))]
    out = np.empty((len(rows), n_obs, pool.style.shape[1]))
    for i, r in enumerate(rows):
        m = members[pool.env_index[r]]
        pick = m[rng.integers(0, len(m), size=n_obs)]
        if len(m) > 1:
            pick = np.where(pick == r, m[(np.searchsorted(m, r) + 1) % len(m)], pick)
        out[i] = pool.style[pick]
    return out


def contrastive_batch(pool: StyleEnvs, per_env: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    for k in range(len(pool.env_ids)):
        m = pool.members(k)
        pick = rng.choice(m, size=per_env, replace=len(m) < per_env)
        feats.append(pool.style[pick])
        labels.append(np.full(per_env, k))
    return np.concatenate(feats), np.concatenate(labels)


def eval_observations(pool: StyleEnvs, n_obs: int, seed: int) -> dict[int, np.ndarray]:
    """Fixed reference observations per environment, ``(n_obs, style_dim)`` each."""
    rng = np.random.default_rng(seed)
    out = {}
    for k in range(len(pool.env_ids)):
        m = pool.members(k)
        out[k] = pool.style[rng.choice(m, size=min(n_obs, len(m)), replace=False)]
    return out


def predict_with_style(model: ModularForecaster, inputs: np.ndarray, observations: np.ndarray,
                       chunk: int = 2048) -> np.ndarray:
    """Predictions for ``inputs`` sharing one style code from ``observations`` (S, style_dim)."""
    c = model.encode_style(observations[None])
    outs = []
    for i in range(0, inputs.shape[0], chunk):
        x = inputs[i:i + chunk]
        z = model.encode_invariant(x)
        cc = dc.Value(np.repeat(c.data, x.shape[0], axis=0))
        outs.append(model.decode(model.modulate(z, cc)).data)
    return np.concatenate(outs)


def modular_val_ade(model: ModularForecaster, val: StyleEnvs, obs: dict[int, np.ndarray]) -> float:
    preds = np.empty_like(val.targets)
    for k in range(len(val.env_ids)):
        m = val.members(k)
        preds[m] = predict_with_style(model, val.inputs[m], obs[k])
    return ade_array(preds, val.targets)


def _contrastive_val(model: ModularForecaster, val: StyleEnvs, cfg: TrainConfig) -> float:
    feats, labels = contrastive_batch(val, cfg.contrastive_per_env, np.random.default_rng(cfg.seed + 99))
    c = model.encode_style(feats[:, None, :])
    return style_contrastive(model.project(c), labels, cfg.tau).item()


def train_modular_staged(
    model: ModularForecaster,
    train_envs,
    val_envs,
    cfg: TrainConfig,
    start_stage: int = 1,
    stage1_result: TrainResult | None = None,
    result: TrainResult | None = None,
) -> TrainResult:
    """Stages: (1) phi+g, (2) psi+h contrastive, (3) f on task loss, (4) psi, f, g, h jointly.

    ``start_stage > 1`` requires ``model`` to already carry a trained backbone
    (pass the stage-1 result as ``stage1_result``).
    """
    if start_stage not in (1, 2, 3, 4):
        raise TrainingError("start_stage must be 1..4")
    if start_stage > 1 and stage1_result is None:
        raise MissingCheckpoint("stages 2-4 need a stage-1 checkpoint")
    result = result if result is not None else TrainResult()
    if stage1_result is not None:
        result.history.extend(stage1_result.history)
        result.best.update(stage1_result.best)
    train = StyleEnvs.from_arrays(train_envs)
    val = StyleEnvs.from_arrays(val_envs)
    e1, e2, e3, e4 = cfg.stage_epochs
    lrs = cfg.group_lrs()
    rng = np.random.default_rng(cfg.seed + 7)
    val_obs = eval_observations(val, cfg.n_eval_obs, cfg.seed + 11)

    if start_stage <= 1:
        model.only_trainable(("phi", "g"))
        path = InvariantPath(model)
        if cfg.stage1 == "invariant":
            train_invariant(path, train_envs, val_envs, cfg, epochs=e1, stage="stage1", result=result)
        else:
            train_erm(path, train_envs, val_envs, cfg, epochs=e1, stage="stage1", result=result)

    if start_stage <= 2 and cfg.contrastive_pretrain and e2 > 0:
        model.only_trainable(("psi", "h"))
        opt = dc.Adam([{"params": model.parameters((g,)), "lr": lrs[g]} for g in ("psi", "h")])
        steps = int(np.ceil(len(train) / (cfg.contrastive_per_env * len(train.env_ids))))

        def contrastive_step():
            feats, labels = contrastive_batch(train, cfg.contrastive_per_env, rng)
            c = model.encode_style(feats[:, None, :])
            return style_contrastive(model.project(c), labels, cfg.tau)

        _run_epochs("stage2", e2, steps, contrastive_step, opt, lambda: _contrastive_val(model, val, cfg), result)

    cycler = _Cycler(len(train), cfg.batch_size, rng)
    steps = int(np.ceil(len(train) / cfg.batch_size))

    def task_step():
        idx = cycler.next()
        obs = sample_observations(train, idx, cfg.n_style_obs, rng)
        y_hat, _ = model.forward(train.inputs[idx], obs)
        return task_loss(y_hat, train.targets[idx])

    if start_stage <= 3 and e3 > 0:
        model.only_trainable(("f",))
        opt = dc.Adam(model.parameters(("f",)), lr=lrs["f"])
        _run_epochs("stage3", e3, steps, task_step, opt, lambda: modular_val_ade(model, val, val_obs), result)

    if e4 > 0:
        # without the contrastive term h receives no gradient
        groups = ("psi", "f", "g", "h") if cfg.contrastive_coef > 0 else ("psi", "f", "g")
        model.only_trainable(groups)
        opt = dc.Adam([{"params": model.parameters((g,)), "lr": lrs[g]} for g in groups])

        def joint_step():
            loss = task_step()
            if cfg.contrastive_coef > 0:
                feats, labels = contrastive_batch(train, cfg.contrastive_per_env, rng)
                c = model.encode_style(feats[:, None, :])
                loss = dc.add(loss, dc.scale(style_contrastive(model.project(c), labels, cfg.tau),
                                             cfg.contrastive_coef))
            return loss

        _run_epochs("stage4", e4, steps, joint_step, opt, lambda: modular_val_ade(model, val, val_obs), result)
    model.unfreeze(*GROUPS)
    return result


def lambda_grid_checkpoints(
    make_predictor: Callable[[], Predictor],
    train_envs,
    val_envs,
    cfg: TrainConfig,
    lams: Sequence[float] = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0),
    out_dir: str | Path | None = None,
    save: Callable[[Predictor, Path], None] | None = None,
) -> dict[float, tuple[Predictor, TrainResult]]:
    """One invariant run per penalty weight; optionally saved under ``out_dir/lam-<value>``."""
    runs = {}
    for lam in lams:
        predictor = make_predictor()
        res = train_spurious(predictor, train_envs, val_envs, cfg, "invariant", lam=lam)
        runs[lam] = (predictor, res)
        if out_dir is not None and save is not None:
            target = Path(out_dir) / f"lam-{lam:g}"
            target.mkdir(parents=True, exist_ok=True)
            save(predictor, target)
            res.write_csv(target / "history.csv")
            (target / "config.json").write_text(json.dumps(cfg.to_dict() | {"lam": lam}, indent=2))
    return runs
