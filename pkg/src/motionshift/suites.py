"""Experiment protocols at selectable scale: spurious-shift robustness, style
generalization, low-shot transfer and the contrastive pre-training ablation.

Datasets are generated once per preset and cached on disk; checkpoints are
cached per (suite, method, seed) so that repeated runs only evaluate.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio as di
from . import simkit as sk
from .adapt import AdaptConfig, build_style_references, finetune, refine_arrays
from .evaluation import EvalReport, ade, fde, write_curve
from .model import Architecture, ModularForecaster
from .trainer import (
    InvariantPath,
    StyleEnvs,
    TrainConfig,
    TrainResult,
    eval_observations,
    predict_with_style,
    train_erm,
    train_modular_staged,
    train_spurious,
)

log = logging.getLogger(__name__)

TRAIN_STYLES = (0.1, 0.3, 0.5)
TEST_STYLES = (0.4, 0.6, 0.7, 0.8)
STYLE_METHODS = ("vanilla", "invariant", "modular", "inv+mod")
TRANSFER_CURVES = ("finetune-all", "modulator-only", "modulator-only+refine")
SPURIOUS_TRAIN = dict(di.TRAIN_ALPHAS)
SPURIOUS_HELDOUT = "eth"
SPURIOUS_SEPARATION = 0.2

# crowd settings per pseudo-subset, so the five sites differ beyond their seed
SUBSET_CROWDS = {
    "eth": dict(n_agents_range=(2, 5), circle_radius=4.0),
    "hotel": dict(n_agents_range=(2, 4), circle_radius=3.5),
    "univ": dict(n_agents_range=(4, 6), circle_radius=4.5),
    "zara1": dict(n_agents_range=(2, 5), circle_radius=4.0),
    "zara2": dict(n_agents_range=(3, 6), circle_radius=4.0),
}


class SuiteError(Exception):
    pass


class MissingArtifact(SuiteError):
    def __init__(self, missing: Sequence[str]):
        super().__init__("missing artifacts:\n  " + "\n  ".join(missing))
        self.missing = list(missing)


@dataclass(frozen=True)
class ScalePreset:
    name: str
    style_counts: tuple[int, int, int]  # train / val / test scenes per training style
    ood_counts: tuple[int, int]  # adaptation-pool / test scenes per test style
    spurious_counts: tuple[int, int, int]  # train / val / test scenes per pseudo-subset
    stage_epochs: tuple[int, int, int, int]
    baseline_epochs: int
    spurious_epochs: tuple[int, int]
    adapt_epochs: int = 50
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    lam_spurious: float = 100.0
    lam_style: float = 1.0


SCALES = {
    "full": ScalePreset("full", (10000, 3000, 5000), (3000, 5000), (2000, 500, 1000),
                         (100, 50, 20, 300), 420, (150, 150)),
    "desk": ScalePreset("desk", (2000, 500, 1000), (500, 1000), (600, 150, 300),
                        (100, 50, 20, 300), 420, (150, 150)),
    "small": ScalePreset("small", (400, 100, 200), (150, 200), (300, 80, 150),
                         (30, 20, 10, 60), 100, (40, 40), adapt_epochs=50),
    "tiny": ScalePreset("tiny", (40, 15, 20), (110, 20), (30, 10, 15),
                        (2, 2, 2, 2), 4, (2, 2), adapt_epochs=2, seeds=(0, 1)),
}


def get_scale(name: str) -> ScalePreset:
    if name not in SCALES:
        raise SuiteError(f"unknown scale {name!r}; choose from {sorted(SCALES)}")
    return SCALES[name]


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- data


def _cached_dataset(env_dir: Path, manifest: dict, make) -> Path:
    mpath = env_dir / "manifest.json"
    if mpath.exists():
        old = json.loads(mpath.read_text())
        if all(old.get(k) == v for k, v in manifest.items()):
            return env_dir
    make()
    old = json.loads(mpath.read_text()) if mpath.exists() else {}
    old.update(manifest)
    mpath.write_text(json.dumps(old, indent=2))
    return env_dir


def ensure_style_data(data_dir: str | Path, preset: ScalePreset, seed: int = 0) -> dict[float, Path]:
    """Simulated style environments; training styles get train/val/test, test styles adapt/test."""
    root = Path(data_dir) / "style" / preset.name
    out = {}
    for d in TRAIN_STYLES + TEST_STYLES:
        if d in TRAIN_STYLES:
            counts = dict(zip(("train", "val", "test"), preset.style_counts))
        else:
            counts = dict(zip(("adapt", "test"), preset.ood_counts))
        env_dir = root / sk.style_env_id(d)
        want = {"counts": counts, "seed": seed, "parameter": d}
        out[d] = _cached_dataset(env_dir, want, lambda d=d, counts=counts: sk.generate_dataset(d, counts, seed, root))
    return out


def _subset_defaults(subset: str) -> sk.SimDefaults:
    return replace(sk.SimDefaults(), **SUBSET_CROWDS[subset])


def ensure_spurious_data(data_dir: str | Path, preset: ScalePreset, seed: int = 0) -> dict[str, Path]:
    """Five simulated pseudo-subsets standing in for the ETH-UCY sites."""
    root = Path(data_dir) / "spurious" / preset.name
    out = {}
    for k, subset in enumerate(di.ETH_UCY_SUBSETS):
        counts = dict(zip(("train", "val", "test"), preset.spurious_counts))
        env_dir = root / subset
        want = {"counts": counts, "seed": seed, "subset": subset}

        def make(subset=subset, counts=counts, env_dir=env_dir, k=k):
            env_dir.mkdir(parents=True, exist_ok=True)
            cfg = _subset_defaults(subset)
            for split, n in counts.items():
                scenes = [sk.random_scene(SPURIOUS_SEPARATION, seed * 101 + k, split, i, cfg) for i in range(n)]
                di.write_tsv(scenes, env_dir / f"{split}.tsv")
            (env_dir / "manifest.json").write_text(json.dumps({
                "id": subset, "kind": "real", "parameter": subset,
                "source_files": {s: f"{s}.tsv" for s in counts},
                "simulator_defaults": sk._defaults_dict(cfg), "separation": SPURIOUS_SEPARATION,
            }, indent=2))

        out[subset] = _cached_dataset(env_dir, want, make)
    return out


@dataclass
class StyleData:
    """Windowed style environments: ``splits[d][split]``."""

    splits: dict[float, dict[str, di.WindowArrays]]
    digests: dict[str, str] = field(default_factory=dict)

    def train_envs(self) -> list[di.WindowArrays]:
        return [self.splits[d]["train"] for d in TRAIN_STYLES]

    def val_envs(self) -> list[di.WindowArrays]:
        return [self.splits[d]["val"] for d in TRAIN_STYLES]

    def reference_split(self, d: float) -> di.WindowArrays:
        return self.splits[d]["val" if d in TRAIN_STYLES else "adapt"]


def load_style_data(dirs: dict[float, Path]) -> StyleData:
    splits, digests = {}, {}
    for d, env_dir in dirs.items():
        env = sk.style_env_id(d)
        splits[d] = {}
        for path in sorted(env_dir.glob("*.tsv")):
            if not path.exists():
                raise MissingArtifact([str(path)])
            scenes = di.load_tsv(path, env_id=env)
            splits[d][path.stem] = di.stack_windows(di.window_scenes(scenes, env_id=env), env)
            digests[f"{env}/{path.name}"] = di.file_digest(path)
    return StyleData(splits, digests)


@dataclass
class SpuriousData:
    train: list[di.WindowArrays]
    val: list[di.WindowArrays]
    test: dict[float, di.WindowArrays]  # held-out subset per test alpha
    digests: dict[str, str] = field(default_factory=dict)


def load_spurious_data(dirs: dict[str, Path]) -> SpuriousData:
    digests = {}

    def scenes(subset, split):
        path = dirs[subset] / f"{split}.tsv"
        if not path.exists():
            raise MissingArtifact([str(path)])
        digests[f"{subset}/{split}.tsv"] = di.file_digest(path)
        return di.load_tsv(path, env_id=subset)

    train = di.make_spurious_environments({s: scenes(s, "train") for s in SPURIOUS_TRAIN}, SPURIOUS_TRAIN)
    val = di.make_spurious_environments({s: scenes(s, "val") for s in SPURIOUS_TRAIN}, SPURIOUS_TRAIN)
    sweep = di.spurious_test_sweep(scenes(SPURIOUS_HELDOUT, "test"), SPURIOUS_HELDOUT)
    test = {a: di.stack_windows(sweep[di.spurious_env_id(SPURIOUS_HELDOUT, a)]) for a in di.TEST_ALPHAS}
    return SpuriousData([di.stack_windows(w) for w in train.values()], [di.stack_windows(w) for w in val.values()],
                        test, digests)


# ---------------------------------------------------------------- checkpoints


def _ckpt_dir(root: Path, suite: str, method: str, seed: int) -> Path:
    return root / suite / method.replace("+", "_") / f"seed-{seed}"


def _load_or_none(path: Path) -> ModularForecaster | None:
    return ModularForecaster.load(path) if (path / "architecture.json").exists() else None


def _save_run(model: ModularForecaster, path: Path, result: TrainResult, cfg: TrainConfig, extra: dict) -> None:
    model.save(path)
    result.write_csv(path / "history.csv")
    manifest = {"config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict()), "checkpoint": model.digest(),
                **extra}
    (path / "run.json").write_text(json.dumps(manifest, indent=2, default=str))


def check_checkpoints(root: Path, suite: str, methods: Sequence[str], seeds: Sequence[int]) -> None:
    missing = [str(_ckpt_dir(root, suite, m, s)) for m in methods for s in seeds
               if not (_ckpt_dir(root, suite, m, s) / "architecture.json").exists()]
    if missing:
        raise MissingArtifact(missing)


def read_history(path: Path) -> TrainResult:
    from .trainer import EpochRecord

    res = TrainResult()
    lines = (path / "history.csv").read_text().strip().splitlines()[1:]
    for line in lines:
        stage, epoch, loss, val = line.split(",")
        res.history.append(EpochRecord(stage, int(epoch), float(loss), float(val)))
    return res


# ---------------------------------------------------------------- spurious suite


def spurious_methods(lams: Sequence[float]) -> list[str]:
    return ["erm"] + [f"invariant-lam{lam:g}" for lam in lams]


def train_spurious_method(method: str, data: SpuriousData, preset: ScalePreset, seed: int,
                          base: TrainConfig | None = None) -> tuple[ModularForecaster, TrainResult, TrainConfig]:
    cfg = replace(base or TrainConfig(), seed=seed, spurious_epochs=preset.spurious_epochs)
    model = ModularForecaster(Architecture(input_dim=di.input_dim(True)), seed=seed)
    model.only_trainable(("phi", "g"))
    path = InvariantPath(model)
    if method == "erm":
        res = train_spurious(path, data.train, data.val, cfg, "erm")
    elif method.startswith("invariant-lam"):
        lam = float(method[len("invariant-lam"):])
        cfg = replace(cfg, lam=lam)
        res = train_spurious(path, data.train, data.val, cfg, "invariant", lam=lam)
    else:
        raise SuiteError(f"unknown spurious method {method!r}")
    model.unfreeze(*model.nets)
    return model, res, cfg


def run_spurious_suite(
    preset: ScalePreset,
    data_dir: str | Path,
    ckpt_dir: str | Path,
    out_dir: str | Path | None = None,
    seeds: Sequence[int] | None = None,
    lams: Sequence[float] | None = None,
    train_missing: bool = True,
    base: TrainConfig | None = None,
) -> EvalReport:
    """ADE versus alpha on the held-out subset for ERM and invariant training."""
    seeds = tuple(preset.seeds if seeds is None else seeds)
    lams = (preset.lam_spurious,) if lams is None else tuple(lams)
    methods = spurious_methods(lams)
    ckpt_dir = Path(ckpt_dir)
    if not train_missing:
        check_checkpoints(ckpt_dir, "spurious", methods, seeds)
    data = load_spurious_data(ensure_spurious_data(data_dir, preset))
    report = EvalReport(meta={"suite": "spurious", "scale": preset.name, "datasets": data.digests,
                              "preset": asdict(preset), "checkpoints": {}})
    for method in methods:
        for seed in seeds:
            path = _ckpt_dir(ckpt_dir, "spurious", method, seed)
            model = _load_or_none(path)
            if model is None:
                t0 = time.time()
                model, res, cfg = train_spurious_method(method, data, preset, seed, base)
                _save_run(model, path, res, cfg, {"datasets": data.digests, "method": method})
                log.info("spurious %s seed %d trained in %.1fs", method, seed, time.time() - t0)
            report.meta["checkpoints"][f"{method}/seed-{seed}"] = model.digest()
            for alpha, arr in data.test.items():
                pred = model.invariant_forward(arr.inputs).data
                report.add(method, di.spurious_env_id(SPURIOUS_HELDOUT, alpha), seed,
                           ade(pred, arr.targets), fde(pred, arr.targets))
    if out_dir is not None:
        out = Path(out_dir)
        report.write(out, "spurious")
        curves = {m: [report.mean_ade(m, di.spurious_env_id(SPURIOUS_HELDOUT, a)) for a in di.TEST_ALPHAS]
                  for m in methods}
        write_curve(out / "spurious_curve.dat", "alpha", di.TEST_ALPHAS, curves)
    return report


def degradation_ratio(report: EvalReport, method: str, alpha: float = 64.0) -> float:
    """ADE at ``alpha`` over the mean ADE at the training strengths, on the held-out subset."""
    train_ade = np.mean([report.mean_ade(method, di.spurious_env_id(SPURIOUS_HELDOUT, a)) for a in SPURIOUS_TRAIN.values()])
    return report.mean_ade(method, di.spurious_env_id(SPURIOUS_HELDOUT, alpha)) / float(train_ade)


# ---------------------------------------------------------------- style suite


def style_config(preset: ScalePreset, seed: int, base: TrainConfig | None = None, **overrides) -> TrainConfig:
    fields = {"seed": seed, "stage_epochs": preset.stage_epochs, "lam": preset.lam_style, **overrides}
    return replace(base or TrainConfig(), **fields)


def train_style_method(method: str, data: StyleData, preset: ScalePreset, seed: int,
                       base: TrainConfig | None = None) -> tuple[ModularForecaster, TrainResult, TrainConfig]:
    model = ModularForecaster(Architecture(input_dim=di.input_dim(False)), seed=seed)
    train, val = data.train_envs(), data.val_envs()
    if method in ("vanilla", "invariant"):
        stage1 = "erm" if method == "vanilla" else "invariant"
        cfg = style_config(preset, seed, base, stage1=stage1,
                           stage_epochs=(preset.baseline_epochs, 0, 0, 0))
    elif method in ("modular", "inv+mod"):
        cfg = style_config(preset, seed, base, stage1="erm" if method == "modular" else "invariant")
    elif method == "modular-nopretrain":
        cfg = style_config(preset, seed, base, stage1="erm", contrastive_pretrain=False)
    else:
        raise SuiteError(f"unknown style method {method!r}")
    res = train_modular_staged(model, train, val, cfg)
    return model, res, cfg


def is_modular(method: str) -> bool:
    return method not in ("vanilla", "invariant")


def predict_env(model: ModularForecaster, method: str, data: StyleData, d: float, split: str = "test",
                seed: int = 0, n_obs: int = 8) -> tuple[np.ndarray, np.ndarray]:
    arr = data.splits[d][split]
    if not is_modular(method):
        return model.invariant_forward(arr.inputs).data, arr.targets
    ref = StyleEnvs.from_arrays([data.reference_split(d)])
    obs = eval_observations(ref, n_obs, seed + 1000)[0]
    return predict_with_style(model, arr.inputs, obs), arr.targets


def style_environments() -> list[tuple[str, tuple[float, ...]]]:
    return [("iid", TRAIN_STYLES)] + [(sk.style_env_id(d), (d,)) for d in TEST_STYLES]


def _style_checkpoints(methods, data, preset, seeds, ckpt_dir, train_missing, base, suite="style"):
    ckpt_dir = Path(ckpt_dir)
    if not train_missing:
        check_checkpoints(ckpt_dir, suite, methods, seeds)
    models = {}
    for method in methods:
        for seed in seeds:
            path = _ckpt_dir(ckpt_dir, suite, method, seed)
            model = _load_or_none(path)
            if model is None:
                t0 = time.time()
                model, res, cfg = train_style_method(method, data, preset, seed, base)
                _save_run(model, path, res, cfg, {"datasets": data.digests, "method": method})
                log.info("%s %s seed %d trained in %.1fs", suite, method, seed, time.time() - t0)
            models[method, seed] = model
    return models


def run_style_suite(
    preset: ScalePreset,
    data_dir: str | Path,
    ckpt_dir: str | Path,
    out_dir: str | Path | None = None,
    seeds: Sequence[int] | None = None,
    methods: Sequence[str] = STYLE_METHODS,
    train_missing: bool = True,
    base: TrainConfig | None = None,
) -> EvalReport:
    """ADE/FDE of each method on IID (pooled training styles) and every test style."""
    seeds = tuple(preset.seeds if seeds is None else seeds)
    data = load_style_data(ensure_style_data(data_dir, preset))
    models = _style_checkpoints(methods, data, preset, seeds, ckpt_dir, train_missing, base)
    report = EvalReport(meta={"suite": "style", "scale": preset.name, "datasets": data.digests,
                              "preset": asdict(preset),
                              "checkpoints": {f"{m}/seed-{s}": mdl.digest() for (m, s), mdl in models.items()}})
    for (method, seed), model in models.items():
        for env_name, styles in style_environments():
            preds, targets = zip(*(predict_env(model, method, data, d, seed=seed) for d in styles))
            p, t = np.concatenate(preds), np.concatenate(targets)
            report.add(method, env_name, seed, ade(p, t), fde(p, t))
    if out_dir is not None:
        report.write(out_dir, "style")
    return report


# ---------------------------------------------------------------- transfer suite


def run_transfer_suite(
    preset: ScalePreset,
    data_dir: str | Path,
    ckpt_dir: str | Path,
    out_dir: str | Path | None = None,
    seeds: Sequence[int] | None = None,
    target: float = 0.6,
    ks: Sequence[int] = (1, 2, 3, 4, 5, 6),
    base_method: str = "inv+mod",
    train_missing: bool = True,
    base: TrainConfig | None = None,
    acfg: AdaptConfig | None = None,
) -> EvalReport:
    """ADE versus adaptation budget on one test style for the three adaptation curves."""
    seeds = tuple(preset.seeds if seeds is None else seeds)
    data = load_style_data(ensure_style_data(data_dir, preset))
    if target not in data.splits:
        raise MissingArtifact([f"style-{target:g}"])
    models = _style_checkpoints([base_method], data, preset, seeds, ckpt_dir, train_missing, base)
    pool = data.splits[target]["adapt"]
    test = data.splits[target]["test"]
    env = sk.style_env_id(target)
    report = EvalReport(meta={"suite": "transfer", "scale": preset.name, "target": target,
                              "base_method": base_method, "datasets": data.digests, "checkpoints": {}})
    for seed in seeds:
        model = models[base_method, seed]
        cfg = style_config(preset, seed, base)
        a = replace(acfg or AdaptConfig(), seed=seed, epochs=preset.adapt_epochs)
        base_digest = model.digest()
        for k in ks:
            for strategy, name in (("all", "finetune-all"), ("mod", "modulator-only")):
                res = finetune(model, pool, strategy, k, cfg, a)
                obs = pool.style_features[res.reference_rows]
                pred = predict_with_style(res.model, test.inputs, obs)
                report.add(name, env, seed, ade(pred, test.targets), fde(pred, test.targets), k_batches=k)
                if strategy == "mod":
                    refs = build_style_references(res.model, obs, a.n_refs)
                    ref = refine_arrays(res.model, test, obs, refs, a)
                    report.add("modulator-only+refine", env, seed, ade(ref.y_hat, test.targets),
                               fde(ref.y_hat, test.targets), k_batches=k, refine_iters=a.refine_iters)
        if model.digest() != base_digest:
            raise SuiteError("adaptation modified the base checkpoint")
        report.meta["checkpoints"][f"{base_method}/seed-{seed}"] = base_digest
    if out_dir is not None:
        out = Path(out_dir)
        report.write(out, "transfer")
        curves = {
            "finetune-all": [report.mean_ade("finetune-all", env, k) for k in ks],
            "modulator-only": [report.mean_ade("modulator-only", env, k) for k in ks],
            "modulator-only+refine": [report.mean_ade("modulator-only+refine", env, k, a.refine_iters) for k in ks],
        }
        write_curve(out / "transfer_curve.dat", "k", ks, curves)
    return report


# ---------------------------------------------------------------- contrastive ablation


def quarter_epoch(total: int) -> int:
    return max(1, int(np.ceil(0.25 * total)))


def run_contrastive_ablation(
    preset: ScalePreset,
    data_dir: str | Path,
    ckpt_dir: str | Path,
    out_dir: str | Path | None = None,
    seeds: Sequence[int] | None = None,
    train_missing: bool = True,
    base: TrainConfig | None = None,
) -> dict:
    """Stage-4 validation curves with and without stage-2 pre-training, same seeds."""
    seeds = tuple(preset.seeds if seeds is None else seeds)
    data = load_style_data(ensure_style_data(data_dir, preset))
    methods = ("modular", "modular-nopretrain")
    _style_checkpoints(methods, data, preset, seeds, ckpt_dir, train_missing, base)
    mark = quarter_epoch(preset.stage_epochs[3])
    curves = {m: {s: read_history(_ckpt_dir(Path(ckpt_dir), "style", m, s)).stage_curve("stage4") for s in seeds}
              for m in methods}
    at_mark = {m: {s: curves[m][s][mark - 1] for s in seeds} for m in methods}
    summary = {
        "mark_epoch": mark,
        "with_pretrain": at_mark["modular"],
        "without_pretrain": at_mark["modular-nopretrain"],
        "mean_with": float(np.mean(list(at_mark["modular"].values()))),
        "mean_without": float(np.mean(list(at_mark["modular-nopretrain"].values()))),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        n = preset.stage_epochs[3]
        mean_curves = {m: list(np.mean([curves[m][s] for s in seeds], axis=0)) for m in methods}
        write_curve(out / "contrastive_curve.dat", "epoch", list(range(1, n + 1)), mean_curves)
        (out / "contrastive.json").write_text(json.dumps(summary, indent=2))
    return summary
