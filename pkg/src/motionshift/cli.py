"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import dataio as di
from . import diffcore as dc
from . import simkit as sk
from . import suites as S
from .adapt import AdaptConfig, AdaptError, build_style_references, finetune, refine_arrays
from .evaluation import EvalReport, ReportError, ade, fde
from .model import ModularForecaster
from .trainer import TrainConfig, TrainingDiverged, predict_with_style

log = logging.getLogger("motionshift")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(Exception):
    pass


def load_config(path: str | None) -> tuple[TrainConfig, AdaptConfig]:
    """JSON with optional ``train`` and ``adapt`` sections; unknown keys are rejected."""
    if path is None:
        return TrainConfig(), AdaptConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    unknown = set(raw) - {"train", "adapt"}
    if unknown:
        raise ConfigError(f"{p}: unknown sections {sorted(unknown)}")
    out = []
    for section, cls in (("train", TrainConfig), ("adapt", AdaptConfig)):
        body = raw.get(section, {})
        names = {f.name for f in fields(cls)}
        bad = set(body) - names
        if bad:
            raise ConfigError(f"{p}: unknown {section} keys {sorted(bad)}")
        try:
            out.append(cls.from_dict(body) if cls is TrainConfig else cls(**body))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    return out[0], out[1]


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _seeds(args, preset) -> tuple[int, ...]:
    if args.seeds:
        return tuple(int(s) for s in args.seeds.split(","))
    if args.seed is not None:
        return (args.seed,)
    return preset.seeds


# ---------------------------------------------------------------- verbs


def cmd_simulate(args, cfg, acfg) -> int:
    preset = S.get_scale(args.scale)
    data_dir = Path(args.out_dir) / "data"
    seed = args.seed or 0
    if args.styles:
        counts = dict(zip(("train", "val", "test"), preset.style_counts))
        for d in _parse_floats(args.styles):
            path = sk.generate_dataset(d, counts, seed, data_dir / "style" / "custom")
            print(path)
        return EXIT_OK
    if args.kind in ("style", "all"):
        for d, path in S.ensure_style_data(data_dir, preset, seed).items():
            print(path)
    if args.kind in ("spurious", "all"):
        for subset, path in S.ensure_spurious_data(data_dir, preset, seed).items():
            print(path)
    return EXIT_OK


def cmd_augment(args, cfg, acfg) -> int:
    """Attach the curvature channel to subset files and store stacked windows."""
    src = Path(args.input_dir)
    out = Path(args.out_dir) / "augmented"
    out.mkdir(parents=True, exist_ok=True)
    alphas = dict(di.TRAIN_ALPHAS)
    if args.alphas:
        alphas = {}
        for item in args.alphas.split(","):
            name, _, value = item.partition("=")
            try:
                alphas[name] = float(value)
            except ValueError as exc:
                raise ConfigError(f"bad alpha assignment {item!r}") from exc
    scenes = {}
    for subset in alphas:
        path = src / f"{subset}.tsv"
        if not path.exists():
            path = src / subset / f"{args.split}.tsv"
        if not path.exists():
            raise FileNotFoundError(path)
        scenes[subset] = di.load_tsv(path, env_id=subset)
    envs = di.make_spurious_environments(scenes, alphas)
    strength = {di.spurious_env_id(k, a): a for k, a in alphas.items()}
    heldout = src / f"{args.heldout}.tsv"
    if not heldout.exists():
        heldout = src / args.heldout / "test.tsv"
    if heldout.exists():
        envs.update(di.spurious_test_sweep(di.load_tsv(heldout, env_id=args.heldout), args.heldout))
        strength.update({di.spurious_env_id(args.heldout, a): a for a in di.TEST_ALPHAS})
    for env, windows in envs.items():
        if not windows:
            log.warning("%s: no windows", env)
            continue
        arr = di.stack_windows(windows, env)
        np.savez(out / f"{env}.npz", inputs=arr.inputs, targets=arr.targets, origins=arr.origins)
        tag = di.EnvironmentTag(env, "spurious", strength[env])
        di.write_manifest(tag, [str(src)], out / f"{env}.json")
        print(f"{env}\t{len(arr)} windows")
    return EXIT_OK


def cmd_train(args, cfg, acfg) -> int:
    preset = S.get_scale(args.scale)
    data_dir, ckpt = Path(args.out_dir) / "data", Path(args.out_dir) / "checkpoints"
    seeds = _seeds(args, preset)
    cfg = replace(cfg, lam=args.lam) if args.lam is not None else cfg
    if args.suite == "spurious":
        if args.mode == "modular":
            raise ConfigError("the spurious suite trains erm or invariant models only")
        data = S.load_spurious_data(S.ensure_spurious_data(data_dir, preset))
        lam = cfg.lam if args.lam is not None else preset.lam_spurious
        method = "erm" if args.mode == "erm" else f"invariant-lam{lam:g}"
        for seed in seeds:
            model, res, used = S.train_spurious_method(method, data, preset, seed, cfg)
            path = S._ckpt_dir(ckpt, "spurious", method, seed)
            S._save_run(model, path, res, used, {"datasets": data.digests, "method": method})
            print(f"{path}\t{model.digest()}")
        return EXIT_OK
    data = S.load_style_data(S.ensure_style_data(data_dir, preset))
    method = {"erm": "vanilla", "invariant": "invariant", "modular": args.variant}[args.mode]
    for seed in seeds:
        model, res, used = S.train_style_method(method, data, preset, seed, cfg)
        path = S._ckpt_dir(ckpt, "style", method, seed)
        S._save_run(model, path, res, used, {"datasets": data.digests, "method": method})
        print(f"{path}\t{model.digest()}")
    return EXIT_OK


def cmd_eval(args, cfg, acfg) -> int:
    preset = S.get_scale(args.scale)
    root = Path(args.out_dir)
    data_dir, ckpt, reports = root / "data", root / "checkpoints", root / "reports"
    seeds = _seeds(args, preset)
    train_missing = args.train_missing
    if args.suite == "spurious":
        lams = _parse_floats(args.lams) if args.lams else None
        report = S.run_spurious_suite(preset, data_dir, ckpt, reports, seeds, lams, train_missing, cfg)
        print(report.table([di.spurious_env_id("eth", a) for a in di.TEST_ALPHAS]))
        for m in S.spurious_methods(lams or (preset.lam_spurious,)):
            print(f"{m}: ADE@64 / ADE@train = {S.degradation_ratio(report, m):.3f}")
    elif args.suite == "style":
        report = S.run_style_suite(preset, data_dir, ckpt, reports, seeds, train_missing=train_missing, base=cfg)
        print(report.table([e for e, _ in S.style_environments()]))
    elif args.suite == "transfer":
        report = S.run_transfer_suite(preset, data_dir, ckpt, reports, seeds, target=args.target,
                                      train_missing=train_missing, base=cfg, acfg=acfg)
        for a in report.aggregates():
            print(f"{a.method:24s} k={a.k_batches}  ADE {a.ade_mean:.4f} ± {a.ade_std:.4f}")
    else:
        summary = S.run_contrastive_ablation(preset, data_dir, ckpt, reports, seeds, train_missing, cfg)
        print(json.dumps(summary, indent=2))
    return EXIT_OK


def _append(report: EvalReport, path: Path) -> None:
    if path.exists():
        old = EvalReport.read_csv(path)
        old.rows.extend(report.rows)
        report = old
    report.write(path.parent, path.stem)


def _base_for_adaptation(args, preset, seed):
    ckpt = Path(args.checkpoint) if args.checkpoint else S._ckpt_dir(Path(args.out_dir) / "checkpoints", "style",
                                                                       args.base_method, seed)
    if not (ckpt / "architecture.json").exists():
        raise S.MissingArtifact([str(ckpt)])
    return ModularForecaster.load(ckpt)


def cmd_adapt(args, cfg, acfg) -> int:
    preset = S.get_scale(args.scale)
    data = S.load_style_data(S.ensure_style_data(Path(args.out_dir) / "data", preset))
    pool, test = data.splits[args.target]["adapt"], data.splits[args.target]["test"]
    report = EvalReport()
    for seed in _seeds(args, preset):
        model = _base_for_adaptation(args, preset, seed)
        a = replace(acfg, seed=seed)
        res = finetune(model, pool, args.strategy, args.k, replace(cfg, seed=seed), a)
        obs = pool.style_features[res.reference_rows]
        pred = predict_with_style(res.model, test.inputs, obs)
        name = "finetune-all" if args.strategy == "all" else "modulator-only"
        report.add(name, sk.style_env_id(args.target), seed, ade(pred, test.targets), fde(pred, test.targets),
                   k_batches=args.k)
        out = Path(args.out_dir) / "checkpoints" / "adapted" / f"{args.strategy}-k{args.k}" / f"seed-{seed}"
        res.model.save(out)
        res.history.write_csv(out / "history.csv")
        print(f"{name} k={args.k} seed={seed}: ADE {report.rows[-1].ade:.4f}  ->  {out}")
    _append(report, Path(args.out_dir) / "reports" / "adapt.csv")
    return EXIT_OK


def cmd_refine(args, cfg, acfg) -> int:
    preset = S.get_scale(args.scale)
    data = S.load_style_data(S.ensure_style_data(Path(args.out_dir) / "data", preset))
    pool, test = data.splits[args.target]["adapt"], data.splits[args.target]["test"]
    a = replace(acfg, refine_iters=args.iters, n_refs=args.refs)
    report = EvalReport()
    for seed in _seeds(args, preset):
        model = _base_for_adaptation(args, preset, seed)
        before = model.digest()
        obs = pool.style_features[np.random.default_rng(seed).permutation(len(pool))[: a.n_refs]]
        refs = build_style_references(model, obs, a.n_refs)
        res = refine_arrays(model, test, obs, refs, a)
        if model.digest() != before:
            raise dc.DiffError("refinement changed the checkpoint")
        report.add("refine", sk.style_env_id(args.target), seed, ade(res.y_hat, test.targets),
                   fde(res.y_hat, test.targets), refine_iters=args.iters)
        print(f"seed {seed}: ADE {ade(res.y_init, test.targets):.4f} -> {report.rows[-1].ade:.4f}"
              f" (objective {res.objective[0].mean():.4f} -> {res.objective[-1].mean():.4f})")
    _append(report, Path(args.out_dir) / "reports" / "refine.csv")
    return EXIT_OK


def cmd_report(args, cfg, acfg) -> int:
    paths = [Path(p) for p in args.inputs] or sorted((Path(args.out_dir) / "reports").glob("*.csv"))
    paths = [p for p in paths if not p.stem.endswith("_aggregate")]
    if not paths:
        raise S.MissingArtifact([str(Path(args.out_dir) / "reports" / "*.csv")])
    merged = EvalReport.merge(EvalReport.read_csv(p) for p in paths)
    files = merged.write(Path(args.out_dir) / "reports", args.name)
    print(merged.table())
    for kind, path in files.items():
        print(f"{kind}: {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="single seed (default: preset seeds)")
    common.add_argument("--config", default=None, help="JSON with 'train' and 'adapt' sections")
    common.add_argument("--out-dir", default="runs", help="root for data, checkpoints and reports")
    common.add_argument("--scale", default="desk", choices=sorted(S.SCALES), help="dataset and epoch preset")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="motionshift", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate ORCA datasets")
    p.add_argument("--kind", choices=("style", "spurious", "all"), default="all")
    p.add_argument("--styles", default=None, help="comma-separated separations for a custom set")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("augment", parents=[common], help="attach the curvature channel to subset files")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--alphas", default=None, help="subset=alpha,... (default hotel=1,univ=2,zara1=4,zara2=8)")
    p.add_argument("--heldout", default="eth")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train checkpoints")
    p.add_argument("--mode", choices=("erm", "invariant", "modular"), required=True)
    p.add_argument("--suite", choices=("style", "spurious"), default="style")
    p.add_argument("--variant", choices=("modular", "inv+mod", "modular-nopretrain"), default="inv+mod")
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--seeds", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="run an evaluation suite")
    p.add_argument("--suite", choices=("spurious", "style", "transfer", "contrastive"), required=True)
    p.add_argument("--lams", default=None, help="comma-separated penalty weights (spurious suite)")
    p.add_argument("--target", type=float, default=0.6)
    p.add_argument("--seeds", default=None)
    p.add_argument("--train-missing", action="store_true", help="train absent checkpoints instead of failing")
    p.set_defaults(func=cmd_eval)

    for name, helptext in (("adapt", "low-shot fine-tuning on a test style"),
                           ("refine", "test-time refinement on a test style")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--target", type=float, default=0.6)
        p.add_argument("--checkpoint", default=None, help="modular checkpoint directory")
        p.add_argument("--base-method", default="inv+mod")
        p.add_argument("--seeds", default=None)
        if name == "adapt":
            p.add_argument("--strategy", choices=("all", "mod"), required=True)
            p.add_argument("--k", type=int, required=True)
            p.set_defaults(func=cmd_adapt)
        else:
            p.add_argument("--iters", type=int, default=3)
            p.add_argument("--refs", type=int, default=8)
            p.set_defaults(func=cmd_refine)

    p = sub.add_parser("report", parents=[common], help="merge report CSVs and recompute aggregates")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--name", default="merged")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg, acfg = load_config(args.config)
        return args.func(args, cfg, acfg)
    except (ConfigError, S.SuiteError) as exc:
        if isinstance(exc, S.MissingArtifact):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_MISSING
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AdaptError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ReportError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, dc.NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
