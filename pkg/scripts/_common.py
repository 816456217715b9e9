"""Shared argument handling for the experiment scripts."""

import argparse
import logging
from pathlib import Path

from motionshift import suites as S


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--scale", default="small", choices=sorted(S.SCALES))
    p.add_argument("--out-dir", default="runs", type=Path)
    p.add_argument("--seeds", default=None, help="comma-separated; default is the preset's seeds")
    return p


def setup(args):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    preset = S.get_scale(args.scale)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else preset.seeds
    root = args.out_dir
    return preset, seeds, root / "data", root / "checkpoints", root / "reports"
