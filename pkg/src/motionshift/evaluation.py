"""Displacement metrics and the per-seed evaluation report."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_HEADER = ("method", "environment", "seed", "ade", "fde", "k_batches", "refine_iters")


class MetricError(Exception):
    pass


class ReportError(Exception):
    pass


def _check(y_hat, y) -> tuple[np.ndarray, np.ndarray]:
    y_hat, y = np.asarray(y_hat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape or y.shape[-1] != 2 or y.ndim < 2:
        raise MetricError(f"expected matching (..., T, 2) arrays, got {y_hat.shape} and {y.shape}")
    return y_hat, y


def ade(y_hat, y) -> float:
    """Mean over steps (and instances) of the Euclidean error."""
    y_hat, y = _check(y_hat, y)
    return float(np.mean(np.sqrt(((y_hat - y) ** 2).sum(axis=-1))))


def fde(y_hat, y) -> float:
    """Euclidean error at the last step, averaged over instances."""
    y_hat, y = _check(y_hat, y)
    return float(np.mean(np.sqrt(((y_hat[..., -1, :] - y[..., -1, :]) ** 2).sum(axis=-1))))


@dataclass(frozen=True)
class ReportRow:
    method: str
    environment: str
    seed: int
    ade: float
    fde: float
    k_batches: int = 0
    refine_iters: int = 0

    def key(self) -> tuple:
        return (self.method, self.environment, self.k_batches, self.refine_iters)


@dataclass
class Aggregate:
    method: str
    environment: str
    k_batches: int
    refine_iters: int
    n_seeds: int
    ade_mean: float
    ade_std: float
    fde_mean: float
    fde_std: float


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, method: str, environment: str, seed: int, ade_value: float, fde_value: float,
            k_batches: int = 0, refine_iters: int = 0) -> None:
        if not (math.isfinite(ade_value) and math.isfinite(fde_value)):
            raise ReportError(f"non-finite metric for {method}/{environment}/seed {seed}")
        self.rows.append(ReportRow(method, environment, int(seed), float(ade_value), float(fde_value),
                                   int(k_batches), int(refine_iters)))

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.meta.update(other.meta)

    def aggregates(self) -> list[Aggregate]:
        """Mean and sample standard deviation (ddof=1) per cell, recomputed from rows."""
        cells: dict[tuple, list[ReportRow]] = {}
        for r in self.rows:
            cells.setdefault(r.key(), []).append(r)
        out = []
        for (method, env, k, it), rows in sorted(cells.items()):
            rows = sorted(rows, key=lambda r: r.seed)
            a = np.array([r.ade for r in rows])
            f = np.array([r.fde for r in rows])
            ddof = 1 if len(rows) > 1 else 0
            out.append(Aggregate(method, env, k, it, len(rows), float(a.mean()), float(a.std(ddof=ddof)),
                                 float(f.mean()), float(f.std(ddof=ddof))))
        return out

    def mean_ade(self, method: str, environment: str, k_batches: int = 0, refine_iters: int = 0) -> float:
        vals = [r.ade for r in self.rows if r.key() == (method, environment, k_batches, refine_iters)]
        if not vals:
            raise ReportError(f"no rows for {method}/{environment}/k={k_batches}/iters={refine_iters}")
        return float(np.mean(vals))

    def table(self, environments: Sequence[str] | None = None) -> str:
        aggs = self.aggregates()
        envs = list(environments) if environments else sorted({a.environment for a in aggs})
        methods = list(dict.fromkeys(a.method for a in aggs))
        lookup = {(a.method, a.environment): a for a in aggs if a.k_batches == 0 and a.refine_iters == 0}
        lines = ["method".ljust(16) + "".join(e.rjust(18) for e in envs)]
        for m in methods:
            cells = []
            for e in envs:
                a = lookup.get((m, e))
                cells.append(f"{a.ade_mean:.3f} ± {a.ade_std:.3f}".rjust(18) if a else "-".rjust(18))
            lines.append(m.ljust(16) + "".join(cells))
        return "\n".join(lines)

    # --- serialization

    def write(self, out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            csv_path = out_dir / f"{stem}.csv"
            with csv_path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_HEADER)
                for r in self.rows:
                    w.writerow([r.method, r.environment, r.seed, repr(r.ade), repr(r.fde), r.k_batches,
                                r.refine_iters])
            agg_path = out_dir / f"{stem}_aggregate.csv"
            with agg_path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["method", "environment", "k_batches", "refine_iters", "n_seeds",
                            "ade_mean", "ade_std", "fde_mean", "fde_std"])
                for a in self.aggregates():
                    w.writerow([a.method, a.environment, a.k_batches, a.refine_iters, a.n_seeds,
                                repr(a.ade_mean), repr(a.ade_std), repr(a.fde_mean), repr(a.fde_std)])
            json_path = out_dir / f"{stem}.json"
            json_path.write_text(json.dumps({
                "meta": self.meta,
                "rows": [asdict(r) for r in self.rows],
                "aggregates": [asdict(a) for a in self.aggregates()],
            }, indent=2, sort_keys=True))
        except OSError as exc:
            raise ReportError(f"cannot write report to {out_dir}: {exc}") from exc
        return {"csv": csv_path, "aggregate": agg_path, "json": json_path}

    @classmethod
    def read_csv(cls, path: str | Path) -> "EvalReport":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        with path.open() as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_HEADER:
                raise ReportError(f"{path}: unexpected header {reader.fieldnames}")
            rows = [ReportRow(r["method"], r["environment"], int(r["seed"]), float(r["ade"]), float(r["fde"]),
                              int(r["k_batches"]), int(r["refine_iters"])) for r in reader]
        return cls(rows)

    @classmethod
    def merge(cls, reports: Iterable["EvalReport"]) -> "EvalReport":
        out = cls()
        for r in reports:
            out.extend(r)
        return out


def write_curve(path: str | Path, x_name: str, x_values: Sequence, curves: dict[str, Sequence[float]]) -> Path:
    """Whitespace-separated columns (x, one column per curve) for any plotting tool."""
    path = Path(path)
    names = list(curves)
    lines = ["# " + " ".join([x_name] + names)]
    for i, x in enumerate(x_values):
        lines.append(" ".join([f"{x:g}"] + [f"{curves[n][i]:.6f}" for n in names]))
    path.write_text("\n".join(lines) + "\n")
    return path
