"""Trajectory files, sliding windows and the curvature-driven noise channel.

TSV rows are ``frame_id agent_id x y`` (ETH-UCY convention, whitespace
separated). A file is split into scenes at gaps in the frame sequence; inside
a scene every agent gets a row per frame, NaN where it is absent.

Windows are 8 observed + 12 future steps, translated so the primary agent's
last observed position is the origin. No rotation is applied.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .simkit import TrajectoryScene

OBS_LEN = 8
PRED_LEN = 12
WINDOW_LEN = OBS_LEN + PRED_LEN
MAX_NEIGHBORS = 5
CURVATURE_LAG = 8

ETH_UCY_SUBSETS = ("eth", "hotel", "univ", "zara1", "zara2")
TRAIN_ALPHAS = {"hotel": 1.0, "univ": 2.0, "zara1": 4.0, "zara2": 8.0}
TEST_ALPHAS = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)


class DataError(Exception):
    pass


class TrajectoryFormatError(DataError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


@dataclass(frozen=True)
class EnvironmentTag:
    id: str
    kind: str
    parameter: float | str

    def __post_init__(self):
        if self.kind == "spurious" and not float(self.parameter) > 0:
            raise ValueError("spurious strength alpha must be positive")
        if self.kind == "style" and float(self.parameter) < 0:
            raise ValueError("style separation must be non-negative")
        if self.kind not in ("spurious", "style", "real"):
            raise ValueError(f"unknown environment kind {self.kind!r}")


@dataclass
class InstanceWindow:
    past: np.ndarray  # (8, 2), or (8, 3) with the sigma channel
    future: np.ndarray  # (12, 2)
    neighbors: np.ndarray  # (K, 8, 2) neighbour minus primary, per step
    neighbor_mask: np.ndarray  # (K,) bool
    env_id: str
    origin: np.ndarray  # world position of the last observed step
    scene_id: str = ""
    agent_id: int = -1
    start_frame: int = 0
    neighbor_ids: tuple = ()
    style_neighbor: np.ndarray | None = None  # (20, 2) nearest neighbour, normalised frame

    @property
    def has_sigma(self) -> bool:
        return self.past.shape[1] == 3


# ---------------------------------------------------------------- TSV


def load_tsv(path: str | Path, env_id: str = "", dt: float = 0.4) -> list[TrajectoryScene]:
    path = Path(path)
    rows = []
    last_frame = -np.inf
    with path.open() as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise TrajectoryFormatError(path, line_no, f"expected 4 fields, got {len(parts)}")
            try:
                frame, agent, x, y = (float(v) for v in parts)
            except ValueError:
                raise TrajectoryFormatError(path, line_no, "non-numeric field") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise TrajectoryFormatError(path, line_no, "non-finite coordinate")
            if frame < last_frame:
                raise TrajectoryFormatError(path, line_no, f"frame {frame:g} after {last_frame:g}")
            last_frame = frame
            rows.append((int(round(frame)), int(round(agent)), x, y))
    if not rows:
        return []
    frames = np.array(sorted({r[0] for r in rows}))
    diffs = np.diff(frames)
    stride = int(diffs.min()) if diffs.size else 1
    if diffs.size and np.any(diffs % stride):
        raise DataError(f"{path}: frames are not on a constant stride of {stride}")
    breaks = np.flatnonzero(diffs > stride) + 1
    segments = np.split(frames, breaks)
    by_frame: dict[int, list] = {}
    for frame, agent, x, y in rows:
        by_frame.setdefault(frame, []).append((agent, x, y))
    scenes = []
    stem = path.stem
    for k, seg in enumerate(segments):
        agents = sorted({a for f in seg for a, _, _ in by_frame[f]})
        col = {a: i for i, a in enumerate(agents)}
        pos = np.full((len(seg), len(agents), 2), np.nan)
        for t, f in enumerate(seg):
            for a, x, y in by_frame[f]:
                pos[t, col[a]] = (x, y)
        scenes.append(TrajectoryScene(f"{stem}-{k}", env_id, dt, seg.copy(), agents, pos))
    return scenes


def write_tsv(scenes: Sequence[TrajectoryScene], path: str | Path, gap: int = 5) -> None:
    """Write scenes one after another; frame ids are offset so scenes never touch."""
    path = Path(path)
    lines = []
    offset = 0
    agent_offset = 0
    for scene in scenes:
        for t in range(scene.n_frames):
            for m in range(scene.n_agents):
                x, y = scene.positions[t, m]
                if np.isfinite(x):
                    lines.append(f"{offset + t}\t{agent_offset + m}\t{x:.6f}\t{y:.6f}")
        offset += scene.n_frames + gap
        agent_offset += scene.n_agents
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- sigma


def curvature_sigma(trajectory: np.ndarray, alpha: float, lag: int = CURVATURE_LAG) -> np.ndarray:
    """Per-frame noise level ``alpha * (gamma + 1)``.

    ``gamma_t`` is the squared change of the one-step velocity over ``lag``
    frames. Frames too close to the end reuse the last defined value.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = traj.shape[0]
    if n < lag + 2:
        raise DataError(f"trajectory of length {n} is shorter than lag + 2 = {lag + 2}")
    vel = np.diff(traj, axis=0)
    dv = vel[lag:] - vel[: vel.shape[0] - lag]
    gamma = (dv**2).sum(axis=1)
    gamma = np.concatenate([gamma, np.full(n - gamma.shape[0], gamma[-1])])
    return alpha * (gamma + 1.0)


# ---------------------------------------------------------------- windows


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges where ``mask`` is True."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(int)))
    return list(zip(edges[::2], edges[1::2]))


def window_scenes(
    scenes: Iterable[TrajectoryScene],
    env_id: str | None = None,
    alpha: float | None = None,
    max_neighbors: int = MAX_NEIGHBORS,
) -> list[InstanceWindow]:
    """Every stride-1 window of 20 frames in which the primary agent is present."""
    out = []
    for scene in scenes:
        present = scene.present()
        env = env_id if env_id is not None else scene.env_id
        sigma = np.full(scene.positions.shape[:2], np.nan)
        if alpha is not None:
            for m in range(scene.n_agents):
                for lo, hi in _runs(present[:, m]):
                    if hi - lo >= CURVATURE_LAG + 2:
                        sigma[lo:hi, m] = curvature_sigma(scene.positions[lo:hi, m], alpha)
        for m in range(scene.n_agents):
            for lo, hi in _runs(present[:, m]):
                for s in range(lo, hi - WINDOW_LEN + 1):
                    if alpha is not None and not np.all(np.isfinite(sigma[s:s + OBS_LEN, m])):
                        continue
                    out.append(_make_window(scene, m, s, env, sigma if alpha is not None else None, max_neighbors))
    return out


def _make_window(scene, m, s, env, sigma, k_max) -> InstanceWindow:
    pos = scene.positions
    present = scene.present()
    obs = slice(s, s + OBS_LEN)
    full = slice(s, s + WINDOW_LEN)
    origin = pos[s + OBS_LEN - 1, m].copy()
    past = pos[obs, m] - origin
    if sigma is not None:
        past = np.concatenate([past, sigma[obs, m][:, None]], axis=1)
    future = pos[s + OBS_LEN: s + WINDOW_LEN, m] - origin

    last = s + OBS_LEN - 1
    candidates = [j for j in range(scene.n_agents) if j != m and present[obs, j].all()]
    dist = [float(np.hypot(*(pos[last, j] - pos[last, m]))) for j in candidates]
    order = [candidates[i] for i in np.argsort(dist, kind="stable")][:k_max]
    neighbors = np.zeros((k_max, OBS_LEN, 2))
    mask = np.zeros(k_max, dtype=bool)
    for slot, j in enumerate(order):
        neighbors[slot] = pos[obs, j] - pos[obs, m]
        mask[slot] = True

    style_neighbor = None
    for j in order:
        if present[full, j].all():
            style_neighbor = pos[full, j] - origin
            break
    return InstanceWindow(
        past=past,
        future=future,
        neighbors=neighbors,
        neighbor_mask=mask,
        env_id=env,
        origin=origin,
        scene_id=scene.scene_id,
        agent_id=int(scene.agent_ids[m]),
        start_frame=int(scene.frames[s]),
        neighbor_ids=tuple(int(scene.agent_ids[j]) for j in order),
        style_neighbor=style_neighbor,
    )


# ---------------------------------------------------------------- environments


def spurious_env_id(subset: str, alpha: float) -> str:
    return f"{subset}-a{alpha:g}"


def make_spurious_environments(
    scenes_by_subset: dict[str, Sequence[TrajectoryScene]],
    alphas: dict[str, float] | None = None,
) -> dict[str, list[InstanceWindow]]:
    """Attach the sigma channel, one environment per ``(subset, alpha)``."""
    alphas = dict(TRAIN_ALPHAS if alphas is None else alphas)
    out = {}
    for subset, alpha in alphas.items():
        if subset not in ETH_UCY_SUBSETS:
            raise DataError(f"unknown subset {subset!r}")
        if subset not in scenes_by_subset:
            raise DataError(f"no scenes for subset {subset!r}")
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        env = spurious_env_id(subset, alpha)
        out[env] = window_scenes(scenes_by_subset[subset], env_id=env, alpha=alpha)
    return out


def spurious_test_sweep(
    scenes: Sequence[TrajectoryScene], subset: str = "eth", alphas: Sequence[float] = TEST_ALPHAS
) -> dict[str, list[InstanceWindow]]:
    """One tagged copy of the held-out subset per test alpha."""
    if subset not in ETH_UCY_SUBSETS:
        raise DataError(f"unknown subset {subset!r}")
    return {spurious_env_id(subset, a): window_scenes(scenes, env_id=spurious_env_id(subset, a), alpha=a) for a in alphas}


def environment_manifest(tag: EnvironmentTag, source_files: Sequence[str]) -> dict:
    return {"id": tag.id, "kind": tag.kind, "parameter": tag.parameter, "source_files": list(source_files)}


def write_manifest(tag: EnvironmentTag, source_files: Sequence[str], path: str | Path) -> None:
    Path(path).write_text(json.dumps(environment_manifest(tag, source_files), indent=2))


# ---------------------------------------------------------------- arrays


@dataclass
class WindowArrays:
    """Stacked windows of one environment, ready for the model."""

    env_id: str
    inputs: np.ndarray  # (N, D_in) invariant-encoder features
    targets: np.ndarray  # (N, 12, 2)
    past: np.ndarray  # (N, 8, 2) xy only
    origins: np.ndarray  # (N, 2)
    style_features: np.ndarray  # (N, 80) full-window observation features
    neighbor_traj: np.ndarray  # (N, 20, 2) nearest neighbour, zeros if none
    has_neighbor: np.ndarray  # (N,) bool
    neighbor_window: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))  # (N,) index or -1

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowArrays":
        idx = np.asarray(idx)
        nw = self.neighbor_window[idx] if self.neighbor_window.size else self.neighbor_window
        return WindowArrays(self.env_id, self.inputs[idx], self.targets[idx], self.past[idx], self.origins[idx],
                            self.style_features[idx], self.neighbor_traj[idx], self.has_neighbor[idx],
                            np.full(len(idx), -1) if nw.size else nw)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.inputs, self.targets, self.style_features):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def input_features(window: InstanceWindow) -> np.ndarray:
    nb = window.neighbors * window.neighbor_mask[:, None, None]
    return np.concatenate([window.past.ravel(), nb.ravel(), window.neighbor_mask.astype(np.float64)])


def input_dim(with_sigma: bool, max_neighbors: int = MAX_NEIGHBORS) -> int:
    return OBS_LEN * (3 if with_sigma else 2) + max_neighbors * OBS_LEN * 2 + max_neighbors


STYLE_DIM = 2 * WINDOW_LEN * 2


def style_features(primary: np.ndarray, neighbor: np.ndarray | None) -> np.ndarray:
    """Observation view: primary 20-step track plus nearest neighbour relative to it."""
    rel = np.zeros((WINDOW_LEN, 2)) if neighbor is None else neighbor - primary
    return np.concatenate([primary.ravel(), rel.ravel()])


def stack_windows(windows: Sequence[InstanceWindow], env_id: str | None = None) -> WindowArrays:
    if not windows:
        raise DataError("no windows to stack")
    env = env_id if env_id is not None else windows[0].env_id
    inputs = np.stack([input_features(w) for w in windows])
    targets = np.stack([w.future for w in windows])
    past = np.stack([w.past[:, :2] for w in windows])
    origins = np.stack([w.origin for w in windows])
    nbr = np.zeros((len(windows), WINDOW_LEN, 2))
    has = np.zeros(len(windows), dtype=bool)
    for i, w in enumerate(windows):
        if w.style_neighbor is not None:
            nbr[i] = w.style_neighbor
            has[i] = True
    primary = np.concatenate([past, targets], axis=1)
    rel = np.where(has[:, None, None], nbr - primary, 0.0)
    style = np.concatenate([primary.reshape(len(windows), -1), rel.reshape(len(windows), -1)], axis=1)

    key = {(w.scene_id, w.agent_id, w.start_frame): i for i, w in enumerate(windows)}
    neighbor_window = np.full(len(windows), -1)
    for i, w in enumerate(windows):
        if w.style_neighbor is not None:
            for j in w.neighbor_ids:
                idx = key.get((w.scene_id, j, w.start_frame))
                if idx is not None:
                    neighbor_window[i] = idx
                    break
    return WindowArrays(env, inputs, targets, past, origins, style, nbr, has, neighbor_window)


def split_rows(n: int, fractions: Sequence[float], rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    cuts = np.cumsum([int(round(f * n)) for f in fractions[:-1]])
    return np.split(perm, cuts)
