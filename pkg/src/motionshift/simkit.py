"""ORCA crowd simulation and circle-crossing scene generation.

The collision-avoidance step follows the reciprocal velocity obstacle
construction of van den Berg et al.: every neighbour contributes a half-plane
of admissible velocities and the new velocity is the point of the
intersection closest to the preferred velocity, found by incremental 2-D
linear programming (with the 3-D lifted program as a fallback when the
half-planes have no common point).

Separation style ``d`` inflates every agent's radius by ``d / 2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

EPS = 1e-5


class SimulationError(Exception):
    pass


class DegenerateLPError(SimulationError):
    pass


class PlacementError(SimulationError):
    pass


class SceneRejected(SimulationError):
    pass


@dataclass
class AgentState:
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    radius: float = 0.3
    pref_speed: float = 1.0
    max_speed: float = 1.5

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.pref_speed > self.max_speed:
            raise ValueError("preferred speed exceeds max speed")

    def preferred_velocity(self, dt: float) -> np.ndarray:
        to_goal = self.goal - self.position
        dist = float(np.hypot(*to_goal))
        if dist < 1e-12:
            return np.zeros(2)
        # slow down on the final step so the agent lands on its goal
        speed = min(self.pref_speed, dist / dt)
        return to_goal / dist * speed


@dataclass
class StyleParams:
    separation: float = 0.0
    time_horizon: float = 2.0
    neighbor_range: float = 10.0
    dt: float = 0.4

    def __post_init__(self):
        if self.separation < 0:
            raise ValueError("separation distance must be non-negative")
        if self.time_horizon <= 0 or self.dt <= 0:
            raise ValueError("time horizon and timestep must be positive")


@dataclass
class TrajectoryScene:
    """Positions ``(T, M, 2)``; NaN marks frames where an agent is absent."""

    scene_id: str
    env_id: str
    dt: float
    frames: np.ndarray
    agent_ids: list[int]
    positions: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    def present(self) -> np.ndarray:
        return np.isfinite(self.positions).all(axis=-1)


@dataclass
class SimDefaults:
    radius: float = 0.3
    pref_speed_range: tuple[float, float] = (0.8, 1.2)
    max_speed_factor: float = 1.5
    circle_radius: float = 4.0
    n_agents_range: tuple[int, int] = (2, 6)
    angle_jitter: float = 0.3
    goal_jitter: float = 0.2
    goal_tolerance: float = 0.1
    step_cap: int = 200
    substeps: int = 4
    scene_length: int = 20
    max_retries: int = 20
    style: StyleParams = field(default_factory=StyleParams)


# ---------------------------------------------------------------- LP
# Lines are ``(px, py, dx, dy)`` tuples of python floats: the per-agent
# programs have at most a handful of constraints, where numpy call
# overhead dominates the arithmetic.


def _lp1(lines, k, radius, ox, oy, direction_opt):
    px, py, dx, dy = lines[k]
    dot = px * dx + py * dy
    disc = dot * dot + radius * radius - (px * px + py * py)
    if disc < 0:
        return None
    sq = math.sqrt(disc)
    t_left, t_right = -dot - sq, -dot + sq
    for i in range(k):
        qx, qy, ex, ey = lines[i]
        denom = dx * ey - dy * ex
        numer = ex * (py - qy) - ey * (px - qx)
        if abs(denom) <= EPS:
            if numer < 0:
                return None
            continue
        t = numer / denom
        if denom >= 0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    if direction_opt:
        t = t_right if ox * dx + oy * dy > 0 else t_left
    else:
        t = min(max(dx * (ox - px) + dy * (oy - py), t_left), t_right)
    return px + t * dx, py + t * dy


def _lp2(lines, radius, ox, oy, direction_opt):
    if direction_opt:
        rx, ry = ox * radius, oy * radius
    elif ox * ox + oy * oy > radius * radius:
        n = math.hypot(ox, oy)
        rx, ry = ox / n * radius, oy / n * radius
    else:
        rx, ry = ox, oy
    for i, (px, py, dx, dy) in enumerate(lines):
        if dx * (py - ry) - dy * (px - rx) > 0:
            candidate = _lp1(lines, i, radius, ox, oy, direction_opt)
            if candidate is None:
                return i, (rx, ry)
            rx, ry = candidate
    return len(lines), (rx, ry)


def _lp3(lines, begin, radius, result):
    rx, ry = result
    distance = 0.0
    for i in range(begin, len(lines)):
        px, py, dx, dy = lines[i]
        if dx * (py - ry) - dy * (px - rx) > distance:
            proj = []
            for j in range(i):
                qx, qy, ex, ey = lines[j]
                det = dx * ey - dy * ex
                if abs(det) <= EPS:
                    if dx * ex + dy * ey > 0:
                        continue
                    ax, ay = 0.5 * (px + qx), 0.5 * (py + qy)
                else:
                    t = (ex * (py - qy) - ey * (px - qx)) / det
                    ax, ay = px + t * dx, py + t * dy
                nx, ny = ex - dx, ey - dy
                n = math.hypot(nx, ny)
                proj.append((ax, ay, nx / n, ny / n))
            fail, candidate = _lp2(proj, radius, -dy, dx, True)
            if fail >= len(proj):
                rx, ry = candidate
            distance = dx * (py - ry) - dy * (px - rx)
    return rx, ry


def orca_lines(agent: AgentState, others: Sequence[AgentState], style: StyleParams) -> list:
    """Half-planes ``(px, py, dx, dy)``; admissible velocities lie left of the direction."""
    inv_tau = 1.0 / style.time_horizon
    inflate = style.separation / 2.0
    range_sq = style.neighbor_range**2
    ax, ay = float(agent.position[0]), float(agent.position[1])
    avx, avy = float(agent.velocity[0]), float(agent.velocity[1])
    lines = []
    for other in others:
        rpx, rpy = float(other.position[0]) - ax, float(other.position[1]) - ay
        rvx, rvy = avx - float(other.velocity[0]), avy - float(other.velocity[1])
        dist_sq = rpx * rpx + rpy * rpy
        if dist_sq < 1e-18:
            raise DegenerateLPError("coincident agents")
        if dist_sq > range_sq:
            continue
        combined = agent.radius + other.radius + 2 * inflate
        combined_sq = combined * combined
        if dist_sq > combined_sq:
            wx, wy = rvx - inv_tau * rpx, rvy - inv_tau * rpy
            w_len_sq = wx * wx + wy * wy
            dot1 = wx * rpx + wy * rpy
            if dot1 < 0 and dot1 * dot1 > combined_sq * w_len_sq:
                # closest point is on the cut-off circle
                w_len = math.sqrt(w_len_sq)
                ux_, uy_ = wx / w_len, wy / w_len
                dx, dy = uy_, -ux_
                mag = combined * inv_tau - w_len
                ux, uy = mag * ux_, mag * uy_
            else:
                leg = math.sqrt(dist_sq - combined_sq)
                if rpx * wy - rpy * wx > 0:
                    dx = (rpx * leg - rpy * combined) / dist_sq
                    dy = (rpx * combined + rpy * leg) / dist_sq
                else:
                    dx = -(rpx * leg + rpy * combined) / dist_sq
                    dy = -(-rpx * combined + rpy * leg) / dist_sq
                dot2 = rvx * dx + rvy * dy
                ux, uy = dot2 * dx - rvx, dot2 * dy - rvy
        else:
            inv_dt = 1.0 / style.dt
            wx, wy = rvx - inv_dt * rpx, rvy - inv_dt * rpy
            w_len = math.hypot(wx, wy)
            if w_len < 1e-12:
                raise DegenerateLPError("zero relative motion inside collision radius")
            ux_, uy_ = wx / w_len, wy / w_len
            dx, dy = uy_, -ux_
            mag = combined * inv_dt - w_len
            ux, uy = mag * ux_, mag * uy_
        lines.append((avx + 0.5 * ux, avy + 0.5 * uy, dx, dy))
    return lines


def solve_velocity(lines: list, pref_velocity, max_speed: float) -> np.ndarray:
    ox, oy = float(pref_velocity[0]), float(pref_velocity[1])
    fail, result = _lp2(lines, max_speed, ox, oy, False)
    if fail < len(lines):
        result = _lp3(lines, fail, max_speed, result)
    return np.array(result)


def orca_step(
    agents: Sequence[AgentState],
    style: StyleParams,
    pref_velocities: Sequence[np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """New velocity for every agent (positions are not advanced)."""
    if not agents:
        raise SimulationError("orca_step needs at least one agent")
    if pref_velocities is None:
        pref_velocities = [a.preferred_velocity(style.dt) for a in agents]
    out = []
    for i, agent in enumerate(agents):
        others = [a for j, a in enumerate(agents) if j != i]
        lines = orca_lines(agent, others, style)
        if rng is not None and len(lines) > 1:
            # constraint order does not change the optimum, only the work done
            lines = [lines[k] for k in rng.permutation(len(lines))]
        out.append(solve_velocity(lines, pref_velocities[i], agent.max_speed))
    return out


# ---------------------------------------------------------------- scenarios

def generate_circle_crossing(
    n_agents: int,
    circle_radius: float = 4.0,
    seed: int = 0,
    defaults: SimDefaults | None = None,
    perturb: bool = True,
) -> list[AgentState]:
    if n_agents < 2:
        raise ValueError("circle crossing needs at least two agents")
    if circle_radius <= 0:
        raise ValueError("circle radius must be positive")
    cfg = defaults or SimDefaults()
    rng = np.random.default_rng(seed)
    r = cfg.radius
    for _ in range(cfg.max_retries * 10):
        agents: list[AgentState] = []
        for i in range(n_agents):
            for _attempt in range(cfg.max_retries):
                base = 2 * math.pi * i / n_agents
                angle = base + (rng.uniform(-cfg.angle_jitter, cfg.angle_jitter) if perturb else 0.0)
                pos = circle_radius * np.array([math.cos(angle), math.sin(angle)])
                if all(np.hypot(*(pos - a.position)) > 2 * r + 0.1 for a in agents):
                    break
            else:
                break
            goal = -pos
            if perturb:
                goal = goal + rng.uniform(-cfg.goal_jitter, cfg.goal_jitter, size=2)
            lo, hi = cfg.pref_speed_range
            speed = float(rng.uniform(lo, hi)) if perturb else 0.5 * (lo + hi)
            agents.append(AgentState(pos, np.zeros(2), goal, r, speed, cfg.max_speed_factor * speed))
        if len(agents) == n_agents and _goals_separated(agents, r):
            return agents
    raise PlacementError(f"could not place {n_agents} agents on radius {circle_radius}")


def _goals_separated(agents, r) -> bool:
    goals = [a.goal for a in agents]
    return all(np.hypot(*(g1 - g2)) > 2 * r + 0.1 for i, g1 in enumerate(goals) for g2 in goals[i + 1:])


def rollout(
    agents: Sequence[AgentState],
    style: StyleParams,
    seed: int = 0,
    goal_tolerance: float = 0.1,
    step_cap: int = 200,
    substeps: int = 1,
) -> tuple[np.ndarray, bool]:
    """Simulate until every agent is within tolerance of its goal.

    Positions are recorded every ``style.dt``; the ORCA update itself runs
    ``substeps`` times per recorded frame. Returns positions ``(T, M, 2)``
    including the initial frame and whether all agents arrived before
    ``step_cap`` recorded steps.
    """
    agents = [AgentState(a.position.copy(), a.velocity.copy(), a.goal.copy(), a.radius, a.pref_speed, a.max_speed)
              for a in agents]
    rng = np.random.default_rng(seed)
    inner = replace(style, dt=style.dt / substeps)
    history = [np.stack([a.position for a in agents])]
    arrived = False
    for _ in range(step_cap):
        if all(np.hypot(*(a.goal - a.position)) <= goal_tolerance for a in agents):
            arrived = True
            break
        for _sub in range(substeps):
            done = [np.hypot(*(a.goal - a.position)) <= goal_tolerance for a in agents]
            prefs = [np.zeros(2) if d else a.preferred_velocity(inner.dt) for a, d in zip(agents, done)]
            new_v = orca_step(agents, inner, prefs, rng)
            for a, v in zip(agents, new_v):
                a.velocity = v
                a.position = a.position + v * inner.dt
        history.append(np.stack([a.position for a in agents]))
    else:
        arrived = all(np.hypot(*(a.goal - a.position)) <= goal_tolerance for a in agents)
    return np.stack(history), arrived


def _crossing_window(positions: np.ndarray, length: int) -> slice:
    # midpoint = frame where agents are, on average, closest to the circle centre
    radial = np.hypot(positions[..., 0], positions[..., 1]).mean(axis=1)
    mid = int(np.argmin(radial))
    start = min(max(mid - length // 2, 0), positions.shape[0] - length)
    return slice(start, start + length)


def simulate_scene(
    initial: Sequence[AgentState],
    style: StyleParams,
    seed: int = 0,
    scene_id: str = "scene",
    env_id: str = "",
    defaults: SimDefaults | None = None,
    trim: bool = True,
) -> TrajectoryScene:
    cfg = defaults or SimDefaults()
    positions, arrived = rollout(initial, style, seed, cfg.goal_tolerance, cfg.step_cap, cfg.substeps)
    if positions.shape[0] < cfg.scene_length:
        raise SceneRejected(f"only {positions.shape[0]} frames recorded")
    if not arrived:
        raise SceneRejected("step cap reached before all agents arrived")
    if trim:
        positions = positions[_crossing_window(positions, cfg.scene_length)]
    n = positions.shape[0]
    return TrajectoryScene(
        scene_id=scene_id,
        env_id=env_id,
        dt=style.dt,
        frames=np.arange(n),
        agent_ids=list(range(positions.shape[1])),
        positions=positions,
    )


def style_env_id(d: float) -> str:
    return f"style-{d:g}"


def scene_seed(seed: int, split: str, index: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, sum(map(ord, split)), index, attempt]).generate_state(1)[0])


def random_scene(d: float, seed: int, split: str, index: int, defaults: SimDefaults | None = None) -> TrajectoryScene:
    cfg = defaults or SimDefaults()
    style = StyleParams(separation=d, time_horizon=cfg.style.time_horizon,
                        neighbor_range=cfg.style.neighbor_range, dt=cfg.style.dt)
    for attempt in range(cfg.max_retries):
        s = scene_seed(seed, split, index, attempt)
        rng = np.random.default_rng(s)
        lo, hi = cfg.n_agents_range
        n = int(rng.integers(lo, hi + 1))
        try:
            agents = generate_circle_crossing(n, cfg.circle_radius, s, cfg)
            return simulate_scene(agents, style, s, f"{split}-{index}", style_env_id(d), cfg)
        except (SceneRejected, PlacementError, DegenerateLPError):
            continue
    raise SceneRejected(f"scene {split}/{index} rejected {cfg.max_retries} times")


def generate_dataset(
    d: float,
    counts: dict[str, int],
    seed: int,
    out_dir: str | Path,
    defaults: SimDefaults | None = None,
) -> Path:
    """Write ``<out_dir>/style-<d>/{split}.tsv`` plus ``manifest.json``."""
    from .dataio import write_tsv

    cfg = defaults or SimDefaults()
    for split, n in counts.items():
        if n < 1:
            raise ValueError(f"count for {split} must be >= 1")
    env_dir = Path(out_dir) / style_env_id(d)
    try:
        env_dir.mkdir(parents=True, exist_ok=True)
        files = {}
        for split, n in counts.items():
            scenes = [random_scene(d, seed, split, i, cfg) for i in range(n)]
            path = env_dir / f"{split}.tsv"
            write_tsv(scenes, path)
            files[split] = path.name
        manifest = {
            "id": style_env_id(d),
            "kind": "style",
            "parameter": d,
            "seed": seed,
            "counts": dict(counts),
            "source_files": files,
            "simulator_defaults": _defaults_dict(cfg),
            "defaults_are_assumed": True,
        }
        (env_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise SimulationError(f"cannot write dataset to {env_dir}: {exc}") from exc
    return env_dir


def _defaults_dict(cfg: SimDefaults) -> dict:
    out = asdict(cfg)
    out["pref_speed_range"] = list(cfg.pref_speed_range)
    out["n_agents_range"] = list(cfg.n_agents_range)
    return out


def min_pairwise_distance(positions: np.ndarray) -> float:
    """Minimum centre distance over all frames and agent pairs."""
    diff = positions[:, :, None, :] - positions[:, None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    m = positions.shape[1]
    dist[:, np.arange(m), np.arange(m)] = np.inf
    return float(np.nanmin(dist))
