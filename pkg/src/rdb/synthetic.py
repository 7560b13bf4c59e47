"""Seeded generators for desk-scale crowd scenes and the colored-landmark visitation task."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .data import TrajectoryDataset, write_annotations, write_manifest

BACKGROUND = (214, 210, 200)
WALL = (70, 70, 80)
EFFECTOR = (30, 30, 30)
LANDMARK_COLORS = ((220, 40, 40), (240, 150, 20), (40, 170, 60), (40, 90, 220), (150, 50, 190),
                   (0, 190, 190), (190, 190, 0), (120, 70, 20))


class GenerationError(ValueError):
    pass


Rect = Tuple[float, float, float, float]  # x0, y0, x1, y1 in normalized units


@dataclass
class CrowdSceneConfig:
    layout: str = "corridor"  # "open", "corridor", "choke"
    walls: Optional[List[Rect]] = None  # overrides the layout's walls
    gap_center: float = 0.5  # choke-point position along the wall
    gap_width: float = 0.16
    corridor: Tuple[float, float] = (0.3, 0.7)
    max_agents: int = 8
    min_agents: int = 0
    spawn_prob: float = 0.08
    speed_mean: float = 0.012
    speed_std: float = 0.002
    agent_radius: float = 0.025
    n_frames: int = 400
    width_px: int = 128
    height_px: int = 128
    frame_period: float = 0.4
    seed: int = 0
    name: str = "crowd"

    def resolved_walls(self) -> List[Rect]:
        if self.walls is not None:
            return [tuple(w) for w in self.walls]
        if self.layout == "open":
            return []
        if self.layout == "corridor":
            lo, hi = self.corridor
            return [(0.0, 0.0, 1.0, lo), (0.0, hi, 1.0, 1.0)]
        if self.layout == "choke":
            g0, g1 = self.gap_center - self.gap_width / 2, self.gap_center + self.gap_width / 2
            return [(0.46, 0.0, 0.54, g0), (0.46, g1, 0.54, 1.0)]
        raise GenerationError(f"unknown layout {self.layout!r}")


def _inside(p: np.ndarray, walls: Sequence[Rect], margin: float = 0.0) -> bool:
    return any(x0 - margin <= p[0] <= x1 + margin and y0 - margin <= p[1] <= y1 + margin
               for x0, y0, x1, y1 in walls)


def _free_lanes(cfg: CrowdSceneConfig, walls: Sequence[Rect]) -> np.ndarray:
    """Vertical positions on the left/right borders not blocked by walls."""
    ys = np.linspace(0.05, 0.95, 91)
    m = cfg.agent_radius * 1.5
    return np.array([y for y in ys if not _inside(np.array([0.02, y]), walls, m)
                     and not _inside(np.array([0.98, y]), walls, m)])


def _waypoints(cfg: CrowdSceneConfig, start: np.ndarray, goal: np.ndarray) -> List[np.ndarray]:
    if cfg.layout == "choke" and cfg.walls is None:
        gap = np.array([0.5, cfg.gap_center])
        return [gap + np.array([-0.08 if start[0] < 0.5 else 0.08, 0.0]), gap,
                gap + np.array([0.08 if start[0] < 0.5 else -0.08, 0.0]), goal]
    return [goal]


def _render_disc(img: np.ndarray, cx: float, cy: float, r: float, color) -> None:
    """Fill pixels whose centers lie within r of (cx, cy); coordinates in pixels."""
    h, w = img.shape[:2]
    x0, x1 = max(int(math.floor(cx - r)), 0), min(int(math.ceil(cx + r)) + 1, w)
    y0, y1 = max(int(math.floor(cy - r)), 0), min(int(math.ceil(cy + r)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    m = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    img[y0:y1, x0:x1][m] = color


def _background(cfg_w: int, cfg_h: int, walls: Sequence[Rect]) -> np.ndarray:
    img = np.empty((cfg_h, cfg_w, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for x0, y0, x1, y1 in walls:
        img[int(round(y0 * cfg_h)):int(round(y1 * cfg_h)), int(round(x0 * cfg_w)):int(round(x1 * cfg_w))] = WALL
    return img


def _agent_color(agent_id: int) -> Tuple[int, int, int]:
    rng = np.random.default_rng(1000 + agent_id)
    c = rng.integers(0, 3)
    base = [60, 60, 60]
    base[c] = 230
    return tuple(int(v) for v in base)


def gen_crowd_scene(cfg: CrowdSceneConfig) -> Tuple[TrajectoryDataset, Dict[int, np.ndarray]]:
    """Goal-directed agents crossing the scene, avoiding walls and each other."""
    rng = np.random.default_rng(cfg.seed)
    walls = cfg.resolved_walls()
    if cfg.speed_mean <= 0:
        raise GenerationError("speeds must be positive")
    lanes = _free_lanes(cfg, walls)
    if cfg.max_agents > 0 and len(lanes) == 0:
        raise GenerationError("layout leaves no free space for agents to enter")
    bg = _background(cfg.width_px, cfg.height_px, walls)
    dims = np.array([cfg.width_px, cfg.height_px], dtype=np.float64)
    r_px = cfg.agent_radius * cfg.width_px
    agents: Dict[int, dict] = {}
    next_id = 0
    rows: List[Tuple[int, int, float, float]] = []
    frames: Dict[int, np.ndarray] = {}

    def spawn():
        nonlocal next_id
        left = rng.random() < 0.5
        y0 = float(rng.choice(lanes))
        y1 = float(rng.choice(lanes))
        start = np.array([0.02 if left else 0.98, y0])
        goal = np.array([0.99 if left else 0.01, y1])
        for a in agents.values():
            if np.linalg.norm(a["pos"] - start) < 3 * cfg.agent_radius:
                return
        speed = max(cfg.speed_mean + cfg.speed_std * rng.standard_normal(), 0.2 * cfg.speed_mean)
        agents[next_id] = {"pos": start, "path": _waypoints(cfg, start, goal), "speed": speed}
        next_id += 1

    for _ in range(cfg.min_agents):
        if cfg.max_agents > 0:
            spawn()
    for f in range(cfg.n_frames):
        if len(agents) < cfg.max_agents and rng.random() < cfg.spawn_prob:
            spawn()
        img = bg.copy()
        for aid in sorted(agents):
            a = agents[aid]
            rows.append((f, aid, float(a["pos"][0]), float(a["pos"][1])))
            _render_disc(img, a["pos"][0] * cfg.width_px, a["pos"][1] * cfg.height_px, r_px, _agent_color(aid))
        frames[f] = img
        done = []
        for aid in sorted(agents):
            a = agents[aid]
            target = a["path"][0]
            d = target - a["pos"]
            dist = np.linalg.norm(d)
            if dist < a["speed"] * 1.5 and len(a["path"]) > 1:
                a["path"].pop(0)
                target = a["path"][0]
                d = target - a["pos"]
                dist = np.linalg.norm(d)
            vel = d / max(dist, 1e-9) * a["speed"]
            for bid, b in agents.items():
                if bid == aid:
                    continue
                off = a["pos"] - b["pos"]
                n = np.linalg.norm(off)
                if 1e-9 < n < 3 * cfg.agent_radius:
                    vel = vel + off / n * a["speed"] * 0.5 * (1 - n / (3 * cfg.agent_radius))
            sp = np.linalg.norm(vel)
            if sp > a["speed"]:
                vel = vel / sp * a["speed"]
            new = a["pos"] + vel
            if _inside(new, walls, cfg.agent_radius):
                for axis in (0, 1):
                    trial = a["pos"].copy()
                    trial[axis] = new[axis]
                    if not _inside(trial, walls, cfg.agent_radius):
                        new = trial
                        break
                else:
                    new = a["pos"]
            a["pos"] = np.clip(new, 0.0, 1.0)
            if len(a["path"]) == 1 and np.linalg.norm(a["path"][0] - a["pos"]) < a["speed"]:
                done.append(aid)
        for aid in done:
            del agents[aid]
    ds = _dataset(cfg.name, rows, cfg.width_px, cfg.height_px, cfg.frame_period,
                  n_max=max(cfg.max_agents, 1), n_frames=cfg.n_frames)
    ds.frames = frames
    return ds, frames


@dataclass
class GearTaskConfig:
    n_landmarks: int = 5
    landmark_positions: Optional[List[Tuple[float, float]]] = None
    direction: str = "clockwise"
    speed: float = 0.02
    hover_frames: int = 6
    loops: int = 3
    layouts: int = 1  # distinct landmark arrangements generated in sequence
    radius_range: Tuple[float, float] = (0.22, 0.38)
    landmark_radius: float = 0.055
    effector_radius: float = 0.045
    jitter: float = 0.001
    occlusion: bool = True
    width_px: int = 128
    height_px: int = 128
    frame_period: float = 0.4
    seed: int = 0
    name: str = "gears"

    @property
    def colors(self) -> Tuple[Tuple[int, int, int], ...]:
        return LANDMARK_COLORS[:self.n_landmarks]


DIRECTIONS = ("clockwise", "anticlockwise")


def gear_layout(cfg: GearTaskConfig, rng: np.random.Generator) -> np.ndarray:
    """Landmark centers (n, 2) ordered by color; color order runs in ``cfg.direction`` around the center.

    On screen (y down) clockwise means increasing polar angle.
    """
    n = cfg.n_landmarks
    min_gap = 2 * math.pi / n * 0.55
    for _ in range(1000):
        angles = np.sort(rng.uniform(0, 2 * math.pi, n))
        gaps = np.diff(np.concatenate([angles, angles[:1] + 2 * math.pi]))
        if gaps.min() >= min_gap:
            break
    else:
        raise GenerationError("could not place landmarks")
    radii = rng.uniform(*cfg.radius_range, n)
    if cfg.direction == "anticlockwise":
        angles, radii = angles[::-1], radii[::-1]
    pts = 0.5 + np.stack([radii * np.cos(angles), radii * np.sin(angles)], 1)
    return pts


def gear_path(landmarks: np.ndarray, speed: float, hover: int, loops: int) -> np.ndarray:
    """Piecewise-linear visitation of landmarks in index order, hovering at each, for ``loops`` cycles."""
    pts = [landmarks[0].copy()]
    order = list(range(len(landmarks))) * loops + [0]
    for k, (i, j) in enumerate(zip(order[:-1], order[1:])):
        pts.extend([landmarks[i].copy()] * hover)
        a, b = landmarks[i], landmarks[j]
        n = max(int(math.ceil(np.linalg.norm(b - a) / speed)), 1)
        for s in range(1, n + 1):
            pts.append(a + (b - a) * s / n)
    return np.array(pts)


def render_gear_frame(cfg: GearTaskConfig, landmarks: np.ndarray, effector: Optional[np.ndarray]) -> np.ndarray:
    img = np.empty((cfg.height_px, cfg.width_px, 3), dtype=np.uint8)
    img[:] = BACKGROUND

    def draw_effector():
        if effector is not None:
            _render_disc(img, effector[0] * cfg.width_px, effector[1] * cfg.height_px,
                         cfg.effector_radius * cfg.width_px, EFFECTOR)

    if not cfg.occlusion:
        draw_effector()
    for (x, y), color in zip(landmarks, cfg.colors):
        _render_disc(img, x * cfg.width_px, y * cfg.height_px, cfg.landmark_radius * cfg.width_px, color)
    if cfg.occlusion:
        draw_effector()
    return img


def gen_gear_task(cfg: GearTaskConfig) -> Tuple[TrajectoryDataset, Dict[int, np.ndarray]]:
    """Single effector visiting color-ordered landmarks; one agent id per arrangement."""
    if cfg.direction not in DIRECTIONS:
        raise GenerationError(f"direction must be one of {DIRECTIONS}, got {cfg.direction!r}")
    if cfg.speed <= 0:
        raise GenerationError("speed must be positive")
    if cfg.n_landmarks < 2 or cfg.n_landmarks > len(LANDMARK_COLORS):
        raise GenerationError(f"n_landmarks must be in [2, {len(LANDMARK_COLORS)}]")
    rng = np.random.default_rng(cfg.seed)
    rows, frames, f = [], {}, 0
    for layout_id in range(cfg.layouts):
        if cfg.landmark_positions is not None:
            lm = np.array(cfg.landmark_positions, dtype=np.float64)
            if len(lm) != cfg.n_landmarks:
                raise GenerationError("landmark_positions must have n_landmarks entries")
        else:
            lm = gear_layout(cfg, rng)
        d = np.linalg.norm(lm[:, None] - lm[None], axis=-1) + np.eye(len(lm))
        if d.min() < 1e-6:
            raise GenerationError("landmark positions must be pairwise distinct")
        path = gear_path(lm, cfg.speed, cfg.hover_frames, cfg.loops)
        path = np.clip(path + cfg.jitter * rng.standard_normal(path.shape), 0.0, 1.0)
        for p in path:
            frames[f] = render_gear_frame(cfg, lm, p)
            rows.append((f, layout_id, float(p[0]), float(p[1])))
            f += 1
    ds = _dataset(cfg.name, rows, cfg.width_px, cfg.height_px, cfg.frame_period, n_max=1, n_frames=f)
    ds.frames = frames
    return ds, frames


def gear_layouts(cfg: GearTaskConfig) -> List[np.ndarray]:
    """Replay the generator's RNG to recover the landmark arrangement of each layout."""
    rng = np.random.default_rng(cfg.seed)
    out = []
    for _ in range(cfg.layouts):
        lm = np.array(cfg.landmark_positions) if cfg.landmark_positions is not None else gear_layout(cfg, rng)
        path = gear_path(lm, cfg.speed, cfg.hover_frames, cfg.loops)
        rng.standard_normal(path.shape)
        out.append(lm)
    return out


def _dataset(name, rows, w, h, period, n_max, n_frames) -> TrajectoryDataset:
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return TrajectoryDataset(
        name=name,
        frame_idx=arr[:, 0].astype(np.int64),
        agent_id=arr[:, 1].astype(np.int64),
        xy=arr[:, 2:4],
        width_px=w,
        height_px=h,
        n_max=n_max,
        frame_period=period,
        frame_range=(0, n_frames - 1) if n_frames > 0 else None,
    )


def crowd_suite(n_envs: int = 5, seed: int = 0, n_frames: int = 400, **overrides) -> List[CrowdSceneConfig]:
    """Five environments with distinct layouts: corridors at varying heights and choke points."""
    base = [
        dict(layout="corridor", corridor=(0.25, 0.65)),
        dict(layout="choke", gap_center=0.3),
        dict(layout="corridor", corridor=(0.35, 0.8)),
        dict(layout="choke", gap_center=0.7),
        dict(layout="open"),
    ]
    out = []
    for i in range(n_envs):
        kw = dict(base[i % len(base)])
        kw.update(overrides)
        out.append(CrowdSceneConfig(seed=seed * 100 + i, n_frames=n_frames, name=f"crowd{i}", **kw))
    return out


def gear_suite(seed: int = 0, train_seeds: int = 4, **overrides) -> List[GearTaskConfig]:
    """``train_seeds`` clockwise scenes followed by one anticlockwise test scene."""
    cfgs = [GearTaskConfig(seed=seed * 100 + i, direction="clockwise", name=f"gears{i}", **overrides)
            for i in range(train_seeds)]
    cfgs.append(GearTaskConfig(seed=seed * 100 + train_seeds, direction="anticlockwise",
                               name=f"gears{train_seeds}", **overrides))
    return cfgs


def write_dataset(dataset: TrajectoryDataset, frames: Dict[int, np.ndarray], out_dir, config: Optional[dict] = None,
                  preview: bool = False) -> Path:
    """Write manifest.json, annotations.csv and frames/frame_<i>.png."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for f, img in sorted(frames.items()):
        cv2.imwrite(str(out / "frames" / f"frame_{f}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    write_annotations(dataset, out / "annotations.csv")
    extra = {}
    if dataset.frame_range is not None:
        extra["frame_range"] = list(dataset.frame_range)
    if config is not None:
        extra["generator"] = config
    write_manifest(out / "manifest.json", name=dataset.name, annotations_path="annotations.csv",
                   frames_dir="frames", width_px=dataset.width_px, height_px=dataset.height_px,
                   frame_period_s=dataset.frame_period, n_max=dataset.n_max, **extra)
    if preview:
        from .plotting import contact_sheet_svg
        (out / "preview.svg").write_text(contact_sheet_svg(dataset, frames))
    return out


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d))
