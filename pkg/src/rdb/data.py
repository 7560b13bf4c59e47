"""Scene data: annotation ingestion, frame preprocessing, world states and windowing."""
from __future__ import annotations

import csv
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np

log = logging.getLogger(__name__)

IMAGE_SIZE = 64
DEFAULT_TILES = 8
DEFAULT_CLIP_LIMIT = 2.0


class DataError(ValueError):
    """Base class for ingestion failures."""


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateRecordError(DataError):
    pass


class RangeError(DataError):
    pass


@dataclass(frozen=True)
class AgentState:
    agent_id: int
    frame: int
    x: float
    y: float


@dataclass
class WorldState:
    frame: int
    positions: np.ndarray  # (2 * n_max,)
    mask: np.ndarray  # (n_max,) bool
    agent_ids: Tuple[int, ...] = ()

    @property
    def n_max(self) -> int:
        return len(self.mask)

    def slot_of(self, agent_id: int) -> Optional[int]:
        try:
            return self.agent_ids.index(agent_id)
        except ValueError:
            return None


@dataclass
class ImageFrame:
    pixels: np.ndarray  # (64, 64, 3) float in [0, 1]
    frame: int = 0

    def __post_init__(self):
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ValueError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")


@dataclass
class WindowConfig:
    obs_len: int = 4
    pred_len: int = 12
    frame_period: float = 0.4
    train_len: int = 8

    def __post_init__(self):
        if self.obs_len < 1 or self.pred_len < 1:
            raise ValueError("obs_len and pred_len must be >= 1")
        if self.frame_period <= 0:
            raise ValueError("frame_period must be positive")
        if self.train_len < 2:
            raise ValueError("train_len must be >= 2")

    @property
    def length(self) -> int:
        return self.obs_len + self.pred_len


@dataclass
class TrajectoryWindow:
    agent_id: int
    obs: List[AgentState]
    pred: List[AgentState]

    @property
    def start_frame(self) -> int:
        return self.obs[0].frame

    @property
    def end_frame(self) -> int:
        return self.pred[-1].frame

    @property
    def frames(self) -> List[int]:
        return [s.frame for s in self.obs] + [s.frame for s in self.pred]

    def obs_xy(self) -> np.ndarray:
        return np.array([(s.x, s.y) for s in self.obs], dtype=np.float64)

    def pred_xy(self) -> np.ndarray:
        return np.array([(s.x, s.y) for s in self.pred], dtype=np.float64)


@dataclass
class TrajectoryDataset:
    """Normalized agent tracks of one environment plus its frame source.

    ``frames`` holds raw (H, W, 3) uint8 images keyed by frame index when the
    images are in memory; otherwise they are read lazily from ``frames_dir``.
    """

    name: str
    frame_idx: np.ndarray  # (R,) int
    agent_id: np.ndarray  # (R,) int
    xy: np.ndarray  # (R, 2) float, normalized
    width_px: int
    height_px: int
    n_max: int = 16
    frame_period: float = 0.4
    frames_dir: Optional[Path] = None
    frames: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    frame_range: Optional[Tuple[int, int]] = None  # inclusive [first, last] video frames

    def __post_init__(self):
        order = np.lexsort((self.agent_id, self.frame_idx))
        self.frame_idx = np.asarray(self.frame_idx, dtype=np.int64)[order]
        self.agent_id = np.asarray(self.agent_id, dtype=np.int64)[order]
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)[order]

    def __len__(self) -> int:
        return len(self.frame_idx)

    @property
    def agent_states(self) -> List[AgentState]:
        return [
            AgentState(int(a), int(f), float(x), float(y))
            for f, a, (x, y) in zip(self.frame_idx, self.agent_id, self.xy)
        ]

    def video_frames(self) -> List[int]:
        """All frame indices of the underlying video, including frames without agents."""
        if self.frame_range is not None:
            return list(range(self.frame_range[0], self.frame_range[1] + 1))
        if self.frames:
            return sorted(self.frames)
        if self.frames_dir is not None and Path(self.frames_dir).is_dir():
            found = sorted(_frame_index(p) for p in Path(self.frames_dir).glob("frame_*.png"))
            if found:
                return found
        if len(self.frame_idx) == 0:
            return []
        return list(range(int(self.frame_idx.min()), int(self.frame_idx.max()) + 1))

    def tracks(self) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
        """agent_id -> (frames, xy) sorted by frame."""
        out = {}
        for aid in np.unique(self.agent_id):
            sel = self.agent_id == aid
            out[int(aid)] = (self.frame_idx[sel], self.xy[sel])
        return out

    def raw_frame(self, frame: int) -> np.ndarray:
        if frame in self.frames:
            return self.frames[frame]
        if self.frames_dir is None:
            raise KeyError(f"no image for frame {frame} in dataset {self.name!r}")
        path = Path(self.frames_dir) / f"frame_{frame}.png"
        img = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if img is None:
            raise FileNotFoundError(path)
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)

    def subset_frames(self, first: int, last: int, name: Optional[str] = None) -> "TrajectoryDataset":
        """Restrict to video frames in [first, last]."""
        sel = (self.frame_idx >= first) & (self.frame_idx <= last)
        return TrajectoryDataset(
            name=name or self.name,
            frame_idx=self.frame_idx[sel],
            agent_id=self.agent_id[sel],
            xy=self.xy[sel],
            width_px=self.width_px,
            height_px=self.height_px,
            n_max=self.n_max,
            frame_period=self.frame_period,
            frames_dir=self.frames_dir,
            frames={k: v for k, v in self.frames.items() if first <= k <= last},
            frame_range=(first, last),
        )


def _frame_index(path: Path) -> int:
    return int(path.stem.split("_", 1)[1])


def normalize(px: np.ndarray, dims: Tuple[float, float]) -> np.ndarray:
    return np.asarray(px, dtype=np.float64) / np.asarray(dims, dtype=np.float64)


def denormalize(xy: np.ndarray, dims: Tuple[float, float]) -> np.ndarray:
    return np.asarray(xy, dtype=np.float64) * np.asarray(dims, dtype=np.float64)


def load_annotations(
    path, frame_dims: Tuple[int, int], name: Optional[str] = None, n_max: int = 16,
    frame_period: float = 0.4, frames_dir=None,
) -> TrajectoryDataset:
    """Read a ``frame,agent_id,x,y`` CSV in source pixels and normalize to the unit square."""
    width, height = frame_dims
    path = Path(path)
    frames, ids, xs = [], [], []
    seen = set()
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame", "agent_id", "x", "y"]:
            raise ParseError(1, f"expected header frame,agent_id,x,y, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(lineno, f"expected 4 fields, got {len(row)}")
            try:
                f = int(row[0])
                a = int(row[1])
                x = float(row[2])
                y = float(row[3])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ParseError(lineno, "non-finite coordinate")
            if (f, a) in seen:
                raise DuplicateRecordError(f"line {lineno}: duplicate record for frame {f}, agent {a}")
            if not (0.0 <= x <= width and 0.0 <= y <= height):
                raise RangeError(f"line {lineno}: ({x}, {y}) outside [0, {width}] x [0, {height}]")
            seen.add((f, a))
            frames.append(f)
            ids.append(a)
            xs.append((x, y))
    xy = normalize(np.array(xs, dtype=np.float64).reshape(-1, 2), (width, height))
    return TrajectoryDataset(
        name=name or path.stem,
        frame_idx=np.array(frames, dtype=np.int64),
        agent_id=np.array(ids, dtype=np.int64),
        xy=xy,
        width_px=int(width),
        height_px=int(height),
        n_max=n_max,
        frame_period=frame_period,
        frames_dir=Path(frames_dir) if frames_dir is not None else None,
    )


def write_annotations(dataset: TrajectoryDataset, path) -> None:
    """Inverse of :func:`load_annotations` (coordinates written back in source pixels)."""
    px = denormalize(dataset.xy, (dataset.width_px, dataset.height_px))
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("frame,agent_id,x,y\n")
        for f, a, (x, y) in zip(dataset.frame_idx, dataset.agent_id, px):
            fh.write(f"{int(f)},{int(a)},{x:.6f},{y:.6f}\n")


MANIFEST_KEYS = ("name", "annotations_path", "frames_dir", "width_px", "height_px", "frame_period_s", "n_max")


def write_manifest(path, **values) -> None:
    missing = [k for k in MANIFEST_KEYS if k not in values]
    if missing:
        raise DataError(f"manifest missing keys: {missing}")
    Path(path).write_text(json.dumps({k: values[k] for k in MANIFEST_KEYS} | {
        k: v for k, v in values.items() if k not in MANIFEST_KEYS}, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> TrajectoryDataset:
    """Load a dataset from its manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise DataError(f"{path}: manifest missing keys {missing}")
    root = path.parent
    ds = load_annotations(
        root / manifest["annotations_path"],
        (manifest["width_px"], manifest["height_px"]),
        name=manifest["name"],
        n_max=int(manifest["n_max"]),
        frame_period=float(manifest["frame_period_s"]),
        frames_dir=root / manifest["frames_dir"] if manifest["frames_dir"] else None,
    )
    if "frame_range" in manifest:
        ds.frame_range = tuple(manifest["frame_range"])
    return ds


def preprocess_frame(raw_image: np.ndarray, tiles: int = DEFAULT_TILES,
                     clip_limit: float = DEFAULT_CLIP_LIMIT, frame: int = 0) -> ImageFrame:
    """CLAHE on the luminance channel, area-resize to 64x64, scale to [0, 1]."""
    img = np.asarray(raw_image)
    if img.size == 0 or img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"cannot preprocess empty image of shape {img.shape}")
    if img.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got {img.shape[2]}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    lab = cv2.cvtColor(img, cv2.COLOR_RGB2LAB)
    clahe = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(int(tiles), int(tiles)))
    lab[..., 0] = clahe.apply(np.ascontiguousarray(lab[..., 0]))
    rgb = cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)
    small = cv2.resize(rgb, (IMAGE_SIZE, IMAGE_SIZE), interpolation=cv2.INTER_AREA)
    return ImageFrame(pixels=small.astype(np.float64) / 255.0, frame=frame)


def presence_counts(dataset: TrajectoryDataset) -> Counter:
    return Counter(int(a) for a in dataset.agent_id)


def build_world_states(dataset: TrajectoryDataset, n_max: Optional[int] = None) -> List[WorldState]:
    """One fixed-width world state per video frame, slots sorted by agent id."""
    n_max = dataset.n_max if n_max is None else n_max
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    presence = presence_counts(dataset)
    by_frame: Dict[int, List[Tuple[int, float, float]]] = defaultdict(list)
    for f, a, (x, y) in zip(dataset.frame_idx, dataset.agent_id, dataset.xy):
        by_frame[int(f)].append((int(a), float(x), float(y)))
    states = []
    for f in dataset.video_frames():
        agents = by_frame.get(f, [])
        if len(agents) > n_max:
            keep = sorted(agents, key=lambda r: (-presence[r[0]], r[0]))[:n_max]
            log.warning("frame %d of %s holds %d agents; keeping %d longest-present",
                        f, dataset.name, len(agents), n_max)
            agents = keep
        agents = sorted(agents)
        pos = np.zeros(2 * n_max)
        mask = np.zeros(n_max, dtype=bool)
        for slot, (_, x, y) in enumerate(agents):
            pos[2 * slot: 2 * slot + 2] = (x, y)
            mask[slot] = True
        states.append(WorldState(frame=f, positions=pos, mask=mask, agent_ids=tuple(a for a, _, _ in agents)))
    return states


def contiguous_runs(frames: np.ndarray) -> List[Tuple[int, int]]:
    """Index ranges [i, j) of strictly consecutive frame runs."""
    if len(frames) == 0:
        return []
    breaks = np.flatnonzero(np.diff(frames) != 1) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [len(frames)]])
    return list(zip(starts.tolist(), ends.tolist()))


def window_split(dataset: TrajectoryDataset, cfg: WindowConfig, stride: int = 1,
                 length: Optional[int] = None) -> List[TrajectoryWindow]:
    """Slide a window of ``obs_len + pred_len`` frames over each contiguous agent run."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    span = cfg.length if length is None else length
    obs_len = cfg.obs_len if length is None else min(cfg.obs_len, span - 1)
    windows = []
    for aid, (frames, xy) in sorted(dataset.tracks().items()):
        for i, j in contiguous_runs(frames):
            for start in range(i, j - span + 1, stride):
                states = [AgentState(aid, int(frames[k]), float(xy[k, 0]), float(xy[k, 1]))
                          for k in range(start, start + span)]
                windows.append(TrajectoryWindow(aid, states[:obs_len], states[obs_len:]))
    return windows


def leave_one_out_split(datasets: Sequence[TrajectoryDataset], test_index: int):
    if len(datasets) < 2:
        raise ValueError("leave-one-out needs at least two datasets")
    if not 0 <= test_index < len(datasets):
        raise IndexError(f"test_index {test_index} out of range for {len(datasets)} datasets")
    train = [d for i, d in enumerate(datasets) if i != test_index]
    return train, datasets[test_index]


def preprocess_dataset(dataset: TrajectoryDataset, frames: Optional[Iterable[int]] = None,
                       tiles: int = DEFAULT_TILES, clip_limit: float = DEFAULT_CLIP_LIMIT) -> Dict[int, np.ndarray]:
    """frame -> (64, 64, 3) float32 array for every requested video frame."""
    frames = dataset.video_frames() if frames is None else frames
    return {f: preprocess_frame(dataset.raw_frame(f), tiles, clip_limit, f).pixels.astype(np.float32)
            for f in frames}


def thread_cap() -> int:
    return max(1, int(os.environ.get("RDB_THREADS", "1")))
