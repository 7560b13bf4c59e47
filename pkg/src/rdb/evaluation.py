"""Displacement metrics, baseline predictors, the model-bundle predictor and the transfer harness."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint, CompatibilityError
from .context import SceneEncoding, SceneRollout, encode_scene
from .data import TrajectoryDataset, TrajectoryWindow, WindowConfig, preprocess_dataset, window_split
from .dynamics import GlobalDynamics
from .predictor import InputConfig, rollout_agent

log = logging.getLogger(__name__)


def _check_lengths(predicted, truth) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: predicted {len(p)} vs truth {len(t)}")
    if len(p) == 0:
        raise ValueError("trajectories must be non-empty")
    return p, t


def ade(predicted, truth) -> float:
    """Root-mean-square displacement over the prediction horizon."""
    p, t = _check_lengths(predicted, truth)
    return float(np.sqrt(np.mean(np.sum((p - t) ** 2, axis=1))))


def mean_displacement(predicted, truth) -> float:
    """Mean Euclidean displacement (the common literature variant of ADE)."""
    p, t = _check_lengths(predicted, truth)
    return float(np.mean(np.linalg.norm(p - t, axis=1)))


def fde(predicted, truth) -> float:
    p, t = _check_lengths(predicted, truth)
    return float(np.linalg.norm(p[-1] - t[-1]))


@dataclass
class MetricReport:
    ade: float
    fde: float
    n_trajectories: int
    window: WindowConfig
    per_dataset: Dict[str, Tuple[float, float, int]] = field(default_factory=dict)
    ade_mean_dist: float = float("nan")
    mode: str = "mean"

    def rows(self) -> List[dict]:
        return [{"dataset": name, "mode": self.mode, "obs_len": self.window.obs_len,
                 "pred_len": self.window.pred_len, "ade": a, "fde": f, "n_trajectories": n}
                for name, (a, f, n) in self.per_dataset.items()]


REPORT_FIELDS = ["dataset", "mode", "obs_len", "pred_len", "ade", "fde", "n_trajectories"]


def write_report(reports: Sequence[MetricReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                row = dict(row)
                row["ade"] = f"{row['ade']:.6f}"
                row["fde"] = f"{row['fde']:.6f}"
                w.writerow(row)


def read_report(path) -> List[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


class Predictor(Protocol):
    def prepare(self, dataset: TrajectoryDataset) -> None:
        ...

    def predict(self, window: TrajectoryWindow, pred_len: int, rng: np.random.Generator) -> np.ndarray:
        ...


class OraclePredictor:
    """Returns the ground truth; used to exercise the harness."""

    def prepare(self, dataset):
        pass

    def predict(self, window, pred_len, rng):
        return window.pred_xy()[:pred_len]


def constant_velocity_predict(obs, pred_len: int) -> np.ndarray:
    """Extrapolate the mean velocity of the observed positions."""
    obs = np.asarray(obs, dtype=np.float64).reshape(-1, 2)
    if len(obs) < 2:
        raise ValueError("constant-velocity extrapolation needs at least two observed positions")
    v = (obs[-1] - obs[0]) / (len(obs) - 1)
    return obs[-1] + v * np.arange(1, pred_len + 1)[:, None]


class ConstantVelocityPredictor:
    def prepare(self, dataset):
        pass

    def predict(self, window, pred_len, rng):
        return constant_velocity_predict(window.obs_xy(), pred_len)


class RandomPredictor:
    """I.i.d. uniform positions on the unit square at every predicted step."""

    def prepare(self, dataset):
        pass

    def predict(self, window, pred_len, rng):
        return rng.uniform(0.0, 1.0, size=(pred_len, 2))


@dataclass
class ModelBundle:
    r: Optional[Checkpoint]
    d: Optional[Checkpoint]
    b: Checkpoint

    def check(self) -> None:
        ckpt_io.check_compatible(self.r, self.d, self.b)

    @classmethod
    def load(cls, run_dir, b_name: str = "b.ckpt") -> "ModelBundle":
        run_dir = Path(run_dir)
        r = ckpt_io.load(run_dir / "r.ckpt", "R") if (run_dir / "r.ckpt").exists() else None
        d = ckpt_io.load(run_dir / "d.ckpt", "D") if (run_dir / "d.ckpt").exists() else None
        return cls(r, d, ckpt_io.load(run_dir / b_name, "B"))


class RDBPredictor:
    """Closed-loop prediction with B, fed (l_t, h_t) from R and D as configured."""

    def __init__(self, bundle: ModelBundle, mode: str = "mean", tau: float = 0.5, freeze_context: bool = False,
                 best_of: int = 1, clahe=(8, 2.0), images: Optional[Dict[str, Dict[int, np.ndarray]]] = None):
        bundle.check()
        self.bundle = bundle
        self.mode, self.tau, self.freeze, self.best_of = mode, tau, freeze_context, best_of
        self.clahe = clahe
        self.images = images if images is not None else {}
        self.scene: Optional[SceneEncoding] = None

    @property
    def inputs(self) -> InputConfig:
        return self.bundle.b.model.input_config

    def prepare(self, dataset: TrajectoryDataset) -> None:
        if self.inputs is InputConfig.S:
            self.scene = None
            return
        d = self.bundle.d
        n_max = d.model.cfg.n_max if d is not None else dataset.n_max
        cond = d.model.cfg.conditioning if d is not None else "positions"
        noise_seed = d.meta.get("noise_seed", 0) if d is not None else 0
        imgs = self.images.get(dataset.name)
        if imgs is None or any(f not in imgs for f in dataset.video_frames()):
            imgs = preprocess_dataset(dataset, None, *self.clahe)
            self.images[dataset.name] = imgs
        self.scene = encode_scene(dataset, self.bundle.r.model, n_max, cond, noise_seed, imgs)

    def _provider(self, window, rng):
        if self.inputs is InputConfig.S:
            return None
        dyn = self.bundle.d.model if self.bundle.d is not None else None
        return SceneRollout(self.scene, dyn, self.inputs, [s.frame for s in window.obs], window.agent_id,
                            self.tau, rng, self.freeze)

    def predict(self, window, pred_len, rng):
        model = self.bundle.b.model
        if self.mode == "mean" or self.best_of <= 1:
            pred, _ = rollout_agent(window.obs_xy(), self._provider(window, rng), pred_len, model, self.mode, rng)
            return pred
        truth = window.pred_xy()[:pred_len]
        best, best_err = None, math.inf
        for _ in range(self.best_of):
            pred, _ = rollout_agent(window.obs_xy(), self._provider(window, rng), pred_len, model, "sample", rng)
            err = ade(pred, truth)
            if err < best_err:
                best, best_err = pred, err
        return best


def window_rng(seed: int, window: TrajectoryWindow) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(window.agent_id), int(window.start_frame)])


def evaluate(predictor: Predictor, datasets, cfg: WindowConfig, mode: str = "mean", stride: int = 1,
             seed: int = 0, max_windows: Optional[int] = None) -> MetricReport:
    """Roll the predictor over every (obs, pred) window and aggregate ADE/FDE.

    Windows are visited in (dataset, agent_id, start frame) order with one RNG stream per
    window, so results do not depend on evaluation order.
    """
    if isinstance(datasets, TrajectoryDataset):
        datasets = [datasets]
    per, all_a, all_f, all_m = {}, [], [], []
    for ds in datasets:
        predictor.prepare(ds)
        windows = window_split(ds, cfg, stride)
        if max_windows is not None and len(windows) > max_windows:
            pick = np.linspace(0, len(windows) - 1, max_windows).round().astype(int)
            windows = [windows[i] for i in pick]
        a_s, f_s = [], []
        for w in windows:
            pred = predictor.predict(w, cfg.pred_len, window_rng(seed, w))
            truth = w.pred_xy()
            a_s.append(ade(pred, truth))
            f_s.append(fde(pred, truth))
            all_m.append(mean_displacement(pred, truth))
        per[ds.name] = (float(np.mean(a_s)) if a_s else float("nan"),
                        float(np.mean(f_s)) if f_s else float("nan"), len(a_s))
        all_a += a_s
        all_f += f_s
    n = len(all_a)
    return MetricReport(
        ade=float(np.mean(all_a)) if n else float("nan"),
        fde=float(np.mean(all_f)) if n else float("nan"),
        n_trajectories=n, window=cfg, per_dataset=per,
        ade_mean_dist=float(np.mean(all_m)) if n else float("nan"), mode=mode,
    )


class TransferMode(str, Enum):
    RANDOM = "random"
    SUP_S = "sup-s"  # B_targ(s)
    SUP_RDB = "sup-rdb"  # B_targ(s,l,h) + R_targ + D_targ
    SRC_S = "src-s"  # B_src(s) frozen
    SRC_RDB = "src-rdb"  # B_src + R_src + D_src
    UNTRAINED_D = "untrained-d"  # B_src + R_targ + D^untrained
    UNSUP_RD = "unsup-rd"  # B_src + R_targ + D^unsup_targ
    WEAK_RD = "weak-rd"  # B_src + R_targ + D_targ (positions, B frozen)

    @property
    def frozen_b(self) -> bool:
        return self in (TransferMode.SRC_S, TransferMode.SRC_RDB, TransferMode.UNTRAINED_D,
                        TransferMode.UNSUP_RD, TransferMode.WEAK_RD)


@dataclass
class SourceBundle:
    """Checkpoints trained on the source task."""

    r: Optional[Checkpoint] = None
    d: Optional[Checkpoint] = None
    b: Optional[Checkpoint] = None  # B(s, l, h)
    b_s: Optional[Checkpoint] = None  # B(s)

    @classmethod
    def load(cls, run_dir) -> "SourceBundle":
        run_dir = Path(run_dir)

        def opt(name, kind):
            p = run_dir / name
            return ckpt_io.load(p, kind) if p.exists() else None

        return cls(opt("r.ckpt", "R"), opt("d.ckpt", "D"), opt("b.ckpt", "B"), opt("b_s.ckpt", "B"))


@dataclass
class TransferResult:
    mode: TransferMode
    report: MetricReport
    bundle: Optional[ModelBundle]
    b_hash_before: Optional[str] = None
    b_hash_after: Optional[str] = None


def run_transfer(mode, source: SourceBundle, target_datasets: Sequence[TrajectoryDataset], cfg,
                 test_index: Optional[int] = None, eval_window: Optional[WindowConfig] = None, stride: int = 1,
                 seed: int = 0, tau: float = 0.5, freeze_context: bool = False, images=None,
                 max_windows: Optional[int] = None, cache: Optional[dict] = None) -> TransferResult:
    """Assemble the module combination named by ``mode`` and evaluate it on the target task.

    ``cfg`` is the RunConfig used for any target-side training. The target test environment
    is ``target_datasets[test_index]`` (the last one by default); R_targ is fitted on the
    leading ``cfg.r_fraction`` of its frames and metrics use the remainder. ``cache`` may be
    shared between calls to reuse R_targ and trained target modules.
    """
    from .training import eval_subset, r_subset, train_b, train_d, train_r

    mode = TransferMode(mode)
    cache = {} if cache is None else cache
    images = {} if images is None else images
    window = eval_window or cfg.window
    targets = list(target_datasets)
    ti = len(targets) - 1 if test_index is None else test_index
    test = targets[ti]
    train_sets = [d for i, d in enumerate(targets) if i != ti] or [test]
    eval_set = eval_subset(test, cfg.r_fraction) if len(targets) > 1 else test

    def r_targ():
        if "R_targ" not in cache:
            cache["R_targ"] = train_r([r_subset(test, cfg.r_fraction)], cfg, images).checkpoint
        return cache["R_targ"]

    def need(ck, what):
        if ck is None:
            raise ckpt_io.CheckpointError(f"transfer mode {mode.value!r} requires {what}")
        return ck

    b_hash_before = None
    if mode is TransferMode.RANDOM:
        report = evaluate(RandomPredictor(), eval_set, window, stride=stride, seed=seed, max_windows=max_windows)
        return TransferResult(mode, report, None)
    if mode is TransferMode.SUP_S:
        if "B_targ_s" not in cache:
            s_cfg = _with_inputs(cfg, "s")
            cache["B_targ_s"] = train_b(train_sets, None, None, s_cfg, images).checkpoint
        bundle = ModelBundle(None, None, cache["B_targ_s"])
    elif mode is TransferMode.SUP_RDB:
        r = r_targ()
        if "D_targ" not in cache:
            cache["D_targ"] = train_d(train_sets, r, cfg, "positions", images).checkpoint
        if "B_targ" not in cache:
            cache["B_targ"] = train_b(train_sets, r, cache["D_targ"], _with_inputs(cfg, "slh"), images).checkpoint
        bundle = ModelBundle(r, cache["D_targ"], cache["B_targ"])
    else:
        b_src = need(source.b_s if mode is TransferMode.SRC_S else source.b, "a source B checkpoint")
        b_hash_before = ckpt_io.params_hash(b_src.model)
        if mode is TransferMode.SRC_S:
            bundle = ModelBundle(None, None, b_src)
        elif mode is TransferMode.SRC_RDB:
            bundle = ModelBundle(need(source.r, "a source R"), need(source.d, "a source D"), b_src)
        else:
            r = r_targ()
            n_max = max(d.n_max for d in targets)
            if mode is TransferMode.UNTRAINED_D:
                from .dynamics import DynamicsConfig
                torch.manual_seed(seed)
                dcfg = DynamicsConfig(**{**cfg.dynamics.to_dict(), "latent_dim": r.model.cfg.latent_dim,
                                         "n_max": n_max, "conditioning": "positions"})
                d = Checkpoint("D", GlobalDynamics(dcfg), seed, {"untrained": True, "n_max": n_max})
            elif mode is TransferMode.UNSUP_RD:
                if "D_unsup" not in cache:
                    cache["D_unsup"] = train_d(train_sets, r, _with_nmax(cfg, n_max), "noise", images).checkpoint
                d = cache["D_unsup"]
            else:
                if "D_targ" not in cache:
                    cache["D_targ"] = train_d(train_sets, r, _with_nmax(cfg, n_max), "positions", images).checkpoint
                d = cache["D_targ"]
            bundle = ModelBundle(r, d, b_src)
    predictor = RDBPredictor(bundle, tau=tau, freeze_context=freeze_context, images=images,
                             clahe=(cfg.clahe_tiles, cfg.clahe_clip))
    report = evaluate(predictor, eval_set, window, stride=stride, seed=seed, max_windows=max_windows)
    report.mode = mode.value
    b_hash_after = ckpt_io.params_hash(bundle.b.model) if b_hash_before is not None else None
    return TransferResult(mode, report, bundle, b_hash_before, b_hash_after)


def _with_inputs(cfg, inputs: str):
    from .training import RunConfig
    new = RunConfig.from_dict(cfg.to_dict())
    new.predictor.inputs = inputs
    return new


def _with_nmax(cfg, n_max: int):
    from .training import RunConfig
    new = RunConfig.from_dict(cfg.to_dict())
    new.dynamics.n_max = n_max
    return new
