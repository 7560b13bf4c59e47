"""Staged optimization of R -> D -> B, gradient verification and the leave-one-out pipeline."""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .context import SceneEncoding, encode_scene, window_contexts
from .data import TrajectoryDataset, WindowConfig, preprocess_dataset, window_split
from .dynamics import DynamicsConfig, GlobalDynamics, d_nll
from .encoder import EncoderConfig, MmdConfig, SpatialEncoder, images_to_tensor, r_loss
from .predictor import InputConfig, LocalPredictor, PredictorConfig, sequence_nll

log = logging.getLogger(__name__)

STAGES = ("R", "D", "B")


class DependencyError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, stage: str, step: int):
        super().__init__(f"stage {stage} diverged (non-finite loss) at step {step}")
        self.stage, self.step = stage, step


@dataclass
class TrainConfig:
    stage: str = "R"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    max_steps: Optional[int] = None
    seed: int = 0
    clip_norm: float = 5.0
    tau: float = 0.5  # temperature of D rollouts feeding B

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def _default_train(stage: str, lr: float) -> TrainConfig:
    return TrainConfig(stage=stage, lr=lr)


@dataclass
class RunConfig:
    """Complete configuration of a pipeline run; every field maps to a config-file key."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mmd: MmdConfig = field(default_factory=MmdConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    train_r: TrainConfig = field(default_factory=lambda: _default_train("R", 1e-3))
    train_d: TrainConfig = field(default_factory=lambda: _default_train("D", 1e-3))
    train_b: TrainConfig = field(default_factory=lambda: _default_train("B", 3e-3))
    d_seq_len: int = 32
    b_context_warm: Optional[int] = None  # teacher-forced frames before D is sampled at tau; None = always
    noise_seed: int = 0
    r_fraction: float = 0.5  # share of the held-out video used to fit R
    clahe_tiles: int = 8
    clahe_clip: float = 2.0

    def sync(self) -> "RunConfig":
        """Propagate shared widths (latent, summary) between module configs."""
        self.dynamics.latent_dim = self.encoder.latent_dim
        self.predictor.latent_dim = self.encoder.latent_dim
        self.predictor.summary_dim = self.dynamics.hidden_dim
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels"] = list(self.encoder.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kw = {}
        nested = {"encoder": EncoderConfig, "mmd": MmdConfig, "dynamics": DynamicsConfig,
                  "predictor": PredictorConfig, "window": WindowConfig,
                  "train_r": TrainConfig, "train_d": TrainConfig, "train_b": TrainConfig}
        base = cls()
        for name, klass in nested.items():
            sub = asdict(getattr(base, name))
            sub.update(d.pop(name, {}) or {})
            if name == "encoder":
                sub["channels"] = tuple(sub["channels"])
            kw[name] = klass(**sub)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw.update(d)
        return cls(**kw).sync()

    def stage_cfg(self, stage: str) -> TrainConfig:
        return {"R": self.train_r, "D": self.train_d, "B": self.train_b}[stage]


@dataclass
class StageResult:
    checkpoint: Checkpoint
    history: List[float]


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def _optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def _run(stage: str, model, cfg: TrainConfig, n_units: int, loss_fn: Callable[[np.ndarray, int], torch.Tensor],
         progress: Optional[Callable[[int, float], None]] = None) -> List[float]:
    """Generic loop: each epoch shuffles ``n_units`` sample indices into mini-batches."""
    if n_units == 0:
        raise ValueError(f"stage {stage}: no training data")
    opt = _optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    history: List[float] = []
    step = 0
    bs = min(cfg.batch_size, n_units)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * max(n_units // bs, 1)
    while step < total:
        order = rng.permutation(n_units)
        for i in range(0, max(n_units - bs + 1, 1), bs):
            if step >= total:
                break
            idx = order[i:i + bs]
            opt.zero_grad()
            loss = loss_fn(idx, step)
            if not torch.isfinite(loss):
                raise DivergenceError(stage, step)
            loss.backward()
            if cfg.clip_norm and cfg.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            history.append(float(loss.detach()))
            if progress is not None:
                progress(step, history[-1])
            step += 1
    return history


def collect_images(datasets: Sequence[TrajectoryDataset], cfg: RunConfig,
                   cache: Optional[Dict[str, Dict[int, np.ndarray]]] = None) -> Dict[str, Dict[int, np.ndarray]]:
    cache = {} if cache is None else cache
    for ds in datasets:
        if ds.name not in cache or any(f not in cache[ds.name] for f in ds.video_frames()):
            cache[ds.name] = preprocess_dataset(ds, None, cfg.clahe_tiles, cfg.clahe_clip)
    return cache


def train_r(datasets: Sequence[TrajectoryDataset], cfg: RunConfig, images=None, init: Optional[Checkpoint] = None,
            progress=None) -> StageResult:
    tcfg = cfg.train_r
    images = collect_images(datasets, cfg, images)
    stack = np.concatenate([np.stack([images[ds.name][f] for f in ds.video_frames()]) for ds in datasets])
    x_all = images_to_tensor(stack)
    _seed_all(tcfg.seed)
    model = SpatialEncoder(cfg.encoder)
    if init is not None:
        model.load_state_dict(init.model.state_dict())
    model.train()

    def loss_fn(idx, step):
        return r_loss(x_all[torch.as_tensor(idx)], model, cfg.mmd, rng_seed=tcfg.seed * 1_000_003 + step)

    hist = _run("R", model, tcfg, len(x_all), loss_fn, progress)
    model.eval()
    return StageResult(Checkpoint("R", model, tcfg.seed, {"datasets": [d.name for d in datasets]}), hist)


def encode_scenes(datasets: Sequence[TrajectoryDataset], encoder: SpatialEncoder, cfg: RunConfig,
                  conditioning: Optional[str] = None, images=None) -> List[SceneEncoding]:
    images = collect_images(datasets, cfg, images)
    mode = conditioning or cfg.dynamics.conditioning
    return [encode_scene(ds, encoder, cfg.dynamics.n_max, mode, cfg.noise_seed, images[ds.name]) for ds in datasets]


def _chunks(scene: SceneEncoding, length: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    T = len(scene.frames)
    if T < 2:
        return []
    length = min(length, T - 1)
    cond = scene.cond_matrix()
    stride = max(length // 2, 1)
    starts = list(range(0, T - length, stride))
    if starts[-1] != T - length - 1:
        starts.append(T - length - 1)
    return [(scene.latents[s:s + length + 1], cond[s:s + length]) for s in starts]


def train_d(datasets: Sequence[TrajectoryDataset], r: Checkpoint, cfg: RunConfig, conditioning: Optional[str] = None,
            images=None, init: Optional[Checkpoint] = None, progress=None) -> StageResult:
    if r is None:
        raise DependencyError("stage D requires an R checkpoint")
    tcfg = cfg.train_d
    dcfg = DynamicsConfig(**{**cfg.dynamics.to_dict(), "latent_dim": r.model.cfg.latent_dim,
                             "conditioning": conditioning or cfg.dynamics.conditioning})
    scenes = encode_scenes(datasets, r.model, cfg, dcfg.conditioning, images)
    chunks = [c for s in scenes for c in _chunks(s, cfg.d_seq_len)]
    _seed_all(tcfg.seed)
    model = GlobalDynamics(dcfg)
    if init is not None and init.model.cfg.to_dict() == dcfg.to_dict():
        model.load_state_dict(init.model.state_dict())
    by_len = defaultdict(list)
    for i, (lat, _) in enumerate(chunks):
        by_len[len(lat)].append(i)

    def loss_fn(idx, step):
        total, count = 0.0, 0
        groups = defaultdict(list)
        for i in idx:
            groups[len(chunks[i][0])].append(i)
        for _, members in sorted(groups.items()):
            lat = torch.as_tensor(np.stack([chunks[i][0] for i in members]), dtype=torch.float32)
            cond = torch.as_tensor(np.stack([chunks[i][1] for i in members]), dtype=torch.float32)
            nll = d_nll(model, lat, cond)
            total = total + nll.sum()
            count += nll.numel()
        return total / count

    hist = _run("D", model, tcfg, len(chunks), loss_fn, progress)
    meta = {"datasets": [d.name for d in datasets], "n_max": dcfg.n_max, "conditioning": dcfg.conditioning,
            "noise_seed": cfg.noise_seed}
    return StageResult(Checkpoint("D", model, tcfg.seed, meta), hist)


@dataclass
class _BGroup:
    scene: int
    start: int
    positions: np.ndarray  # (n_agents, T, 2)


def _b_groups(scenes: Sequence[SceneEncoding], length: int) -> List[_BGroup]:
    """All agents whose windows share a (scene, start frame) form one mini-batch group."""
    groups = []
    wcfg = WindowConfig(obs_len=1, pred_len=length - 1)
    for si, scene in enumerate(scenes):
        by_start = defaultdict(list)
        for w in window_split(scene.dataset, wcfg, stride=1):
            if all(scene.has(f) for f in w.frames):
                by_start[w.start_frame].append(np.vstack([w.obs_xy(), w.pred_xy()]))
        for start in sorted(by_start):
            groups.append(_BGroup(si, start, np.stack(by_start[start])))
    return groups


def train_b(datasets: Sequence[TrajectoryDataset], r: Optional[Checkpoint], d: Optional[Checkpoint], cfg: RunConfig,
            images=None, progress=None) -> StageResult:
    tcfg = cfg.train_b
    pcfg = PredictorConfig(**cfg.predictor.to_dict())
    inputs = pcfg.input_config
    if inputs.uses_summary and d is None:
        raise DependencyError(f"stage B with inputs {inputs.value!r} requires a D checkpoint")
    if (inputs.uses_latent or inputs.uses_summary) and r is None:
        raise DependencyError(f"stage B with inputs {inputs.value!r} requires an R checkpoint")
    if r is not None:
        pcfg.latent_dim = r.model.cfg.latent_dim
    if d is not None:
        pcfg.summary_dim = d.model.cfg.hidden_dim
        ckpt_io.check_compatible(r, d, None)
    length = cfg.window.train_len
    if inputs is InputConfig.S:
        scenes = [SceneEncoding(ds, ds.video_frames(), np.zeros((len(ds.video_frames()), 0)),
                                np.zeros((len(ds.video_frames()), 0)), []) for ds in datasets]
    else:
        cond = d.model.cfg.conditioning if d is not None else None
        scenes = encode_scenes(datasets, r.model, cfg, cond, images)
    groups = _b_groups(scenes, length)
    dyn = d.model if (d is not None and inputs.uses_summary) else None
    warm = cfg.b_context_warm if dyn is not None else None
    fixed_ctx = None
    if inputs is not InputConfig.S and warm is None:
        fixed_ctx = {}
        for si, scene in enumerate(scenes):
            starts = [g.start for g in groups if g.scene == si]
            if starts:
                ctx = window_contexts(scene, dyn, starts, length, inputs)
                fixed_ctx.update({(si, s): c for s, c in zip(starts, ctx)})
    _seed_all(tcfg.seed)
    model = LocalPredictor(pcfg)

    def loss_fn(idx, step):
        pos, ctx = [], []
        sampled = {}
        if inputs is not InputConfig.S and fixed_ctx is None:
            per_scene = defaultdict(list)
            for i in idx:
                per_scene[groups[i].scene].append(groups[i].start)
            for si, starts in per_scene.items():
                c = window_contexts(scenes[si], dyn, starts, length, inputs, warm=warm, tau=tcfg.tau,
                                    seed=tcfg.seed * 7919 + step * 31 + si)
                sampled.update({(si, s): ci for s, ci in zip(starts, c)})
        for i in idx:
            g = groups[i]
            pos.append(g.positions)
            if inputs is not InputConfig.S:
                c = fixed_ctx[(g.scene, g.start)] if fixed_ctx is not None else sampled[(g.scene, g.start)]
                ctx.append(np.repeat(c[None], len(g.positions), 0))
        p = torch.as_tensor(np.concatenate(pos), dtype=torch.float32)
        c = torch.as_tensor(np.concatenate(ctx), dtype=torch.float32) if ctx else None
        return sequence_nll(model, p, c).mean()

    hist = _run("B", model, tcfg, len(groups), loss_fn, progress)
    meta = {"datasets": [ds.name for ds in datasets], "train_len": length}
    return StageResult(Checkpoint("B", model, tcfg.seed, meta), hist)


def train_stage(stage: str, datasets: Sequence[TrajectoryDataset], upstream: Optional[Dict[str, Checkpoint]],
                cfg: RunConfig, images=None, progress=None, **kw) -> StageResult:
    upstream = upstream or {}
    stage = stage.upper()
    if stage == "R":
        return train_r(datasets, cfg, images, init=kw.get("init"), progress=progress)
    if stage == "D":
        if "R" not in upstream:
            raise DependencyError("stage D requires an R checkpoint")
        return train_d(datasets, upstream["R"], cfg, kw.get("conditioning"), images, kw.get("init"), progress)
    if stage == "B":
        return train_b(datasets, upstream.get("R"), upstream.get("D"), cfg, images, progress)
    raise ValueError(f"unknown stage {stage!r}")


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                            slice_size: int = 10, eps: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between autograd and central differences on a random parameter slice."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [p for p in params]
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(slice_size, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with torch.no_grad():
        for g in flat:
            pi = int(np.searchsorted(bounds, g, side="right"))
            off = int(g - (bounds[pi - 1] if pi > 0 else 0))
            p = params[pi].view(-1)
            orig = p[off].item()
            p[off] = orig + eps
            up = loss_fn().item()
            p[off] = orig - eps
            down = loss_fn().item()
            p[off] = orig
            numeric = (up - down) / (2 * eps)
            analytic = 0.0 if grads[pi] is None else grads[pi].reshape(-1)[off].item()
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def write_history(path, histories: Dict[str, List[float]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "step", "loss"])
        order = [s for s in STAGES if s in histories] + sorted(set(histories) - set(STAGES))
        for stage in order:
            for i, v in enumerate(histories[stage]):
                w.writerow([stage, i, repr(float(v))])


def read_history(path) -> Dict[str, List[float]]:
    out: Dict[str, List[float]] = defaultdict(list)
    p = Path(path)
    if not p.exists():
        return {}
    with p.open() as fh:
        for row in csv.DictReader(fh):
            out[row["stage"]].append(float(row["loss"]))
    return dict(out)


def train_pipeline(datasets: Sequence[TrajectoryDataset], cfg: RunConfig, test_index: Optional[int] = None,
                   out_dir=None, stages: Sequence[str] = STAGES, progress=None,
                   images=None) -> Dict[str, Checkpoint]:
    """Train R, D and B in order.

    With ``test_index`` set, D and B see every other environment while R is fitted on the
    leading ``r_fraction`` of the held-out environment's frames only. Stages whose checkpoint
    already exists in ``out_dir`` are loaded instead of retrained.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    cfg.sync()
    if test_index is None:
        train_sets, r_sets = list(datasets), list(datasets)
    else:
        from .data import leave_one_out_split
        train_sets, held = leave_one_out_split(list(datasets), test_index)
        r_sets = [r_subset(held, cfg.r_fraction)]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    histories = read_history(out / "history.csv") if out is not None else {}
    images = {} if images is None else images
    result: Dict[str, Checkpoint] = {}
    for stage in STAGES:
        path = out / f"{stage.lower()}.ckpt" if out is not None else None
        if path is not None and path.exists():
            result[stage] = ckpt_io.load(path, stage)
            continue
        if stage not in stages:
            continue
        sets = r_sets if stage == "R" else train_sets
        res = train_stage(stage, sets, result, cfg, images,
                          progress=(lambda s, v, st=stage: progress(st, s, v)) if progress else None)
        result[stage] = res.checkpoint
        histories[stage] = res.history
        if path is not None:
            ckpt_io.save(res.checkpoint, path)
            write_history(out / "history.csv", histories)
    if out is not None:
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return result


def r_subset(dataset: TrajectoryDataset, fraction: float) -> TrajectoryDataset:
    """Leading share of a video used to fit R; the rest is left for evaluation."""
    frames = dataset.video_frames()
    if not frames or fraction >= 1.0:
        return dataset
    cut = frames[0] + max(int(len(frames) * fraction), 1) - 1
    return dataset.subset_frames(frames[0], cut, name=dataset.name)


def eval_subset(dataset: TrajectoryDataset, fraction: float) -> TrajectoryDataset:
    """Frames of the held-out video not used to fit R."""
    frames = dataset.video_frames()
    if not frames or fraction >= 1.0:
        return dataset
    cut = frames[0] + max(int(len(frames) * fraction), 1)
    return dataset.subset_frames(cut, frames[-1], name=dataset.name)
