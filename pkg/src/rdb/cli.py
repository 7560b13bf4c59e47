"""Command-line entry point: ``rdb [--seed N] [--config FILE] [--out DIR] COMMAND ...``.

Every command writes ``run_manifest.json`` into its output directory before doing any
work. ``rdb replay <manifest>`` re-executes the recorded command with the recorded
configuration and seed.

Exit codes: 0 success, 1 runtime or numeric failure, 2 configuration or validation failure.
"""
from __future__ import annotations

import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click
import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt_io
from .data import DataError, TrajectoryDataset, WindowConfig, load_annotations, load_manifest, thread_cap, \
    window_split, write_annotations, write_manifest
from .synthetic import CrowdSceneConfig, GearTaskConfig, GenerationError, config_dict, crowd_suite, \
    gen_crowd_scene, gen_gear_task, gear_suite, write_dataset

log = logging.getLogger("rdb")

MANIFEST_NAME = "run_manifest.json"


class ConfigError(click.ClickException):
    exit_code = 2


class RuntimeFailure(click.ClickException):
    exit_code = 1


# --------------------------------------------------------------------------- manifests

def tree_hash(paths: Sequence[Path]) -> str:
    """Content hash over files (or every file under directories), independent of location."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for p in files:
            if p.name == MANIFEST_NAME:
                continue
            rel = p.relative_to(root).as_posix() if root.is_dir() else p.name
            h.update(rel.encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def write_run_manifest(out: Path, command: str, args: List[str], seed: int, config: dict,
                       inputs: Sequence[Path] = (), checkpoints: Sequence[str] = (),
                       config_file: Optional[dict] = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": list(args),
        "seed": int(seed),
        "config": config,
        "config_file": config_file,
        "inputs": [str(Path(p).resolve()) for p in inputs],
        "input_hash": tree_hash([Path(p) for p in inputs]) if inputs else None,
        "checkpoints": list(checkpoints),
        "version": __version__,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# --------------------------------------------------------------------------- helpers

class State:
    def __init__(self, seed: int, config: dict, out: Path):
        self.seed, self.config, self.out = seed, config, out


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _run_config(state: State, overrides: Optional[Dict[str, dict]] = None):
    """RunConfig from the config file with flag overrides (``None`` flags are ignored)."""
    from .training import RunConfig
    base = {k: (dict(v) if isinstance(v, dict) else v) for k, v in state.config.items() if k != "synth"}
    for section, values in (overrides or {}).items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            base[section] = {**base.get(section, {}), **values}
    try:
        cfg = RunConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}")
    for t in (cfg.train_r, cfg.train_d, cfg.train_b):
        t.seed = state.seed
    if "noise_seed" not in base:
        cfg.noise_seed = state.seed
    return cfg


def _datasets(paths: Sequence[str]) -> List[TrajectoryDataset]:
    if not paths:
        raise ConfigError("at least one --data directory is required")
    out = []
    for p in paths:
        try:
            out.append(load_manifest(p))
        except FileNotFoundError as exc:
            raise ConfigError(f"dataset not found: {exc}")
    return out


def _window(obs: Optional[int], pred: Optional[int], cfg) -> WindowConfig:
    w = cfg.window
    try:
        return WindowConfig(obs_len=obs or w.obs_len, pred_len=pred or w.pred_len, frame_period=w.frame_period,
                            train_len=w.train_len)
    except ValueError as exc:
        raise ConfigError(str(exc))


def _write_plots(predictor, datasets, window: WindowConfig, out: Path, n_plots: int, seed: int,
                 tag: str) -> List[str]:
    from .evaluation import window_rng
    from .plotting import trajectory_svg
    written = []
    if n_plots <= 0:
        return written
    plot_dir = out / "plots"
    plot_dir.mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        predictor.prepare(ds)
        windows = window_split(ds, window, stride=1)
        if not windows:
            continue
        picks = sorted(set(np.linspace(0, len(windows) - 1, min(n_plots, len(windows))).round().astype(int)))
        for i in picks:
            w = windows[i]
            pred = predictor.predict(w, window.pred_len, window_rng(seed, w))
            image = None
            if ds.frames_dir is not None or ds.frames:
                image = ds.raw_frame(w.obs[-1].frame)
            name = f"{tag}_{ds.name}_agent{w.agent_id}_f{w.start_frame}.svg"
            (plot_dir / name).write_text(trajectory_svg(image, w.obs_xy(), w.pred_xy(), [pred],
                                                        title=f"{ds.name} agent {w.agent_id}"))
            written.append(name)
    return written


def _eval_sets(datasets, holdout: Optional[int], fraction: float):
    from .training import eval_subset
    if holdout is None:
        return datasets
    if not 0 <= holdout < len(datasets):
        raise ConfigError(f"--holdout {holdout} out of range for {len(datasets)} datasets")
    return [eval_subset(datasets[holdout], fraction)]


# --------------------------------------------------------------------------- root group

@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for every random stream.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON config; keys mirror the flags, flags win.")
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True,
              help="Output directory.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress.")
@click.version_option(__version__)
@click.pass_context
def cli(ctx, seed, config_path, out, verbose):
    """Trajectory prediction from spatial encodings (R), scene dynamics (D) and a local predictor (B)."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(thread_cap())
    ctx.obj = State(seed, _load_config(config_path), Path(out))


def _manifest(ctx, command: str, config: dict, inputs=(), checkpoints=()) -> None:
    state: State = ctx.obj
    args = ctx.find_root().meta.get("rdb.args", [])
    write_run_manifest(state.out, command, args, state.seed, config, inputs, checkpoints,
                       state.config or None)


# --------------------------------------------------------------------------- synth

@cli.command()
@click.argument("task", type=click.Choice(["crowd", "gears"]))
@click.option("--direction", default=None, help="gears: clockwise or anticlockwise.")
@click.option("--suite", is_flag=True, help="Write the full five-environment suite.")
@click.option("--n-frames", type=int, default=None, help="crowd: frames per scene.")
@click.option("--layouts", type=int, default=None, help="gears: landmark arrangements per scene.")
@click.option("--loops", type=int, default=None, help="gears: visitation cycles per arrangement.")
@click.option("--name", default=None, help="Dataset name (single scene).")
@click.option("--preview", is_flag=True, help="Also write a contact-sheet SVG.")
@click.pass_context
def synth(ctx, task, direction, suite, n_frames, layouts, loops, name, preview):
    """Generate a synthetic dataset (or suite) in the canonical on-disk format."""
    state: State = ctx.obj
    params = dict(state.config.get("synth", {}))
    flags = {"direction": direction, "n_frames": n_frames, "layouts": layouts, "loops": loops, "name": name}
    params.update({k: v for k, v in flags.items() if v is not None})
    if task == "crowd":
        for k in ("direction", "layouts", "loops"):
            if k in params:
                raise ConfigError(f"option {k!r} does not apply to crowd scenes")
    elif "n_frames" in params:
        raise ConfigError("option 'n_frames' does not apply to the gear task")
    if "direction" in params and params["direction"] not in ("clockwise", "anticlockwise"):
        raise ConfigError(f"invalid direction {params['direction']!r}: expected clockwise or anticlockwise")
    try:
        if suite:
            params.pop("name", None)
            if task == "crowd":
                n = params.pop("n_frames", 400)
                cfgs = crowd_suite(seed=state.seed, n_frames=n, **params)
            else:
                if "direction" in params:
                    raise ConfigError("--direction is fixed by the suite (clockwise train, anticlockwise test)")
                cfgs = gear_suite(seed=state.seed, **params)
        else:
            klass = CrowdSceneConfig if task == "crowd" else GearTaskConfig
            params.setdefault("name", task)
            cfgs = [klass(seed=state.seed, **params)]
    except TypeError as exc:
        raise ConfigError(f"invalid generator option: {exc}")
    _manifest(ctx, "synth", {"task": task, "suite": suite, "scenes": [config_dict(c) for c in cfgs]})
    gen = gen_crowd_scene if task == "crowd" else gen_gear_task
    for c in cfgs:
        ds, frames = gen(c)
        target = state.out / c.name
        write_dataset(ds, frames, target, config=config_dict(c), preview=preview)
        click.echo(f"wrote {target} ({len(ds)} records, {len(frames)} frames)")


# --------------------------------------------------------------------------- ingest

@cli.command()
@click.argument("annotations", type=click.Path(exists=True, dir_okay=False))
@click.option("--frames-dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--width", type=int, required=True, help="Source frame width in pixels.")
@click.option("--height", type=int, required=True, help="Source frame height in pixels.")
@click.option("--name", default=None)
@click.option("--frame-period", type=float, default=0.4, show_default=True)
@click.option("--n-max", type=int, default=16, show_default=True)
@click.pass_context
def ingest(ctx, annotations, frames_dir, width, height, name, frame_period, n_max):
    """Validate a frame,agent_id,x,y CSV and write a canonical dataset manifest."""
    state: State = ctx.obj
    inputs = [Path(annotations)] + ([Path(frames_dir)] if frames_dir else [])
    _manifest(ctx, "ingest", {"width": width, "height": height, "name": name, "frame_period": frame_period,
                              "n_max": n_max}, inputs)
    ds = load_annotations(annotations, (width, height), name=name, n_max=n_max, frame_period=frame_period,
                          frames_dir=frames_dir)
    write_annotations(ds, state.out / "annotations.csv")
    write_manifest(state.out / "manifest.json", name=ds.name, annotations_path="annotations.csv",
                   frames_dir=str(Path(frames_dir).resolve()) if frames_dir else "", width_px=width,
                   height_px=height, frame_period_s=frame_period, n_max=n_max)
    click.echo(f"ingested {len(ds)} records for {len(np.unique(ds.agent_id))} agents into {state.out}")


# --------------------------------------------------------------------------- train

@cli.command()
@click.argument("stage", type=click.Choice(["r", "d", "b", "all"]))
@click.option("--data", "data", multiple=True, required=True, help="Dataset directory (repeatable).")
@click.option("--holdout", type=int, default=None, help="Leave-one-out test environment index.")
@click.option("--upstream", type=click.Path(file_okay=False), default=None,
              help="Run directory holding upstream checkpoints (default: --out).")
@click.option("--inputs", type=click.Choice(["s", "sl", "sh", "slh"]), default=None, help="B inputs.")
@click.option("--conditioning", type=click.Choice(["positions", "noise", "zeros"]), default=None,
              help="D conditioning.")
@click.option("--steps", type=int, default=None, help="Max optimizer steps for the trained stage(s).")
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--latent-dim", type=int, default=None)
@click.option("--hidden-dim", type=int, default=None, help="D summary width.")
@click.option("--n-max", type=int, default=None)
@click.option("--obs", type=int, default=None)
@click.option("--pred", type=int, default=None)
@click.option("--train-len", type=int, default=None)
@click.pass_context
def train(ctx, stage, data, holdout, upstream, inputs, conditioning, steps, epochs, batch_size, lr,
          latent_dim, hidden_dim, n_max, obs, pred, train_len):
    """Train R, D, B or the whole pipeline; writes checkpoints and history.csv."""
    from .training import STAGES, r_subset, read_history, train_stage, write_history
    state: State = ctx.obj
    stages = list(STAGES) if stage == "all" else [stage.upper()]
    tr = {"max_steps": steps, "epochs": epochs, "batch_size": batch_size, "lr": lr}
    overrides = {"encoder": {"latent_dim": latent_dim}, "dynamics": {"hidden_dim": hidden_dim, "n_max": n_max,
                                                                     "conditioning": conditioning},
                 "predictor": {"inputs": inputs},
                 "window": {"obs_len": obs, "pred_len": pred, "train_len": train_len}}
    for s in stages:
        overrides[f"train_{s.lower()}"] = tr
    cfg = _run_config(state, overrides)
    datasets = _datasets(data)
    names = {s: _ckpt_name(s, cfg) for s in stages}
    _manifest(ctx, "train", cfg.to_dict(), [Path(p) for p in data] + ([Path(upstream)] if upstream else []),
              [names[s] for s in stages])
    if holdout is None:
        train_sets, r_sets = datasets, datasets
    else:
        if len(datasets) < 2 or not 0 <= holdout < len(datasets):
            raise ConfigError(f"--holdout {holdout} needs at least two datasets and a valid index")
        train_sets = [d for i, d in enumerate(datasets) if i != holdout]
        r_sets = [r_subset(datasets[holdout], cfg.r_fraction)]
    out = state.out
    up_dir = Path(upstream) if upstream else out
    result: Dict[str, ckpt_io.Checkpoint] = {}
    for s in ("R", "D"):
        if s not in stages and (up_dir / f"{s.lower()}.ckpt").exists():
            result[s] = ckpt_io.load(up_dir / f"{s.lower()}.ckpt", s)
    histories = read_history(out / "history.csv") if (out / "history.csv").exists() else {}
    images: dict = {}
    for s in stages:
        res = train_stage(s, r_sets if s == "R" else train_sets, result, cfg, images,
                          progress=_progress(s) if log.isEnabledFor(logging.INFO) else None)
        result[s] = res.checkpoint
        digest = ckpt_io.save(res.checkpoint, out / names[s])
        histories[s if names[s] != "b_s.ckpt" else "B_s"] = res.history
        write_history(out / "history.csv", histories)
        click.echo(f"stage {s}: {out / names[s]} sha256={digest[:16]} final loss {res.history[-1]:.4f}")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _ckpt_name(stage: str, cfg) -> str:
    if stage == "B" and cfg.predictor.inputs == "s":
        return "b_s.ckpt"
    return f"{stage.lower()}.ckpt"


def _progress(stage):
    def report(step, loss):
        if step % 100 == 0:
            log.info("stage %s step %d loss %.4f", stage, step, loss)
    return report


# --------------------------------------------------------------------------- eval

@cli.command("eval")
@click.option("--run", "run_dir", type=click.Path(file_okay=False), default=None,
              help="Run directory with r/d/b checkpoints.")
@click.option("--data", "data", multiple=True, required=True)
@click.option("--holdout", type=int, default=None, help="Evaluate on the held-out frames of this environment.")
@click.option("--predictor", "kind", type=click.Choice(["rdb", "b-s", "cv", "random", "oracle"]), default="rdb",
              show_default=True)
@click.option("--obs", type=int, default=None)
@click.option("--pred", type=int, default=None)
@click.option("--mode", type=click.Choice(["mean", "sample"]), default="mean", show_default=True)
@click.option("--best-of", type=int, default=1, show_default=True, help="Best of N sampled rollouts.")
@click.option("--tau", type=float, default=0.5, show_default=True)
@click.option("--freeze-context", is_flag=True, help="Hold the last observed context during prediction.")
@click.option("--stride", type=int, default=1, show_default=True)
@click.option("--max-windows", type=int, default=None)
@click.option("--plots", type=int, default=4, show_default=True, help="Overlay SVGs per dataset.")
@click.pass_context
def evaluate_cmd(ctx, run_dir, data, holdout, kind, obs, pred, mode, best_of, tau, freeze_context, stride,
                 max_windows, plots):
    """Evaluate a predictor; writes report.csv and trajectory overlay SVGs."""
    from .evaluation import ConstantVelocityPredictor, ModelBundle, OraclePredictor, RandomPredictor, \
        RDBPredictor, evaluate, write_report
    state: State = ctx.obj
    cfg = _run_config(state)
    window = _window(obs, pred, cfg)
    if kind in ("rdb", "b-s") and run_dir is None:
        raise ConfigError(f"--predictor {kind} needs --run")
    _manifest(ctx, "eval", {"run": cfg.to_dict(), "window": window.__dict__, "predictor": kind},
              [Path(p) for p in data] + ([Path(run_dir)] if run_dir else []))
    datasets = _eval_sets(_datasets(data), holdout, cfg.r_fraction)
    if kind in ("rdb", "b-s"):
        bundle = ModelBundle.load(run_dir, "b.ckpt" if kind == "rdb" else "b_s.ckpt")
        predictor = RDBPredictor(bundle, mode=mode, tau=tau, freeze_context=freeze_context, best_of=best_of,
                                 clahe=(cfg.clahe_tiles, cfg.clahe_clip))
    else:
        predictor = {"cv": ConstantVelocityPredictor, "random": RandomPredictor, "oracle": OraclePredictor}[kind]()
    report = evaluate(predictor, datasets, window, mode=mode, stride=stride, seed=state.seed,
                      max_windows=max_windows)
    report.mode = kind if kind != "rdb" else mode
    write_report([report], state.out / "report.csv")
    _write_plots(predictor, datasets, window, state.out, plots, state.seed, kind)
    click.echo(f"ADE {report.ade:.4f}  FDE {report.fde:.4f}  mean-distance ADE {report.ade_mean_dist:.4f}  "
               f"({report.n_trajectories} trajectories)")


# --------------------------------------------------------------------------- transfer

@cli.command()
@click.option("--mode", "modes", multiple=True, required=True,
              help="random, sup-s, sup-rdb, src-s, src-rdb, untrained-d, unsup-rd or weak-rd (repeatable).")
@click.option("--source", type=click.Path(file_okay=False), default=None, help="Source-task run directory.")
@click.option("--target", multiple=True, required=True, help="Target dataset directories.")
@click.option("--holdout", type=int, default=None, help="Target test environment (default: last).")
@click.option("--obs", type=int, default=None)
@click.option("--pred", type=int, default=None)
@click.option("--steps", type=int, default=None, help="Max steps for target-side training stages.")
@click.option("--tau", type=float, default=0.5, show_default=True)
@click.option("--freeze-context", is_flag=True)
@click.option("--stride", type=int, default=1, show_default=True)
@click.option("--max-windows", type=int, default=None)
@click.option("--plots", type=int, default=2, show_default=True)
@click.pass_context
def transfer(ctx, modes, source, target, holdout, obs, pred, steps, tau, freeze_context, stride, max_windows,
             plots):
    """Recombine source and target modules (frozen-B transfer) and report ADE/FDE per mode."""
    from .evaluation import RDBPredictor, SourceBundle, TransferMode, run_transfer, write_report
    state: State = ctx.obj
    try:
        modes = [TransferMode(m) for m in modes]
    except ValueError as exc:
        raise ConfigError(str(exc))
    tr = {"max_steps": steps}
    cfg = _run_config(state, {"train_r": tr, "train_d": tr, "train_b": tr})
    window = _window(obs, pred, cfg)
    if source is None and any(m.frozen_b for m in modes):
        raise ConfigError("frozen-B modes need --source")
    _manifest(ctx, "transfer", {"run": cfg.to_dict(), "window": window.__dict__, "modes": [m.value for m in modes]},
              [Path(p) for p in target] + ([Path(source)] if source else []))
    src = SourceBundle.load(source) if source else SourceBundle()
    targets = _datasets(target)
    if src.b is not None:
        cfg.predictor.latent_dim = src.b.model.cfg.latent_dim
        cfg.encoder.latent_dim = src.b.model.cfg.latent_dim
        cfg.dynamics.hidden_dim = src.b.model.cfg.summary_dim
        cfg.sync()
    cache: dict = {}
    images: dict = {}
    reports, hashes = [], {}
    for m in modes:
        res = run_transfer(m, src, targets, cfg, test_index=holdout, eval_window=window, stride=stride,
                           seed=state.seed, tau=tau, freeze_context=freeze_context, images=images,
                           max_windows=max_windows, cache=cache)
        reports.append(res.report)
        if res.b_hash_before is not None:
            hashes[m.value] = {"before": res.b_hash_before, "after": res.b_hash_after,
                               "unchanged": res.b_hash_before == res.b_hash_after}
            if res.b_hash_before != res.b_hash_after:
                raise RuntimeFailure(f"frozen B changed during transfer mode {m.value}")
        if res.bundle is not None and plots > 0:
            predictor = RDBPredictor(res.bundle, tau=tau, freeze_context=freeze_context, images=images)
            ti = len(targets) - 1 if holdout is None else holdout
            _write_plots(predictor, _eval_sets(targets, ti, cfg.r_fraction) if len(targets) > 1 else targets,
                         window, state.out, plots, state.seed, m.value)
        click.echo(f"{m.value:12s} ADE {res.report.ade:.4f}  FDE {res.report.fde:.4f}")
    write_report(reports, state.out / "report.csv")
    (state.out / "b_hashes.json").write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- plot

@cli.command()
@click.option("--data", "data", required=True, help="Dataset directory.")
@click.option("--run", "run_dir", type=click.Path(file_okay=False), default=None,
              help="Overlay predictions from this run; without it a contact sheet is written.")
@click.option("--obs", type=int, default=None)
@click.option("--pred", type=int, default=None)
@click.option("--samples", type=int, default=0, help="Sampled rollouts to overlay besides the mean.")
@click.option("--count", type=int, default=4, show_default=True)
@click.pass_context
def plot(ctx, data, run_dir, obs, pred, samples, count):
    """Emit SVG figures: contact sheet of a dataset or prediction overlays from a run."""
    from .evaluation import ModelBundle, RDBPredictor, window_rng
    from .plotting import contact_sheet_svg, trajectory_svg
    state: State = ctx.obj
    cfg = _run_config(state)
    window = _window(obs, pred, cfg)
    _manifest(ctx, "plot", {"window": window.__dict__, "samples": samples, "count": count},
              [Path(data)] + ([Path(run_dir)] if run_dir else []))
    ds = _datasets([data])[0]
    state.out.mkdir(parents=True, exist_ok=True)
    if run_dir is None:
        frames = {f: ds.raw_frame(f) for f in ds.video_frames()}
        (state.out / f"{ds.name}_contact.svg").write_text(contact_sheet_svg(ds, frames))
        click.echo(f"wrote {state.out / (ds.name + '_contact.svg')}")
        return
    bundle = ModelBundle.load(run_dir)
    mean_p = RDBPredictor(bundle, clahe=(cfg.clahe_tiles, cfg.clahe_clip))
    mean_p.prepare(ds)
    sample_p = RDBPredictor(bundle, mode="sample", images=mean_p.images, clahe=(cfg.clahe_tiles, cfg.clahe_clip))
    if samples:
        sample_p.prepare(ds)
    windows = window_split(ds, window, stride=1)
    if not windows:
        raise ConfigError("dataset has no window of the requested length")
    picks = sorted(set(np.linspace(0, len(windows) - 1, min(count, len(windows))).round().astype(int)))
    for i in picks:
        w = windows[i]
        rng = window_rng(state.seed, w)
        preds = [mean_p.predict(w, window.pred_len, rng)]
        preds += [sample_p.predict(w, window.pred_len, rng) for _ in range(samples)]
        svg = trajectory_svg(ds.raw_frame(w.obs[-1].frame), w.obs_xy(), w.pred_xy(), preds,
                             title=f"{ds.name} agent {w.agent_id}")
        (state.out / f"{ds.name}_agent{w.agent_id}_f{w.start_frame}.svg").write_text(svg)
    click.echo(f"wrote {len(picks)} overlays to {state.out}")


# --------------------------------------------------------------------------- replay

@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--check-inputs/--no-check-inputs", default=True, show_default=True,
              help="Refuse to replay when the recorded input content hash differs.")
@click.pass_context
def replay(ctx, manifest, check_inputs):
    """Re-run a command from its run_manifest.json into --out."""
    state: State = ctx.obj
    m = json.loads(Path(manifest).read_text())
    if m.get("command") == "replay":
        raise ConfigError("cannot replay a replay manifest")
    if check_inputs and m.get("inputs"):
        now = tree_hash([Path(p) for p in m["inputs"]])
        if now != m.get("input_hash"):
            raise ConfigError("inputs changed since the recorded run (content hash mismatch)")
    state.out.mkdir(parents=True, exist_ok=True)
    argv = ["--seed", str(m["seed"]), "--out", str(state.out)]
    if m.get("config_file") is not None:
        cfg_path = state.out / "replay_config.json"
        cfg_path.write_text(json.dumps(m["config_file"], indent=2, sort_keys=True) + "\n")
        argv += ["--config", str(cfg_path)]
    argv += list(m["args"])
    code = main(argv, standalone=False)
    if code:
        ctx.exit(code)


# --------------------------------------------------------------------------- entry

_CONFIG_ERRORS: tuple = (DataError, GenerationError, ckpt_io.CheckpointError, FileNotFoundError, ValueError,
                         KeyError)


def main(argv: Optional[Sequence[str]] = None, standalone: bool = True) -> int:
    """Run the CLI and map failures onto exit codes 0 / 1 / 2."""
    from .training import DependencyError
    argv = list(sys.argv[1:] if argv is None else argv)
    command_args = _split_args(argv)
    try:
        with cli.make_context("rdb", list(argv)) as ctx:
            ctx.meta["rdb.args"] = command_args
            cli.invoke(ctx)
        code = 0
    except click.exceptions.Exit as exc:
        code = exc.exit_code
    except click.ClickException as exc:
        exc.show()
        code = exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        code = 1
    except (DependencyError,) + _CONFIG_ERRORS as exc:
        click.echo(f"Error: {exc}", err=True)
        code = 2
    except Exception as exc:  # runtime and numeric failures
        click.echo(f"Error: {type(exc).__name__}: {exc}", err=True)
        code = 1
    if standalone:
        sys.exit(code)
    return code


def _split_args(argv: List[str]):
    """Separate global options from the command's own arguments (recorded in manifests)."""
    rest, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in ("--seed", "--out", "--config") and i + 1 < len(argv):
            i += 2
            continue
        if a.startswith(("--seed=", "--out=", "--config=")):
            i += 1
            continue
        if a in ("-v", "--verbose"):
            i += 1
            continue
        rest.append(a)
        i += 1
    return rest
