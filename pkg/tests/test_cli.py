import hashlib
import json
import shutil
from pathlib import Path

import pytest
import torch

from conftest import tiny_run_config
from rdb import cli as cli_mod
from rdb.cli import main


def run(*argv):
    return main([str(a) for a in argv], standalone=False)


def tree(path: Path):
    return {p.relative_to(path).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def gear_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("--seed", 0, "--out", out, "synth", "gears", "--suite", "--loops", 1, "--layouts", 1) == 0
    return [out / f"gears{i}" for i in range(5)][2:]  # two clockwise scenes plus the anticlockwise one


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    d = tiny_run_config().to_dict()
    path.write_text(json.dumps(d))
    return path


class TestExitCodes:
    def test_invalid_direction(self, tmp_path):
        assert run("--out", tmp_path, "synth", "gears", "--direction", "sideways") == 2

    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"encoder": {"latent_dims": 3}}))
        assert run("--config", cfg, "--out", tmp_path, "train", "r", "--data", tmp_path) == 2

    def test_malformed_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert run("--config", cfg, "--out", tmp_path, "synth", "gears") == 2

    def test_missing_dataset(self, tmp_path):
        assert run("--out", tmp_path, "eval", "--predictor", "cv", "--data", tmp_path / "nope") == 2

    def test_missing_upstream(self, tmp_path, gear_data, tiny_config):
        assert run("--config", tiny_config, "--out", tmp_path, "train", "d", "--data", gear_data[0]) == 2

    def test_unknown_transfer_mode(self, tmp_path, gear_data):
        assert run("--out", tmp_path, "transfer", "--mode", "bogus", "--target", gear_data[0]) == 2

    def test_runtime_failure(self, tmp_path, monkeypatch):
        def boom(cfg):
            raise RuntimeError("disk on fire")
        monkeypatch.setattr(cli_mod, "gen_gear_task", boom)
        assert run("--out", tmp_path, "synth", "gears") == 1


def test_thread_cap(tmp_path, monkeypatch):
    monkeypatch.setenv("RDB_THREADS", "2")
    before = torch.get_num_threads()
    try:
        assert run("--out", tmp_path, "synth", "gears", "--loops", 1) == 0
        assert torch.get_num_threads() == 2
    finally:
        torch.set_num_threads(before)


def test_synth_writes_dataset_and_manifest(tmp_path):
    assert run("--seed", 3, "--out", tmp_path, "synth", "gears", "--loops", 1, "--name", "g", "--preview") == 0
    for f in ("g/manifest.json", "g/annotations.csv", "g/preview.svg", "g/frames/frame_0.png", "run_manifest.json"):
        assert (tmp_path / f).exists(), f
    m = json.loads((tmp_path / "run_manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 3
    assert m["args"] == ["synth", "gears", "--loops", "1", "--name", "g", "--preview"]


def test_synth_replay_is_identical(tmp_path):
    assert run("--seed", 5, "--out", tmp_path / "a", "synth", "crowd", "--n-frames", 30) == 0
    assert run("--out", tmp_path / "b", "replay", tmp_path / "a" / "run_manifest.json") == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_ingest(tmp_path):
    csv = tmp_path / "ann.csv"
    csv.write_text("frame,agent_id,x,y\n0,1,10,20\n1,1,12,22\n2,1,14,24\n")
    assert run("--out", tmp_path / "ds", "ingest", csv, "--width", 100, "--height", 100, "--name", "mine") == 0
    man = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert man["name"] == "mine" and man["width_px"] == 100
    csv.write_text("frame,agent_id,x,y\n0,1,10,20\n0,1,12,22\n")
    assert run("--out", tmp_path / "bad", "ingest", csv, "--width", 100, "--height", 100) == 2


class TestPipelineCommands:
    def test_train_eval_transfer_plot_and_replay(self, tmp_path, gear_data, tiny_config):
        data = [a for p in gear_data for a in ("--data", p)]
        run_dir = tmp_path / "run"
        assert run("--config", tiny_config, "--out", run_dir, "train", "all", *data, "--holdout", 2) == 0
        for f in ("r.ckpt", "d.ckpt", "b.ckpt", "history.csv", "config.json", "run_manifest.json"):
            assert (run_dir / f).exists(), f
        first = tree(run_dir)

        # replay of the full pipeline reproduces every checkpoint and the loss history byte for byte
        assert run("--out", tmp_path / "again", "replay", run_dir / "run_manifest.json") == 0
        again = tree(tmp_path / "again")
        for f in ("r.ckpt", "d.ckpt", "b.ckpt", "history.csv", "config.json"):
            assert again[f] == first[f], f

        assert run("--config", tiny_config, "--out", run_dir, "train", "b", *data[:4], "--inputs", "s") == 0
        assert (run_dir / "b_s.ckpt").exists()
        assert "B_s" in (run_dir / "history.csv").read_text()

        ev = tmp_path / "eval"
        args = ["eval", "--run", run_dir, *data, "--holdout", 2, "--obs", 3, "--pred", 4, "--stride", 8,
                "--plots", 1]
        assert run("--config", tiny_config, "--out", ev, *args) == 0
        assert (ev / "report.csv").exists() and any((ev / "plots").iterdir())
        assert run("--out", tmp_path / "ev2", "replay", ev / "run_manifest.json") == 0
        a, b = tree(ev), tree(tmp_path / "ev2")
        b.pop("replay_config.json")
        assert a == b

        tr = tmp_path / "transfer"
        assert run("--config", tiny_config, "--out", tr, "transfer", "--source", run_dir,
                   *[a for p in gear_data for a in ("--target", p)], "--mode", "random", "--mode", "src-s",
                   "--mode", "unsup-rd", "--stride", 8, "--max-windows", 3, "--plots", 0) == 0
        hashes = json.loads((tr / "b_hashes.json").read_text())
        assert hashes and all(v["before"] == v["after"] for v in hashes.values())

        pl = tmp_path / "plot"
        assert run("--config", tiny_config, "--out", pl, "plot", "--data", gear_data[2], "--run", run_dir,
                   "--obs", 3, "--pred", 4, "--count", 2, "--samples", 1) == 0
        assert len(list(pl.rglob("*.svg"))) == 2
        assert run("--out", tmp_path / "sheet", "plot", "--data", gear_data[0]) == 0
        assert list((tmp_path / "sheet").rglob("*.svg"))

    def test_replay_refuses_changed_inputs(self, tmp_path):
        assert run("--out", tmp_path / "d", "synth", "gears", "--loops", 1, "--name", "g") == 0
        csv = tmp_path / "ann.csv"
        csv.write_text("frame,agent_id,x,y\n0,1,10,20\n")
        assert run("--out", tmp_path / "i", "ingest", csv, "--width", 100, "--height", 100) == 0
        csv.write_text("frame,agent_id,x,y\n0,1,11,20\n")
        assert run("--out", tmp_path / "r", "replay", tmp_path / "i" / "run_manifest.json") == 2
