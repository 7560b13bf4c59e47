import numpy as np
import pytest
import torch

from rdb import checkpoint as ckpt_io
from rdb.checkpoint import Checkpoint, CheckpointError, CompatibilityError
from rdb.dynamics import DynamicsConfig, GlobalDynamics
from rdb.encoder import EncoderConfig, SpatialEncoder
from rdb.predictor import LocalPredictor, PredictorConfig


def _modules(latent=4, hidden=6, b_latent=None, b_summary=None, inputs="slh"):
    torch.manual_seed(0)
    r = Checkpoint("R", SpatialEncoder(EncoderConfig(latent_dim=latent, channels=(4, 4, 4, 4))), 3, {"x": 1})
    d = Checkpoint("D", GlobalDynamics(DynamicsConfig(latent_dim=latent, n_max=2, hidden_dim=hidden, n_components=2)))
    b = Checkpoint("B", LocalPredictor(PredictorConfig(inputs=inputs, latent_dim=b_latent or latent,
                                                       summary_dim=b_summary or hidden, hidden_dim=4)))
    return r, d, b


def test_roundtrip_preserves_everything(tmp_path):
    for ck in _modules():
        digest = ckpt_io.save(ck, tmp_path / f"{ck.kind}.ckpt")
        back = ckpt_io.load(tmp_path / f"{ck.kind}.ckpt", ck.kind)
        assert back.kind == ck.kind and back.seed == ck.seed and back.meta == ck.meta
        assert back.config == ck.config
        assert ckpt_io.params_hash(back.model) == ckpt_io.params_hash(ck.model)
        assert digest == ckpt_io.file_hash(tmp_path / f"{ck.kind}.ckpt")


def test_bytes_are_stable():
    a = _modules()[0]
    b = _modules()[0]
    assert ckpt_io.to_bytes(a) == ckpt_io.to_bytes(b)
    assert ckpt_io.to_bytes(ckpt_io.from_bytes(ckpt_io.to_bytes(a))) == ckpt_io.to_bytes(a)


def test_loaded_model_computes_the_same():
    _, d, _ = _modules()
    back = ckpt_io.from_bytes(ckpt_io.to_bytes(d))
    x, c = torch.randn(1, 3, 4), torch.randn(1, 3, 4)
    with torch.no_grad():
        assert torch.equal(d.model(x, c)[0], back.model(x, c)[0])


def test_wrong_kind(tmp_path):
    r, _, _ = _modules()
    ckpt_io.save(r, tmp_path / "r.ckpt")
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "r.ckpt", "D")


def test_corrupt_and_missing(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "x.ckpt")
    with pytest.raises(FileNotFoundError):
        ckpt_io.load(tmp_path / "missing.ckpt")


def test_compatibility():
    ckpt_io.check_compatible(*_modules())
    with pytest.raises(CompatibilityError):
        ckpt_io.check_compatible(*_modules(b_latent=5))
    with pytest.raises(CompatibilityError):
        ckpt_io.check_compatible(*_modules(b_summary=7))
    r, d, b = _modules()
    with pytest.raises(CompatibilityError):
        ckpt_io.check_compatible(r, None, b)
    r, _, _ = _modules()
    _, d, _ = _modules(latent=5)
    with pytest.raises(CompatibilityError):
        ckpt_io.check_compatible(r, d, None)
    ckpt_io.check_compatible(None, None, _modules(inputs="s")[2])
