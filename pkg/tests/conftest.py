import numpy as np
import pytest
import torch

from rdb.data import TrajectoryDataset
from rdb.dynamics import DynamicsConfig
from rdb.encoder import EncoderConfig
from rdb.training import RunConfig
from rdb.data import WindowConfig

torch.set_num_threads(1)


def make_dataset(rows, name="toy", n_max=4, frame_range=None, width=100, height=100):
    """rows: iterable of (frame, agent_id, x, y) in normalized units."""
    arr = np.array(list(rows), dtype=np.float64).reshape(-1, 4)
    return TrajectoryDataset(name=name, frame_idx=arr[:, 0].astype(int), agent_id=arr[:, 1].astype(int),
                             xy=arr[:, 2:], width_px=width, height_px=height, n_max=n_max,
                             frame_range=frame_range)


@pytest.fixture
def tiny_cfg():
    return tiny_run_config()


def tiny_run_config():
    """A RunConfig small enough to train in a second or two."""
    cfg = RunConfig()
    cfg.encoder = EncoderConfig(latent_dim=4, channels=(4, 8, 8, 8))
    cfg.dynamics = DynamicsConfig(hidden_dim=8, n_max=2, n_components=2)
    cfg.predictor.hidden_dim = 8
    cfg.window = WindowConfig(obs_len=3, pred_len=3, train_len=6)
    for t in (cfg.train_r, cfg.train_d, cfg.train_b):
        t.max_steps = 5
        t.batch_size = 4
    cfg.d_seq_len = 8
    return cfg.sync()


@pytest.fixture(scope="session")
def gear_sets():
    """Two clockwise gear videos and one anticlockwise, one loop each."""
    from rdb.synthetic import gear_suite, gen_gear_task
    return [gen_gear_task(c)[0] for c in gear_suite(seed=0, train_seeds=2, loops=1)]


def grad_setups(seed=0):
    """(name, loss closure, parameters) for the three module losses on small float64 models."""
    from rdb.data import AgentState, TrajectoryWindow
    from rdb.dynamics import GlobalDynamics, d_loss
    from rdb.encoder import MmdConfig, SpatialEncoder, r_loss
    from rdb.predictor import LocalPredictor, PredictorConfig, b_loss

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    r = SpatialEncoder(EncoderConfig(latent_dim=4, channels=(4, 4, 4, 4))).double()
    imgs = torch.tensor(rng.uniform(size=(3, 3, 64, 64)))
    d = GlobalDynamics(DynamicsConfig(latent_dim=3, n_max=2, hidden_dim=6, n_components=4)).double()
    lat, cond = rng.normal(size=(6, 3)), rng.uniform(size=(5, 4))
    b = LocalPredictor(PredictorConfig(inputs="slh", latent_dim=3, summary_dim=6, hidden_dim=6)).double()
    windows, ctx = [], {}
    for aid in range(3):
        xy = rng.uniform(0.2, 0.8, size=(6, 2))
        st = [AgentState(aid, f, float(x), float(y)) for f, (x, y) in enumerate(xy)]
        windows.append(TrajectoryWindow(aid, st[:3], st[3:]))
    ctx = {f: rng.normal(size=9) for f in range(6)}
    return [
        ("r_loss", lambda: r_loss(imgs, r, MmdConfig(weight=1.0), rng_seed=3), list(r.parameters())),
        ("d_loss", lambda: d_loss(lat, cond, d), list(d.parameters())),
        ("b_loss", lambda: b_loss(windows, ctx, b), list(b.parameters())),
    ]
