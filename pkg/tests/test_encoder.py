import math

import numpy as np
import pytest
import torch

from rdb.data import ImageFrame
from rdb.encoder import (EncoderConfig, MmdConfig, NumericError, SpatialEncoder, decode, encode, images_to_tensor,
                         mmd_squared, prior_sample, r_loss)

SMALL = EncoderConfig(latent_dim=8, channels=(4, 8, 8, 8))


def _frame(value=0.5, seed=None):
    if seed is None:
        return ImageFrame(np.full((64, 64, 3), value))
    return ImageFrame(np.random.default_rng(seed).uniform(0, 1, (64, 64, 3)))


def _gear_frames(n):
    from rdb.data import preprocess_frame
    from rdb.synthetic import GearTaskConfig, gen_gear_task
    _, frames = gen_gear_task(GearTaskConfig(loops=1, seed=0))
    keys = sorted(frames)[::max(1, len(frames) // n)][:n]
    return [preprocess_frame(frames[k]) for k in keys]


def _mmd_loop(a, b, bw):
    """Scalar-loop V-statistic used as an independent oracle."""
    def k(x, y):
        return math.exp(-sum((xi - yi) ** 2 for xi, yi in zip(x, y)) / (2 * bw * bw))

    def mean_k(p, q):
        return sum(k(x, y) for x in p for y in q) / (len(p) * len(q))

    return mean_k(a, a) + mean_k(b, b) - 2 * mean_k(a, b)


class TestEncodeDecode:
    def test_shape_and_finite(self):
        torch.manual_seed(0)
        z = encode(_frame(seed=1), SpatialEncoder(SMALL))
        assert z.shape == (8,) and np.isfinite(z).all()

    def test_identical_images_identical_latents(self):
        torch.manual_seed(0)
        m = SpatialEncoder(SMALL)
        assert np.array_equal(encode(_frame(seed=3), m), encode(_frame(seed=3), m))

    def test_default_architecture(self):
        m = SpatialEncoder()
        assert m.latent_dim == 64
        assert [c.out_channels for c in m.encoder_convs if isinstance(c, torch.nn.Conv2d)] == [32, 64, 128, 256]

    def test_zero_latent_decodes_to_valid_image(self):
        torch.manual_seed(0)
        img = decode(np.zeros(8), SpatialEncoder(SMALL))
        assert img.pixels.shape == (64, 64, 3)
        assert 0.0 <= img.pixels.min() and img.pixels.max() <= 1.0

    def test_nan_latent(self):
        with pytest.raises(NumericError):
            decode(np.array([np.nan] + [0.0] * 7), SpatialEncoder(SMALL))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            decode(np.zeros(5), SpatialEncoder(SMALL))

    def test_nonfinite_activation_names_layer(self):
        m = SpatialEncoder(SMALL)
        with torch.no_grad():
            m.encoder_convs[2].weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericError, match="layer 3"):
            encode(_frame(seed=0), m)

    def test_black_and_white_separate_after_training(self):
        torch.manual_seed(0)
        m = SpatialEncoder(SMALL)
        batch = [_frame(0.0), _frame(1.0)]
        opt = torch.optim.Adam(m.parameters(), 1e-3)
        for step in range(200):
            opt.zero_grad()
            r_loss(batch, m, MmdConfig(weight=0.1), rng_seed=step).backward()
            opt.step()
        assert np.linalg.norm(encode(batch[0], m) - encode(batch[1], m)) > 0


class TestMmd:
    def test_identical_sets_are_exactly_zero(self):
        a = torch.randn(50, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        assert mmd_squared(a, a.clone()).item() == 0.0

    def test_single_points(self):
        assert mmd_squared(torch.ones(1, 3), torch.ones(1, 3)).item() == 0.0

    def test_symmetry(self):
        g = torch.Generator().manual_seed(1)
        a = torch.randn(40, 3, generator=g, dtype=torch.float64)
        b = torch.randn(30, 3, generator=g, dtype=torch.float64) + 0.5
        assert abs(mmd_squared(a, b).item() - mmd_squared(b, a).item()) < 1e-12

    def test_shifted_distribution_scores_higher(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((500, 2))
        far = rng.standard_normal((500, 2)) + 3.0
        near = rng.standard_normal((500, 2))
        cfg = MmdConfig(bandwidth_mode="fixed", bandwidth=1.0)
        m_far = mmd_squared(torch.from_numpy(a), torch.from_numpy(far), cfg).item()
        m_near = mmd_squared(torch.from_numpy(a), torch.from_numpy(near), cfg).item()
        assert m_far > m_near
        # scalar-loop oracle on a subsample
        sa, sf, sn = a[:60].tolist(), far[:60].tolist(), near[:60].tolist()
        assert mmd_squared(torch.tensor(sa, dtype=torch.float64), torch.tensor(sf, dtype=torch.float64),
                           cfg).item() == pytest.approx(_mmd_loop(sa, sf, 1.0), abs=1e-12)
        assert mmd_squared(torch.tensor(sa, dtype=torch.float64), torch.tensor(sn, dtype=torch.float64),
                           cfg).item() == pytest.approx(_mmd_loop(sa, sn, 1.0), abs=1e-12)

    def test_median_heuristic_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((7, 3)), rng.standard_normal((9, 3)) + 1
        pooled = np.vstack([a, b])
        d = [np.linalg.norm(pooled[i] - pooled[j]) ** 2 for i in range(16) for j in range(i + 1, 16)]
        bw = math.sqrt(float(torch.median(torch.tensor(d))))
        got = mmd_squared(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert got == pytest.approx(_mmd_loop(a.tolist(), b.tolist(), bw), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mmd_squared(torch.zeros(3, 2), torch.zeros(3, 4))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MmdConfig(weight=-1)
        with pytest.raises(ValueError):
            MmdConfig(bandwidth_mode="fixed", bandwidth=0)


class _IdentityStub:
    """Perfect reconstruction with codes drawn from the prior."""

    def __init__(self, n, dim, seed):
        self.z = prior_sample(n, dim, seed, torch.float64)

    def encode_batch(self, images):
        return self.z[:len(images)]

    def decode_batch(self, z):
        return self._images

    def bind(self, images):
        self._images = images
        return self


class TestRLoss:
    def test_stub_oracle(self):
        imgs = [_frame(seed=i) for i in range(16)]
        cfg = MmdConfig(weight=10.0)
        stub = _IdentityStub(16, 4, seed=99).bind(images_to_tensor(imgs, torch.float64))
        got = r_loss(imgs, stub, cfg, rng_seed=5).item()
        want = 10.0 * mmd_squared(stub.z, prior_sample(16, 4, 5, torch.float64), cfg).item()
        assert got == pytest.approx(want, abs=1e-12)
        assert got > 0

    def test_stub_loss_shrinks_with_batch_size(self):
        cfg = MmdConfig(weight=10.0)

        def avg(n):
            vals = []
            for s in range(20):
                imgs = images_to_tensor([_frame(0.5)] * n, torch.float64)
                stub = _IdentityStub(n, 4, seed=1000 + s).bind(imgs)
                vals.append(r_loss(imgs, stub, cfg, rng_seed=s).item())
            return np.mean(vals)

        assert avg(64) < avg(8)

    def test_zero_weight_is_pure_mse(self):
        torch.manual_seed(0)
        m = SpatialEncoder(SMALL).double()
        imgs = [_frame(seed=i) for i in range(3)]
        x = images_to_tensor(imgs, torch.float64)
        with torch.no_grad():
            mse = ((m.decode_batch(m.encode_batch(x)) - x) ** 2).mean().item()
        assert r_loss(imgs, m, MmdConfig(weight=0.0)).item() == pytest.approx(mse, abs=1e-15)

    def test_nonnegative_and_seeded(self):
        torch.manual_seed(0)
        m = SpatialEncoder(SMALL)
        imgs = [_frame(seed=i) for i in range(4)]
        a = r_loss(imgs, m, MmdConfig(weight=10.0), rng_seed=3).item()
        b = r_loss(imgs, m, MmdConfig(weight=10.0), rng_seed=3).item()
        assert a >= 0 and a == b

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            r_loss([], SpatialEncoder(SMALL))

    def test_moving_average_decreases(self):
        torch.manual_seed(0)
        m = SpatialEncoder(SMALL)
        imgs = _gear_frames(8)
        opt = torch.optim.Adam(m.parameters(), 1e-3)
        hist = []
        for step in range(100):
            opt.zero_grad()
            loss = r_loss(imgs, m, MmdConfig(weight=0.1), rng_seed=step)
            loss.backward()
            opt.step()
            hist.append(loss.item())
        ma = np.array(hist).reshape(10, 10).mean(1)
        assert np.all(np.diff(ma) < 0)
