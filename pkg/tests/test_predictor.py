import math

import numpy as np
import pytest
import torch

from rdb.data import AgentState, TrajectoryWindow
from rdb.dynamics import GlobalDynamics
from rdb.encoder import SpatialEncoder
from rdb.evaluation import ade
from rdb.predictor import (AlignmentError, BivariateGaussian, InputConfig, LocalPredictor, PredictorConfig,
                           b_loss, bivariate_nll, predict_step, rollout_agent, sample_position, sequence_nll)

LOG_2PI = math.log(2 * math.pi)


def _pred(inputs="s", L=3, H=4, hidden=8, seed=0):
    torch.manual_seed(seed)
    return LocalPredictor(PredictorConfig(inputs=inputs, latent_dim=L, summary_dim=H, hidden_dim=hidden)).double()


def _window(aid, xy, start=0, obs=2):
    states = [AgentState(aid, start + i, float(x), float(y)) for i, (x, y) in enumerate(xy)]
    return TrajectoryWindow(aid, states[:obs], states[obs:])


def _nll(target, mu, sigma, rho):
    t = lambda v: torch.tensor(np.array(v, dtype=float), dtype=torch.float64)
    return bivariate_nll(t(target), t(mu), t(sigma), t(rho)).item()


class TestBivariateNll:
    def test_standard(self):
        assert _nll([0.3, 0.4], [0.3, 0.4], [1.0, 1.0], 0.0) == pytest.approx(LOG_2PI, abs=1e-12)
        assert LOG_2PI == pytest.approx(1.837877, abs=1e-6)

    def test_correlated(self):
        want = LOG_2PI + 0.5 * math.log(0.75)
        assert _nll([0.0, 0.0], [0.0, 0.0], [1.0, 1.0], 0.5) == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(1.694036, abs=1e-6)

    def test_matches_dense_density(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            mu, t = rng.normal(size=2), rng.normal(size=2)
            s, r = np.exp(rng.normal(scale=0.3, size=2)), rng.uniform(-0.9, 0.9)
            cov = np.array([[s[0] ** 2, r * s[0] * s[1]], [r * s[0] * s[1], s[1] ** 2]])
            d = t - mu
            dense = 0.5 * d @ np.linalg.solve(cov, d) + 0.5 * math.log(np.linalg.det(cov)) + LOG_2PI
            assert _nll(t, mu, s, r) == pytest.approx(dense, abs=1e-10)

    def test_xy_exchange_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            mu, t = rng.normal(size=2), rng.normal(size=2)
            s, r = np.exp(rng.normal(size=2)), rng.uniform(-0.9, 0.9)
            assert _nll(t, mu, s, r) == pytest.approx(_nll(t[::-1], mu[::-1], s[::-1], r), abs=1e-12)


class TestPredictStep:
    def test_invariants_under_random_parameters(self):
        s, ctx = np.array([0.4, 0.6]), np.linspace(-1, 1, 7)
        for seed in range(1000):
            m = _pred("slh", seed=seed)
            with torch.no_grad():
                for p in m.parameters():
                    p.mul_(5.0)
            _, g = predict_step(None, s, ctx, m)
            assert g.sx >= 1e-6 and g.sy >= 1e-6 and abs(g.rho) <= 0.999
            assert np.all(np.linalg.eigvalsh(g.cov) > 0)

    def test_deterministic(self):
        m = _pred("slh")
        _, a = predict_step(None, [0.1, 0.2], np.ones(7), m)
        _, b = predict_step(None, [0.1, 0.2], np.ones(7), m)
        assert a == b

    def test_s_ignores_context(self):
        m = _pred("s")
        _, a = predict_step(None, [0.1, 0.2], np.ones(7), m)
        _, b = predict_step(None, [0.1, 0.2], -np.ones(7), m)
        assert a == b

    @pytest.mark.parametrize("inputs,width", [("s", 2), ("sl", 5), ("sh", 6), ("slh", 9)])
    def test_input_width(self, inputs, width):
        assert _pred(inputs).lstm.input_size == width

    def test_wrong_context_width(self):
        with pytest.raises(AlignmentError):
            predict_step(None, [0.1, 0.2], np.ones(3), _pred("slh"))


class TestBLoss:
    def test_batch_equals_sum_of_agents(self):
        m = _pred("s")
        rng = np.random.default_rng(0)
        ws = [_window(a, rng.uniform(size=(6, 2))) for a in range(5)]
        total = b_loss(ws, None, m).item()
        assert total == pytest.approx(sum(b_loss([w], None, m).item() for w in ws), abs=1e-9)

    def test_context_alignment(self):
        m = _pred("sl", L=3)
        w = _window(1, np.full((4, 2), 0.5))
        ctx = {f: np.zeros(3) for f in range(4)}
        assert np.isfinite(b_loss([w], ctx, m).item())
        del ctx[2]
        with pytest.raises(AlignmentError):
            b_loss([w], ctx, m)
        with pytest.raises(AlignmentError):
            b_loss([w], None, m)

    def test_correlation_helps_on_diagonal_motion(self):
        # steps along the diagonal with random lengths: x and y residuals are perfectly correlated
        rng = np.random.default_rng(0)
        tracks = []
        for _ in range(32):
            steps = rng.normal(0.01, 0.01, size=9)
            xy = 0.5 + np.cumsum(np.stack([steps, steps], 1), 0)
            tracks.append(np.vstack([[0.5, 0.5], xy]))
        pos = torch.tensor(np.array(tracks))

        def fit(free_rho):
            m = _pred("s", seed=0)
            opt = torch.optim.Adam(m.parameters(), 3e-3)
            for _ in range(500):
                opt.zero_grad()
                if free_rho:
                    loss = sequence_nll(m, pos, None).mean()
                else:
                    mu, sigma, _, _ = m(pos[:, :-1])
                    loss = bivariate_nll(pos[:, 1:], mu, sigma, torch.zeros_like(mu[..., 0])).mean()
                loss.backward()
                opt.step()
            return loss.item()

        assert fit(True) < fit(False)


class TestSampling:
    def test_degenerate_covariance(self):
        g = BivariateGaussian(0.3, 0.7, 1e-6, 1e-6, 0.0)
        np.testing.assert_allclose(sample_position(g, np.random.default_rng(0)), [0.3, 0.7], atol=1e-4)

    def test_correlation(self):
        g = BivariateGaussian(0.0, 0.0, 1.0, 2.0, 0.8)
        rng = np.random.default_rng(0)
        draws = np.array([sample_position(g, rng) for _ in range(10000)])
        assert abs(np.corrcoef(draws.T)[0, 1] - 0.8) < 0.03

    def test_zero_correlation(self):
        g = BivariateGaussian(0.0, 0.0, 1.0, 1.0, 0.0)
        rng = np.random.default_rng(1)
        draws = np.array([sample_position(g, rng) for _ in range(10000)])
        assert abs(np.cov(draws.T)[0, 1]) < 0.02


class TestRollout:
    def test_pred_len_one(self):
        m = _pred("s")
        obs = np.array([[0.1, 0.1], [0.2, 0.2]])
        pred, dists = rollout_agent(obs, None, 1, m)
        state, g = None, None
        for s in obs:
            state, g = predict_step(state, s, None, m)
        assert pred.shape == (1, 2) and np.array_equal(pred[0], g.mean)

    def test_mean_mode_deterministic(self):
        m = _pred("s")
        obs = np.array([[0.1, 0.1], [0.2, 0.2]])
        a, _ = rollout_agent(obs, None, 8, m)
        b, _ = rollout_agent(obs, None, 8, m)
        assert np.array_equal(a, b)

    def test_sample_mode_seeded(self):
        m = _pred("s")
        obs = np.array([[0.1, 0.1], [0.2, 0.2]])
        a, _ = rollout_agent(obs, None, 8, m, "sample", np.random.default_rng(5))
        b, _ = rollout_agent(obs, None, 8, m, "sample", np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_context_provider_protocol(self):
        m = _pred("sl", L=3)
        calls = []

        class Provider:
            def observed(self, i):
                calls.append(("obs", i))
                return np.zeros(3)

            def advance(self, xy):
                calls.append(("adv", tuple(np.round(xy, 6))))
                return np.zeros(3)

        pred, _ = rollout_agent(np.array([[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]]), Provider(), 3, m)
        assert [c[0] for c in calls] == ["obs"] * 3 + ["adv"] * 2
        assert calls[3][1] == tuple(np.round(pred[0], 6))

    def test_learns_constant_velocity(self):
        rng = np.random.default_rng(0)

        def track():
            p0, v = rng.uniform(0.3, 0.5, 2), rng.uniform(-0.02, 0.02, 2)
            return p0 + v * np.arange(12)[:, None]

        m = _pred("s", hidden=16)
        opt = torch.optim.Adam(m.parameters(), 3e-3)
        for _ in range(1500):
            pos = torch.tensor(np.array([track() for _ in range(64)]))
            opt.zero_grad()
            sequence_nll(m, pos, None).mean().backward()
            opt.step()
        model_err, still_err = [], []
        for _ in range(50):
            xy = track()
            pred, _ = rollout_agent(xy[:4], None, 8, m)
            model_err.append(ade(pred, xy[4:]))
            still_err.append(ade(np.repeat(xy[3:4], 8, 0), xy[4:]))
        assert np.mean(model_err) < 0.75 * np.mean(still_err)

    def test_validation(self):
        m = _pred("s")
        with pytest.raises(ValueError):
            rollout_agent(np.zeros((0, 2)), None, 3, m)
        with pytest.raises(ValueError):
            rollout_agent(np.zeros((2, 2)), None, 3, m, "sample")


def test_default_capacity_split():
    count = lambda m: sum(p.numel() for p in m.parameters())
    b = count(LocalPredictor())
    rd = count(SpatialEncoder()) + count(GlobalDynamics())
    assert b < 0.05 * rd
