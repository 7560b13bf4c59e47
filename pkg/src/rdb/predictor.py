"""Per-agent local predictor: an LSTM emitting a correlated bivariate Gaussian over the next position."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .data import TrajectoryWindow
from .encoder import NumericError

SIGMA_FLOOR = 1e-6
RHO_MAX = 0.999
LOG_2PI = math.log(2 * math.pi)


class AlignmentError(ValueError):
    pass


class InputConfig(str, Enum):
    S = "s"
    SL = "sl"
    SH = "sh"
    SLH = "slh"

    @property
    def uses_latent(self) -> bool:
        return "l" in self.value

    @property
    def uses_summary(self) -> bool:
        return "h" in self.value

    def input_dim(self, latent_dim: int, summary_dim: int) -> int:
        return 2 + latent_dim * self.uses_latent + summary_dim * self.uses_summary

    def context_dim(self, latent_dim: int, summary_dim: int) -> int:
        return self.input_dim(latent_dim, summary_dim) - 2


@dataclass
class PredictorConfig:
    inputs: str = InputConfig.SLH.value
    latent_dim: int = 64
    summary_dim: int = 256
    hidden_dim: int = 64

    @property
    def input_config(self) -> InputConfig:
        return InputConfig(self.inputs)

    @property
    def context_dim(self) -> int:
        return self.input_config.context_dim(self.latent_dim, self.summary_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        return cls(**{k: d[k] for k in ("inputs", "latent_dim", "summary_dim", "hidden_dim")})


@dataclass
class BivariateGaussian:
    mux: float
    muy: float
    sx: float
    sy: float
    rho: float

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mux, self.muy])

    @property
    def cov(self) -> np.ndarray:
        c = self.rho * self.sx * self.sy
        return np.array([[self.sx ** 2, c], [c, self.sy ** 2]])


class LocalPredictor(nn.Module):
    """LSTM over [s_t, l_t?, h_t?] followed by a linear head to (dx, dy, log sx, log sy, atanh rho).

    The mean is predicted as an offset from the current position.
    """

    def __init__(self, cfg: PredictorConfig = PredictorConfig()):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(cfg.input_config.input_dim(cfg.latent_dim, cfg.summary_dim), cfg.hidden_dim,
                            batch_first=True)
        self.head = nn.Linear(cfg.hidden_dim, 5)

    @property
    def input_config(self) -> InputConfig:
        return self.cfg.input_config

    def zero_state(self, batch: int = 1):
        z = torch.zeros(1, batch, self.cfg.hidden_dim, dtype=self.head.weight.dtype)
        return z, z.clone()

    def forward(self, positions: torch.Tensor, context: Optional[torch.Tensor] = None, state=None):
        """positions (B, T, 2), context (B, T, C) -> (mu, sigma, rho, state) each over (B, T)."""
        x = positions
        if self.input_config is not InputConfig.S:
            if context is None or context.shape[-1] != self.cfg.context_dim:
                got = None if context is None else context.shape[-1]
                raise AlignmentError(f"input config {self.cfg.inputs!r} needs context width "
                                     f"{self.cfg.context_dim}, got {got}")
            x = torch.cat([positions, context.to(positions.dtype)], dim=-1)
        if state is None:
            state = self.zero_state(x.shape[0])
        out, state = self.lstm(x, state)
        raw = self.head(out)
        mu = positions + raw[..., :2]
        sigma = torch.clamp(torch.exp(raw[..., 2:4]), min=SIGMA_FLOOR)
        rho = torch.clamp(torch.tanh(raw[..., 4]), -RHO_MAX, RHO_MAX)
        return mu, sigma, rho, state


def bivariate_nll(target: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """Elementwise -log N(target; mu, [[sx^2, r sx sy], [r sx sy, sy^2]])."""
    dx = (target[..., 0] - mu[..., 0]) / sigma[..., 0]
    dy = (target[..., 1] - mu[..., 1]) / sigma[..., 1]
    one_m = 1.0 - rho ** 2
    z = dx ** 2 + dy ** 2 - 2.0 * rho * dx * dy
    return (LOG_2PI + torch.log(sigma[..., 0]) + torch.log(sigma[..., 1])
            + 0.5 * torch.log(one_m) + z / (2.0 * one_m))


def predict_step(h_prev, s_t, context, model: LocalPredictor):
    """Advance one frame. Returns (new_state, BivariateGaussian over the next position)."""
    dtype = model.head.weight.dtype
    pos = torch.as_tensor(np.asarray(s_t, dtype=np.float64), dtype=dtype).reshape(1, 1, 2)
    ctx = None
    if model.input_config is not InputConfig.S:
        ctx = torch.as_tensor(np.asarray(context, dtype=np.float64), dtype=dtype).reshape(1, 1, -1)
    with torch.no_grad():
        mu, sigma, rho, state = model(pos, ctx, h_prev)
    vals = torch.cat([mu[0, 0], sigma[0, 0], rho[0, :1]])
    if not torch.isfinite(vals).all():
        raise NumericError("non-finite predictor output")
    v = vals.double().tolist()
    return state, BivariateGaussian(v[0], v[1], v[2], v[3], v[4])


def sequence_nll(model: LocalPredictor, positions: torch.Tensor, context: Optional[torch.Tensor],
                 mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Teacher-forced NLL of positions[:, 1:] given the prefix; returns (B, T-1)."""
    ctx = None if context is None else context[:, :-1]
    mu, sigma, rho, _ = model(positions[:, :-1], ctx)
    nll = bivariate_nll(positions[:, 1:], mu, sigma, rho)
    return nll if mask is None else nll * mask


def context_tensor(windows: Sequence[TrajectoryWindow], contexts, cfg: PredictorConfig,
                   dtype=torch.float64) -> Optional[torch.Tensor]:
    """Gather per-frame context vectors for each window.

    ``contexts`` is either a mapping ``frame -> vector`` shared by every agent in the
    scene, or a list with one such mapping per window.
    """
    if cfg.input_config is InputConfig.S:
        return None
    if contexts is None:
        raise AlignmentError(f"input config {cfg.inputs!r} requires contexts")
    per_window = contexts if isinstance(contexts, (list, tuple)) else [contexts] * len(windows)
    if len(per_window) != len(windows):
        raise AlignmentError(f"{len(per_window)} context streams for {len(windows)} windows")
    rows = []
    for w, ctx in zip(windows, per_window):
        seq = []
        for f in w.frames:
            if f not in ctx:
                raise AlignmentError(f"no context for frame {f} (agent {w.agent_id})")
            v = np.asarray(ctx[f], dtype=np.float64)
            if v.shape != (cfg.context_dim,):
                raise AlignmentError(f"context at frame {f} has shape {v.shape}, expected ({cfg.context_dim},)")
            seq.append(v)
        rows.append(seq)
    return torch.as_tensor(np.array(rows), dtype=dtype)


def b_loss(windows: Sequence[TrajectoryWindow], contexts, model: LocalPredictor) -> torch.Tensor:
    """Summed bivariate NLL over every agent and step of a batch of windows."""
    if not windows:
        raise ValueError("empty batch")
    lengths = {len(w.frames) for w in windows}
    if len(lengths) != 1:
        raise AlignmentError("windows in a batch must share a length")
    dtype = model.head.weight.dtype
    pos = torch.as_tensor(np.array([np.vstack([w.obs_xy(), w.pred_xy()]) for w in windows]), dtype=dtype)
    ctx = context_tensor(windows, contexts, model.cfg, dtype)
    loss = sequence_nll(model, pos, ctx).sum()
    if not torch.isfinite(loss):
        raise NumericError("predictor loss is not finite")
    return loss


def sample_position(g: BivariateGaussian, rng: np.random.Generator) -> np.ndarray:
    """Draw via the Cholesky factor of the 2x2 covariance."""
    z = rng.standard_normal(2)
    chol = np.array([[g.sx, 0.0], [g.rho * g.sy, g.sy * math.sqrt(max(1.0 - g.rho ** 2, 0.0))]])
    return g.mean + chol @ z


class ContextProvider(Protocol):
    """Supplies the per-frame (l_t, h_t) context of one agent's rollout."""

    def observed(self, i: int) -> Optional[np.ndarray]:
        ...

    def advance(self, predicted_xy: np.ndarray) -> Optional[np.ndarray]:
        ...


def rollout_agent(obs_xy: np.ndarray, context_provider: Optional[ContextProvider], pred_len: int,
                  model: LocalPredictor, mode: str = "mean", rng: Optional[np.random.Generator] = None
                  ) -> Tuple[np.ndarray, List[BivariateGaussian]]:
    """Warm up on the observed track, then predict ``pred_len`` positions closed-loop.

    ``mode="mean"`` feeds back the predicted mean, ``mode="sample"`` a draw from it.
    """
    obs_xy = np.asarray(obs_xy, dtype=np.float64)
    if len(obs_xy) < 1:
        raise ValueError("need at least one observed position")
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    needs_ctx = model.input_config is not InputConfig.S
    state, g = None, None
    for i, s in enumerate(obs_xy):
        ctx = context_provider.observed(i) if needs_ctx else None
        state, g = predict_step(state, s, ctx, model)
    preds, dists = [], []
    for k in range(pred_len):
        nxt = g.mean if mode == "mean" else sample_position(g, rng)
        preds.append(nxt)
        dists.append(g)
        if k == pred_len - 1:
            break
        ctx = context_provider.advance(nxt) if needs_ctx else None
        state, g = predict_step(state, nxt, ctx, model)
    return np.array(preds), dists
