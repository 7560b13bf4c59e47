"""Global scene dynamics: an LSTM with a diagonal Gaussian mixture head over the next latent."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .encoder import NumericError

SIGMA_FLOOR = 1e-6
TAU_EPS = 1e-6
LOG_2PI = math.log(2 * math.pi)


class ConditioningMode(str, Enum):
    POSITIONS = "positions"
    NOISE = "noise"
    ZEROS = "zeros"


@dataclass
class DynamicsConfig:
    latent_dim: int = 64
    n_max: int = 16
    hidden_dim: int = 256
    n_components: int = 5
    conditioning: str = ConditioningMode.POSITIONS.value

    @property
    def cond_dim(self) -> int:
        return 2 * self.n_max

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsConfig":
        return cls(**{k: d[k] for k in ("latent_dim", "n_max", "hidden_dim", "n_components", "conditioning")})


@dataclass
class MixtureParams:
    logits: torch.Tensor  # (..., K)
    mu: torch.Tensor  # (..., K, L)
    sigma: torch.Tensor  # (..., K, L)

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    def index(self, i) -> "MixtureParams":
        return MixtureParams(self.logits[i], self.mu[i], self.sigma[i])


# LSTM state: (h, c), each (batch, H)
State = Tuple[torch.Tensor, torch.Tensor]


class GlobalDynamics(nn.Module):
    def __init__(self, cfg: DynamicsConfig = DynamicsConfig()):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(cfg.latent_dim + cfg.cond_dim, cfg.hidden_dim, batch_first=True)
        self.head = nn.Linear(cfg.hidden_dim, cfg.n_components * (1 + 2 * cfg.latent_dim))

    def zero_state(self, batch: int = 1) -> State:
        dtype = self.head.weight.dtype
        z = torch.zeros(batch, self.cfg.hidden_dim, dtype=dtype)
        return z, z.clone()

    def mixture(self, hidden: torch.Tensor) -> MixtureParams:
        raw = self.head(hidden)
        K, L = self.cfg.n_components, self.cfg.latent_dim
        logits = raw[..., :K]
        mu = raw[..., K:K + K * L].reshape(*raw.shape[:-1], K, L)
        log_sigma = raw[..., K + K * L:].reshape(*raw.shape[:-1], K, L)
        sigma = torch.clamp(torch.exp(log_sigma), min=SIGMA_FLOOR)
        return MixtureParams(logits, mu, sigma)

    def forward(self, latents: torch.Tensor, cond: torch.Tensor,
                state: Optional[State] = None) -> Tuple[torch.Tensor, MixtureParams, State]:
        """Teacher-forced pass. latents (B, T, L), cond (B, T, C) -> summaries (B, T, H)."""
        x = torch.cat([latents, cond.to(latents.dtype)], dim=-1)
        if state is None:
            state = self.zero_state(x.shape[0])
        out, (h, c) = self.lstm(x, (state[0][None], state[1][None]))
        return out, self.mixture(out), (h[0], c[0])


def step(h_prev: Optional[State], l_t, s_t, model: GlobalDynamics, step_index: int = 0
         ) -> Tuple[State, MixtureParams]:
    """One recurrent update from the previous state; ``h_prev=None`` means the zero summary."""
    dtype = model.head.weight.dtype
    l = torch.as_tensor(np.asarray(l_t) if not isinstance(l_t, torch.Tensor) else l_t, dtype=dtype)
    s = torch.as_tensor(np.asarray(s_t) if not isinstance(s_t, torch.Tensor) else s_t, dtype=dtype)
    if l.shape[-1] != model.cfg.latent_dim or s.shape[-1] != model.cfg.cond_dim:
        raise ValueError(f"expected latent {model.cfg.latent_dim} and conditioning {model.cfg.cond_dim} dims, "
                         f"got {l.shape[-1]} and {s.shape[-1]}")
    batched = l.ndim == 2
    if not batched:
        l, s = l[None], s[None]
    state = model.zero_state(l.shape[0]) if h_prev is None else h_prev
    with torch.no_grad():
        _, mix, new_state = model(l[:, None], s[:, None], state)
    if not (torch.isfinite(new_state[0]).all() and torch.isfinite(new_state[1]).all()):
        raise NumericError(f"non-finite dynamics state at step {step_index}")
    mix = MixtureParams(mix.logits[:, 0], mix.mu[:, 0], mix.sigma[:, 0])
    if not batched:
        mix = mix.index(0)
    return new_state, mix


def mixture_log_prob(mix: MixtureParams, target: torch.Tensor) -> torch.Tensor:
    """log sum_k w_k N(target; mu_k, diag sigma_k^2), via log-sum-exp. target (..., L)."""
    z = (target.unsqueeze(-2) - mix.mu) / mix.sigma
    comp = -0.5 * (z ** 2).sum(-1) - torch.log(mix.sigma).sum(-1) - 0.5 * target.shape[-1] * LOG_2PI
    return torch.logsumexp(torch.log_softmax(mix.logits, dim=-1) + comp, dim=-1)


def d_nll(model: GlobalDynamics, latents: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Per-step NLL (B, T) of l_{t+1} given the prefix; latents (B, T+1, L), cond (B, T, C)."""
    _, mix, _ = model(latents[:, :-1], cond)
    return -mixture_log_prob(mix, latents[:, 1:])


def d_loss(latent_sequence, conditioning_sequence, model: GlobalDynamics) -> torch.Tensor:
    """Summed mixture NLL over a single sequence l_1..l_{T+1} conditioned on c_1..c_T."""
    dtype = model.head.weight.dtype
    lat = torch.as_tensor(latent_sequence, dtype=dtype)
    cond = torch.as_tensor(conditioning_sequence, dtype=dtype)
    if lat.ndim != 2 or lat.shape[0] < 2:
        raise ValueError("latent sequence must have at least two steps")
    if cond.shape[0] != lat.shape[0] - 1:
        raise ValueError(f"need {lat.shape[0] - 1} conditioning vectors, got {cond.shape[0]}")
    loss = d_nll(model, lat[None], cond[None]).sum()
    if not torch.isfinite(loss):
        raise NumericError("dynamics loss is not finite")
    return loss


def sample_next_latent(mix: MixtureParams, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Temperature-controlled draw: logits scaled by 1/tau, variances by tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("temperature must lie in [0, 1]")
    logits = mix.logits.detach().double().numpy()
    mu = mix.mu.detach().double().numpy()
    sigma = mix.sigma.detach().double().numpy()
    if tau == 0.0:
        return mu[int(np.argmax(logits))].copy()
    scaled = logits / max(tau, TAU_EPS)
    w = np.exp(scaled - scaled.max())
    w /= w.sum()
    k = rng.choice(len(w), p=w)
    return mu[k] + math.sqrt(tau) * sigma[k] * rng.standard_normal(mu.shape[-1])


def conditioning_sequence(mode: Union[str, ConditioningMode], positions: np.ndarray,
                          noise_seed: int = 0) -> np.ndarray:
    """Conditioning vectors for a (T, 2*N_max) stream of world-state positions."""
    mode = ConditioningMode(mode)
    positions = np.asarray(positions, dtype=np.float64)
    if mode is ConditioningMode.POSITIONS:
        return positions.copy()
    if mode is ConditioningMode.ZEROS:
        return np.zeros_like(positions)
    return np.random.default_rng(noise_seed).standard_normal(positions.shape)


Conditioner = Union[np.ndarray, Callable[[int, np.ndarray], np.ndarray]]


def rollout_latents(h_0: Optional[State], l_start, conditioning: Conditioner, steps: int, tau: float,
                    model: GlobalDynamics, rng: np.random.Generator
                    ) -> List[Tuple[State, np.ndarray]]:
    """Closed-loop rollout feeding each sampled latent back in.

    ``conditioning`` is either a (steps, C) array or a callable ``(i, l_i) -> c_i``.
    Returns ``[(state_after_step_i, sampled_latent_i+1), ...]``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    state, l = h_0, np.asarray(l_start, dtype=np.float64)
    out = []
    for i in range(steps):
        c = conditioning(i, l) if callable(conditioning) else conditioning[i]
        state, mix = step(state, l, c, model, step_index=i)
        l = sample_next_latent(mix.index(0) if mix.logits.ndim > 1 else mix, tau, rng)
        out.append((state, l))
    return out


def summary_of(state: Optional[State]) -> np.ndarray:
    if state is None:
        raise ValueError("no state")
    return state[0][0].double().numpy()
