"""Scene-level context shared by all agents: per-frame latents, conditioning and D summaries."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import TrajectoryDataset, WorldState, build_world_states, preprocess_dataset
from .dynamics import ConditioningMode, GlobalDynamics, MixtureParams, sample_next_latent, step
from .encoder import SpatialEncoder, encode_frames
from .predictor import InputConfig


@dataclass
class SceneEncoding:
    """Everything D and B need about one dataset, indexed by video frame."""

    dataset: TrajectoryDataset
    frames: List[int]
    latents: np.ndarray  # (T, L)
    positions: np.ndarray  # (T, 2 * n_max)
    world: List[WorldState]
    conditioning: str = ConditioningMode.POSITIONS.value
    noise_seed: int = 0
    _row: Dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row = {f: i for i, f in enumerate(self.frames)}

    def row(self, frame: int) -> int:
        return self._row[frame]

    def has(self, frame: int) -> bool:
        return frame in self._row

    def cond_vector(self, frame: int, positions: Optional[np.ndarray] = None) -> np.ndarray:
        """Conditioning for one frame; noise is keyed by (seed, frame) so it never sees positions."""
        mode = ConditioningMode(self.conditioning)
        width = self.positions.shape[1]
        if mode is ConditioningMode.NOISE:
            return np.random.default_rng([self.noise_seed, int(frame)]).standard_normal(width)
        if mode is ConditioningMode.ZEROS:
            return np.zeros(width)
        return self.positions[self.row(frame)] if positions is None else positions

    def cond_matrix(self) -> np.ndarray:
        return np.stack([self.cond_vector(f) for f in self.frames]) if self.frames else self.positions.copy()

    def with_conditioning(self, mode: str, noise_seed: int = 0) -> "SceneEncoding":
        return SceneEncoding(self.dataset, self.frames, self.latents, self.positions, self.world,
                             ConditioningMode(mode).value, noise_seed)


def encode_scene(dataset: TrajectoryDataset, encoder: SpatialEncoder, n_max: Optional[int] = None,
                 conditioning: str = "positions", noise_seed: int = 0,
                 images: Optional[Dict[int, np.ndarray]] = None) -> SceneEncoding:
    world = build_world_states(dataset, n_max)
    frames = [w.frame for w in world]
    if images is None:
        images = preprocess_dataset(dataset, frames)
    stack = np.stack([images[f] for f in frames]) if frames else np.zeros((0, 64, 64, 3), np.float32)
    latents = encode_frames(encoder, stack)
    positions = np.stack([w.positions for w in world]) if world else np.zeros((0, 2 * (n_max or dataset.n_max)))
    return SceneEncoding(dataset, frames, latents, positions, world, conditioning, noise_seed)


def _sample_batch(mix: MixtureParams, tau: float, gen: torch.Generator) -> torch.Tensor:
    """Vectorized temperature sampling for a batch of mixtures (B, K) / (B, K, L)."""
    if tau == 0.0:
        k = mix.logits.argmax(-1)
        return mix.mu[torch.arange(len(k)), k]
    probs = torch.softmax(mix.logits / max(tau, 1e-6), -1)
    k = torch.multinomial(probs, 1, generator=gen)[:, 0]
    idx = torch.arange(len(k))
    eps = torch.randn(mix.mu[idx, k].shape, generator=gen, dtype=mix.mu.dtype)
    return mix.mu[idx, k] + tau ** 0.5 * mix.sigma[idx, k] * eps


@torch.no_grad()
def window_contexts(scene: SceneEncoding, dynamics: Optional[GlobalDynamics], starts: Sequence[int],
                    length: int, inputs: InputConfig, warm: Optional[int] = None, tau: float = 0.0,
                    seed: int = 0) -> np.ndarray:
    """Contexts (n_starts, length, C) for sequences beginning at each start frame.

    D is run from the zero summary at the start frame. For the first ``warm`` frames the
    true latents are fed; afterwards latents are drawn from D at temperature ``tau`` while
    the true conditioning is kept (``warm=None`` means teacher forcing throughout).
    """
    parts = []
    rows = np.array([[scene.row(s) + k for k in range(length)] for s in starts], dtype=np.int64)
    lat = torch.as_tensor(scene.latents[rows])
    if inputs.uses_summary or warm is not None:
        if dynamics is None:
            raise ValueError("summary context requires a dynamics model")
        dtype = dynamics.head.weight.dtype
        cond_all = scene.cond_matrix()
        cond = torch.as_tensor(cond_all[rows], dtype=dtype)
        lat = lat.to(dtype)
        if warm is None or warm >= length:
            summaries, _, _ = dynamics(lat, cond)
        else:
            gen = torch.Generator().manual_seed(int(seed))
            out, _, state = dynamics(lat[:, :warm], cond[:, :warm])
            fed = [lat[:, :warm]]
            hs = [out]
            mix = dynamics.mixture(out[:, -1])
            for k in range(warm, length):
                l_k = _sample_batch(mix, tau, gen)
                fed.append(l_k[:, None])
                o, mix_seq, state = dynamics(l_k[:, None], cond[:, k:k + 1], state)
                hs.append(o)
                mix = MixtureParams(mix_seq.logits[:, 0], mix_seq.mu[:, 0], mix_seq.sigma[:, 0])
            lat = torch.cat(fed, 1)
            summaries = torch.cat(hs, 1)
        if inputs.uses_latent:
            parts.append(lat.double())
        if inputs.uses_summary:
            parts.append(summaries.double())
    elif inputs.uses_latent:
        parts.append(lat.double())
    if not parts:
        return np.zeros((len(starts), length, 0))
    return torch.cat(parts, -1).numpy()


class SceneRollout:
    """Context provider for one agent's closed-loop prediction.

    Observed frames get teacher-forced contexts. Past the observation window D is rolled
    forward at ``tau`` with the agent's own prediction written into its slot of S_t and the
    other agents held at their last observed positions. With ``freeze=True`` the last
    observed context is repeated instead.
    """

    def __init__(self, scene: SceneEncoding, dynamics: Optional[GlobalDynamics], inputs: InputConfig,
                 obs_frames: Sequence[int], agent_id: int, tau: float = 0.5,
                 rng: Optional[np.random.Generator] = None, freeze: bool = False):
        self.scene, self.dynamics, self.inputs = scene, dynamics, inputs
        self.tau, self.freeze = tau, freeze
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.agent_id = agent_id
        self.frames = list(obs_frames)
        self._observed = []
        self.state, self.mix = None, None
        for f in self.frames:
            l = scene.latents[scene.row(f)]
            if dynamics is not None and inputs.uses_summary:
                self.state, self.mix = step(self.state, l, scene.cond_vector(f), dynamics)
            self._observed.append(self._ctx(l))
        last = scene.world[scene.row(self.frames[-1])]
        self.held = last.positions.copy()
        self.slot = last.slot_of(agent_id)
        self.latent = scene.latents[scene.row(self.frames[-1])]
        self.next_frame = self.frames[-1] + 1

    def _ctx(self, latent: np.ndarray) -> np.ndarray:
        parts = []
        if self.inputs.uses_latent:
            parts.append(np.asarray(latent, dtype=np.float64))
        if self.inputs.uses_summary:
            parts.append(self.state[0][0].double().numpy())
        return np.concatenate(parts) if parts else np.zeros(0)

    def observed(self, i: int) -> np.ndarray:
        return self._observed[i]

    def advance(self, predicted_xy: np.ndarray) -> np.ndarray:
        if self.freeze or self.dynamics is None or not self.inputs.uses_summary:
            return self._observed[-1]
        pos = self.held.copy()
        if self.slot is not None:
            pos[2 * self.slot:2 * self.slot + 2] = predicted_xy
        cond = self.scene.cond_vector(self.next_frame, pos)
        self.latent = sample_next_latent(self.mix, self.tau, self.rng)
        self.state, self.mix = step(self.state, self.latent, cond, self.dynamics)
        self.next_frame += 1
        return self._ctx(self.latent)
