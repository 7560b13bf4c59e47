"""Spatial encoder: a convolutional autoencoder with an MMD prior-matching penalty."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .data import IMAGE_SIZE, ImageFrame


class NumericError(FloatingPointError):
    """Raised when a forward pass produces non-finite values."""


@dataclass
class MmdConfig:
    kernel: str = "gaussian-rbf"
    bandwidth_mode: str = "median-heuristic"  # or "fixed"
    bandwidth: float = 1.0
    weight: float = 0.1
    prior_samples: Optional[int] = None  # defaults to the batch size

    def __post_init__(self):
        if self.kernel != "gaussian-rbf":
            raise ValueError(f"unsupported kernel {self.kernel!r}")
        if self.bandwidth_mode not in ("median-heuristic", "fixed"):
            raise ValueError(f"unknown bandwidth mode {self.bandwidth_mode!r}")
        if self.weight < 0:
            raise ValueError("MMD weight must be non-negative")
        if self.bandwidth_mode == "fixed" and self.bandwidth <= 0:
            raise ValueError("fixed bandwidth must be positive")


@dataclass
class EncoderConfig:
    latent_dim: int = 64
    channels: Tuple[int, ...] = (32, 64, 128, 256)
    kernel_size: int = 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(latent_dim=int(d["latent_dim"]), channels=tuple(d["channels"]),
                   kernel_size=int(d.get("kernel_size", 4)))


class SpatialEncoder(nn.Module):
    """Deterministic conv encoder (64x64x3 -> L) and mirrored deconv decoder with sigmoid output."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        k = cfg.kernel_size
        pad = (k - 2) // 2
        chans = (3,) + tuple(cfg.channels)
        enc = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            enc += [nn.Conv2d(cin, cout, k, stride=2, padding=pad), nn.ReLU()]
        self.encoder_convs = nn.Sequential(*enc)
        self.feat_side = IMAGE_SIZE // 2 ** len(cfg.channels)
        feat = chans[-1] * self.feat_side ** 2
        self.to_latent = nn.Linear(feat, cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, feat)
        dec = []
        rev = tuple(reversed(chans))
        for i, (cin, cout) in enumerate(zip(rev[:-1], rev[1:])):
            dec.append(nn.ConvTranspose2d(cin, cout, k, stride=2, padding=pad))
            dec.append(nn.ReLU() if i < len(rev) - 2 else nn.Sigmoid())
        self.decoder_convs = nn.Sequential(*dec)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    def encode_batch(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, 64, 64) -> (B, L)."""
        feats = self.encoder_convs(images)
        return self.to_latent(feats.flatten(1))

    def decode_batch(self, latents: torch.Tensor) -> torch.Tensor:
        """(B, L) -> (B, 3, 64, 64) in [0, 1]."""
        if latents.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent dimension {latents.shape[-1]} != {self.cfg.latent_dim}")
        feats = self.from_latent(latents).relu()
        feats = feats.view(-1, self.cfg.channels[-1], self.feat_side, self.feat_side)
        return self.decoder_convs(feats)

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        z = self.encode_batch(images)
        return z, self.decode_batch(z)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack ImageFrames or HxWx3 arrays into a (B, 3, 64, 64) tensor."""
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    arrs = [im.pixels if isinstance(im, ImageFrame) else np.asarray(im) for im in images]
    return torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).copy()).to(dtype)


def _checked(x: torch.Tensor, layer: int) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations at layer {layer}")
    return x


@torch.no_grad()
def encode(image: ImageFrame, model: SpatialEncoder) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = _checked(images_to_tensor([image], dtype), 0)
    for i, layer in enumerate(model.encoder_convs, start=1):
        x = _checked(layer(x), i)
    z = _checked(model.to_latent(x.flatten(1)), len(model.encoder_convs) + 1)
    return z[0].double().numpy()


@torch.no_grad()
def decode(latent, model: SpatialEncoder, frame: int = 0) -> ImageFrame:
    z = torch.as_tensor(np.asarray(latent), dtype=next(model.parameters()).dtype)
    if z.ndim != 1 or z.shape[0] != model.latent_dim:
        raise ValueError(f"latent must have dimension {model.latent_dim}, got shape {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise NumericError("non-finite latent input")
    img = _checked(model.decode_batch(z[None]), len(model.decoder_convs))
    return ImageFrame(pixels=img[0].permute(1, 2, 0).double().numpy(), frame=frame)


@torch.no_grad()
def encode_frames(model: SpatialEncoder, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Encode a (T, 64, 64, 3) stack; returns (T, L) float64."""
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(frames), batch_size):
        x = images_to_tensor(frames[i:i + batch_size], dtype)
        out.append(model.encode_batch(x).double())
    if not out:
        return np.zeros((0, model.latent_dim))
    z = torch.cat(out).numpy()
    if not np.isfinite(z).all():
        raise NumericError("non-finite latent produced while encoding frames")
    return z


def _pairwise_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def median_bandwidth(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    pooled = torch.cat([a, b])
    n = len(pooled)
    d2 = _pairwise_sq_dists(pooled, pooled)
    iu = torch.triu_indices(n, n, offset=1)
    if iu.shape[1] == 0:
        return torch.ones((), dtype=a.dtype)
    med = torch.sqrt(torch.median(d2[iu[0], iu[1]]) + 1e-30)
    return torch.where(med > 1e-12, med, torch.ones_like(med))


def mmd_squared(sample_a, sample_b, cfg: MmdConfig = MmdConfig()) -> torch.Tensor:
    """Biased (V-statistic) squared MMD with a Gaussian RBF kernel."""
    a = torch.as_tensor(sample_a)
    b = torch.as_tensor(sample_b)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise ValueError("samples must be non-empty 2-D arrays")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    b = b.to(a.dtype)
    if cfg.bandwidth_mode == "fixed":
        bw = torch.tensor(cfg.bandwidth, dtype=a.dtype)
    else:
        bw = median_bandwidth(a, b)
    scale = 1.0 / (2.0 * bw ** 2)
    kaa = torch.exp(-_pairwise_sq_dists(a, a) * scale).mean()
    kbb = torch.exp(-_pairwise_sq_dists(b, b) * scale).mean()
    kab = torch.exp(-_pairwise_sq_dists(a, b) * scale).mean()
    return kaa + kbb - 2.0 * kab


def prior_sample(n: int, dim: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(n, dim, generator=gen, dtype=torch.float64).to(dtype)


def r_loss(batch, model, cfg: MmdConfig = MmdConfig(), rng_seed: int = 0) -> torch.Tensor:
    """Per-pixel reconstruction MSE plus weighted MMD between codes and a seeded N(0, I) draw."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    images = images_to_tensor(batch, _model_dtype(model))
    z = model.encode_batch(images)
    recon = model.decode_batch(z)
    mse = ((recon - images) ** 2).mean()
    if cfg.weight == 0:
        return mse
    n_prior = cfg.prior_samples or len(z)
    prior = prior_sample(n_prior, z.shape[1], rng_seed, z.dtype)
    return mse + cfg.weight * mmd_squared(z, prior, cfg)


def _model_dtype(model) -> torch.dtype:
    try:
        return next(model.parameters()).dtype
    except (AttributeError, StopIteration):
        return torch.float64
