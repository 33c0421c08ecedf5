"""KL-regularized 3D autoencoder with learnable interpolation at entry and exit.

Data path::

    x (L', W', H') -I1-> (L, W, H) -E-> N(mu, exp(log_var)), 256 x L/8 x W/8 x H/8
    z0 -D-> 256 x L/8 x W/8 x H/8 -U-> (L, W, H) -I2-> (L', W', H')

Tensors are batch-first with a single image channel: (B, 1, X, Y, Z).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import NonFiniteError, ValidationError
from .volumes import Volume3D

LATENT_CHANNELS = 256
DOWNSAMPLE_FACTOR = 8


@dataclass
class AEConfig:
    standardized_shape: tuple = (32, 32, 32)
    base_channels: int = 16
    # channels per resolution level, level 0 = standardized shape, level 3 = latent grid
    channel_mults: tuple = (1, 1, 2, 4)
    attention_levels: tuple = (3,)
    conv_layers_per_module: int = 8
    latent_channels: int = LATENT_CHANNELS
    alpha: float = 1e-5
    # "sum" follows the analytic formula literally; "mean" divides by the number
    # of latent elements so the KL term is commensurate with the voxel-mean MSE.
    kl_reduction: str = "mean"

    def __post_init__(self):
        self.standardized_shape = tuple(int(s) for s in self.standardized_shape)
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        if any(s % DOWNSAMPLE_FACTOR for s in self.standardized_shape):
            raise ValidationError(f"standardized shape {self.standardized_shape} not divisible by 8")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if len(self.channel_mults) != 4:
            raise ValidationError("channel_mults needs one entry per resolution level (4)")
        if self.conv_layers_per_module < 8:
            raise ValidationError("conv_layers_per_module must be >= 8")
        if self.kl_reduction not in ("sum", "mean"):
            raise ValidationError(f"unknown kl_reduction {self.kl_reduction!r}")

    @property
    def latent_shape(self) -> tuple:
        return (self.latent_channels,) + tuple(s // DOWNSAMPLE_FACTOR for s in self.standardized_shape)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        return cls(**d)


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValidationError(f"mu {tuple(self.mu.shape)} and log_var {tuple(self.log_var.shape)} differ")

    @property
    def shape(self):
        return tuple(self.mu.shape)

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


# --------------------------------------------------------------------------
# interpolation


class InterpolationLayer(nn.Module):
    """Trilinear resampling plus a learnable per-axis residual correction.

    The correction is a 3-tap kernel along each axis applied to the resampled
    volume. Kernels start at zero, so at init the layer is exact trilinear
    resampling (and the identity when input and target shapes agree). The
    kernels do not depend on shape, so the layer can target any size.
    """

    def __init__(self, target_shape: Sequence[int], taps: int = 3):
        super().__init__()
        self.target_shape = tuple(int(s) for s in target_shape)
        self.taps = taps
        self.blend_weights = nn.Parameter(torch.zeros(3, taps))

    def forward(self, x: torch.Tensor, size: Optional[Sequence[int]] = None) -> torch.Tensor:
        size = tuple(size) if size is not None else self.target_shape
        if tuple(x.shape[2:]) == size:
            r = x
        else:
            r = F.interpolate(x, size=size, mode="trilinear", align_corners=True)
        c = r.shape[1]
        pad = self.taps // 2
        out = r
        for axis in range(3):
            kshape = [1, 1, 1]
            kshape[axis] = self.taps
            w = self.blend_weights[axis].reshape(1, 1, *kshape).to(r.dtype).repeat(c, 1, 1, 1, 1)
            padding = [0, 0, 0]
            padding[axis] = pad
            out = out + F.conv3d(r, w, padding=tuple(padding), groups=c)
        return out


def interp_resample(v: Volume3D, layer: InterpolationLayer, size=None) -> Volume3D:
    x = torch.as_tensor(np.asarray(v.data), dtype=torch.float32)[None, None]
    with torch.no_grad():
        y = layer(x, size)
    return Volume3D(y[0, 0].numpy())


# --------------------------------------------------------------------------
# network blocks


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class ResConv(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.norm = _norm(c)
        self.conv = nn.Conv3d(c, c, 3, padding=1)

    def forward(self, x):
        return x + self.conv(F.silu(self.norm(x)))


class SelfAttention3D(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.norm = _norm(c)
        self.qkv = nn.Conv3d(c, 3 * c, 1)
        self.proj = nn.Conv3d(c, c, 1)

    def forward(self, x):
        b, c, *sp = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, -1).unbind(1)
        w = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / c ** 0.5, dim=-1)
        h = torch.einsum("bij,bcj->bci", w, v).reshape(b, c, *sp)
        return x + self.proj(h)


def _extra_convs(cfg: AEConfig) -> list:
    """How many residual 3^3 convs each level gets (levels 1..3).

    Each half has a fixed backbone of 4 convs; the remaining budget is spread
    from the coarsest level upward, where convolutions are cheapest.
    """
    extra = cfg.conv_layers_per_module - 4
    per_level = [0, 0, 0]
    i = 0
    while extra > 0:
        per_level[2 - (i % 3)] += 1
        extra -= 1
        i += 1
    return per_level


class Encoder(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        ch = [cfg.base_channels * m for m in cfg.channel_mults]
        extra = _extra_convs(cfg)
        self.conv_in = nn.Conv3d(1, ch[0], 3, padding=1)
        self.levels = nn.ModuleList()
        for lvl in range(3):
            blocks = [nn.Conv3d(ch[lvl], ch[lvl + 1], 2, stride=2)]
            blocks += [ResConv(ch[lvl + 1]) for _ in range(extra[lvl])]
            if lvl + 1 in cfg.attention_levels:
                blocks.append(SelfAttention3D(ch[lvl + 1]))
            self.levels.append(nn.Sequential(*blocks))
        self.norm_out = _norm(ch[3])
        self.to_moments = nn.Conv3d(ch[3], 2 * cfg.latent_channels, 1)

    def forward(self, x):
        h = self.conv_in(x)
        for level in self.levels:
            h = level(h)
        mu, log_var = self.to_moments(F.silu(self.norm_out(h))).chunk(2, dim=1)
        return mu, log_var


class LatentDecoder(nn.Module):
    """D: latent -> 256-channel feature map on the latent grid."""

    def __init__(self, cfg: AEConfig):
        super().__init__()
        c = cfg.base_channels * cfg.channel_mults[3]
        self.conv_in = nn.Conv3d(cfg.latent_channels, c, 3, padding=1)
        n_res = max(2, cfg.conv_layers_per_module - 6)
        blocks = [ResConv(c)]
        if 3 in cfg.attention_levels:
            blocks.append(SelfAttention3D(c))
        blocks += [ResConv(c) for _ in range(n_res - 1)]
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = _norm(c)
        self.conv_out = nn.Conv3d(c, cfg.latent_channels, 3, padding=1)

    def forward(self, z):
        h = self.blocks(self.conv_in(z))
        return self.conv_out(F.silu(self.norm_out(h)))


class Upsampler(nn.Module):
    """U: 256 x L/8 x W/8 x H/8 -> 1 x L x W x H."""

    def __init__(self, cfg: AEConfig):
        super().__init__()
        ch = [cfg.base_channels * m for m in cfg.channel_mults]
        cin = [cfg.latent_channels, ch[2], ch[1]]
        cout = [ch[2], ch[1], ch[0]]
        self.ups = nn.ModuleList(nn.ConvTranspose3d(i, o, 2, stride=2) for i, o in zip(cin, cout))
        self.norms = nn.ModuleList(_norm(o) for o in cout)
        self.conv_out = nn.Conv3d(ch[0], 1, 3, padding=1)

    def forward(self, h):
        for up, norm in zip(self.ups, self.norms):
            h = F.silu(norm(up(h)))
        return self.conv_out(h)


class Autoencoder3D(nn.Module):
    def __init__(self, cfg: AEConfig):
        super().__init__()
        self.cfg = cfg
        self.interp_in = InterpolationLayer(cfg.standardized_shape)
        self.encoder = Encoder(cfg)
        self.decoder = LatentDecoder(cfg)
        self.upsampler = Upsampler(cfg)
        self.interp_out = InterpolationLayer(cfg.standardized_shape)

    def encode(self, x: torch.Tensor) -> GaussianLatent:
        _check_finite(x, "encoder input")
        h = self.interp_in(x, self.cfg.standardized_shape)
        mu, log_var = self.encoder(h)
        return GaussianLatent(mu, log_var)

    def decode(self, z: torch.Tensor, out_shape: Optional[Sequence[int]] = None) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.cfg.latent_shape:
            raise ValidationError(f"latent shape {tuple(z.shape[1:])} != {self.cfg.latent_shape}")
        out_shape = tuple(out_shape) if out_shape is not None else self.cfg.standardized_shape
        h = self.upsampler(self.decoder(z))
        return self.interp_out(h, out_shape)

    def forward(self, x: torch.Tensor, eps: Optional[torch.Tensor] = None):
        g = self.encode(x)
        if eps is None:
            eps = torch.randn_like(g.mu)
        z = sample_latent(g, eps)
        return self.decode(z, x.shape[2:]), g


# --------------------------------------------------------------------------
# functional API


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, Volume3D):
        x = x.data
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=torch.float32)
    if t.ndim == 3:
        t = t[None, None]
    elif t.ndim == 4:
        t = t[:, None]
    return t


def encode(x, params: Autoencoder3D) -> GaussianLatent:
    t = _as_batch(x).to(next(params.parameters()).dtype)
    with torch.no_grad():
        return params.encode(t)


def sample_latent(g: GaussianLatent, eps) -> torch.Tensor:
    eps = torch.as_tensor(eps, dtype=g.mu.dtype)
    if tuple(eps.shape) != tuple(g.mu.shape):
        raise ValidationError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(g.mu.shape)}")
    return g.mu + torch.exp(0.5 * g.log_var) * eps


def decode(z0, params: Autoencoder3D, original_shape) -> Volume3D:
    z = torch.as_tensor(z0, dtype=next(params.parameters()).dtype)
    if z.ndim == 4:
        z = z[None]
    with torch.no_grad():
        out = params.decode(z, original_shape)
    _check_finite(out, "decoded volume")
    return Volume3D(out[0, 0].float().numpy())


def kl_loss(g: GaussianLatent, reduction: str = "sum") -> torch.Tensor:
    """Analytic KL(N(mu, sigma^2) || N(0, 1)).

    ``sum`` sums over every non-batch element and averages over the batch
    (dim 0); ``mean`` additionally divides by the number of latent elements.
    """
    mu, log_var = g.mu, g.log_var
    _check_finite(mu, "latent mean")
    _check_finite(log_var, "latent log-variance")
    per_elem = -0.5 * (1 + log_var - mu.pow(2) - log_var.exp())
    if mu.ndim <= 1:
        total = per_elem.sum()
        n = max(per_elem.numel(), 1)
    else:
        total = per_elem.flatten(1).sum(1).mean()
        n = per_elem[0].numel()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / n
    raise ValidationError(f"unknown reduction {reduction!r}")


def recon_loss(x, x_hat) -> torch.Tensor:
    x = torch.as_tensor(x.data if isinstance(x, Volume3D) else x)
    x_hat = torch.as_tensor(x_hat.data if isinstance(x_hat, Volume3D) else x_hat)
    if x.shape != x_hat.shape:
        raise ValidationError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).mean()


def total_loss(kl, recon, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * kl + (1 - alpha) * recon


def ae_objective(model: Autoencoder3D, x: torch.Tensor, eps: Optional[torch.Tensor] = None):
    """Returns (total, kl, recon) for a batch under the model's config."""
    x_hat, g = model(x, eps)
    kl = kl_loss(g, model.cfg.kl_reduction)
    rec = recon_loss(x, x_hat)
    return total_loss(kl, rec, model.cfg.alpha), kl, rec


# --------------------------------------------------------------------------
# checkpoints


def save_autoencoder(model: Autoencoder3D, path, extra: Optional[dict] = None):
    checkpoint.save(path, "autoencoder", model.cfg.to_dict(), model.state_dict(), extra)


def load_autoencoder(path) -> Autoencoder3D:
    ck = checkpoint.load(path, "autoencoder")
    model = Autoencoder3D(AEConfig.from_dict(ck["config"]))
    model.load_state_dict(ck["params"])
    model.eval()
    return model
