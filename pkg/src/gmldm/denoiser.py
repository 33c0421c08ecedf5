"""Hybrid ViT/CNN noise predictor.

Latent patches pass through a 12-layer self-attention encoder; a decoder then
fuses condition features (a small CNN pyramid over the K x K connectivity
matrix) via cross-attention, and two parallel MLP heads emit the eps estimate.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .diffusion import DiffusionConfig, make_schedule
from .errors import NonFiniteError, ValidationError

N_ENCODER_LAYERS = 12


@dataclass
class DenoiserConfig:
    latent_shape: tuple = (256, 4, 4, 4)
    patch_size: int = 2
    token_dim: int = 128
    n_encoder_layers: int = N_ENCODER_LAYERS
    n_decoder_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 256
    cond_size: int = 53
    cond_channels: tuple = (16, 32)
    # width of condition tokens; cross-attention maps them up to token_dim
    cond_dim: int = 32
    n_null_tokens: int = 4
    n_mlp_heads: int = 2
    dropout: float = 0.0
    T: int = 50

    def __post_init__(self):
        self.latent_shape = tuple(int(s) for s in self.latent_shape)
        self.cond_channels = tuple(int(c) for c in self.cond_channels)
        if len(self.latent_shape) != 4:
            raise ValidationError("latent_shape must be (C, X, Y, Z)")
        if any(s % self.patch_size for s in self.latent_shape[1:]):
            raise ValidationError(f"latent dims {self.latent_shape[1:]} not divisible by patch {self.patch_size}")
        if self.token_dim % self.n_heads:
            raise ValidationError("token_dim must be divisible by n_heads")
        if self.n_encoder_layers != N_ENCODER_LAYERS:
            raise ValidationError(f"the encoder has exactly {N_ENCODER_LAYERS} layers")
        if not self.cond_channels:
            raise ValidationError("need at least one condition scale")

    @property
    def n_tokens(self) -> int:
        return int(np.prod([s // self.patch_size for s in self.latent_shape[1:]]))

    @property
    def patch_dim(self) -> int:
        return self.latent_shape[0] * self.patch_size ** 3

    def cond_token_counts(self) -> list:
        counts, size = [], self.cond_size
        for _ in self.cond_channels:
            size = math.ceil(size / 2)
            counts.append(size * size)
        return counts

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------------------
# token plumbing


def patchify(z: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, X, Y, Z) -> (B, n_tokens, C * p^3), tokens in row-major grid order."""
    b, c, *sp = z.shape
    p = patch_size
    if any(s % p for s in sp):
        raise ValidationError(f"latent dims {tuple(sp)} not divisible by patch size {p}")
    gx, gy, gz = (s // p for s in sp)
    t = z.reshape(b, c, gx, p, gy, p, gz, p)
    t = t.permute(0, 2, 4, 6, 1, 3, 5, 7)
    return t.reshape(b, gx * gy * gz, c * p ** 3)


def unpatchify(tokens: torch.Tensor, latent_shape: Sequence[int], patch_size: int) -> torch.Tensor:
    c, *sp = latent_shape
    p = patch_size
    if any(s % p for s in sp):
        raise ValidationError(f"latent dims {tuple(sp)} not divisible by patch size {p}")
    gx, gy, gz = (s // p for s in sp)
    b = tokens.shape[0]
    if tokens.shape[1:] != (gx * gy * gz, c * p ** 3):
        raise ValidationError(f"token shape {tuple(tokens.shape)} does not match latent {tuple(latent_shape)}")
    t = tokens.reshape(b, gx, gy, gz, c, p, p, p)
    t = t.permute(0, 4, 1, 5, 2, 6, 3, 7)
    return t.reshape(b, c, *sp)


def timestep_embed(t, dim: int, T: Optional[int] = None, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding; rows are [sin(t w_i), cos(t w_i)]."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    upper = T if T is not None else max_period
    if t.min() < 1 or t.max() > upper:
        raise ValidationError(f"timestep out of range [1, {upper}]")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.float()


# --------------------------------------------------------------------------
# attention


def attention_weights(Q: torch.Tensor, K: torch.Tensor, d_k: Optional[int] = None) -> torch.Tensor:
    if Q.shape[-1] != K.shape[-1]:
        raise ValidationError(f"query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    d_k = d_k if d_k is not None else Q.shape[-1]
    return torch.softmax(Q @ K.transpose(-1, -2) / math.sqrt(d_k), dim=-1)


def cross_attention(Q: torch.Tensor, K_cond: torch.Tensor, V_cond: torch.Tensor, d_k: Optional[int] = None):
    """softmax(Q K^T / sqrt(d_k)) V over the last two dims."""
    if K_cond.shape[-2] != V_cond.shape[-2]:
        raise ValidationError(f"{K_cond.shape[-2]} keys but {V_cond.shape[-2]} values")
    return attention_weights(Q, K_cond, d_k) @ V_cond


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(kv_dim, dim)
        self.to_v = nn.Linear(kv_dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None):
        if context is not None:
            return self._cross(x, context)
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(x)), self._split(self.to_v(x))
        h = cross_attention(q, k, v, self.head_dim)
        b, _, n, _ = h.shape
        return self.to_out(h.transpose(1, 2).reshape(b, n, -1))

    def explicit_cross(self, x, context):
        """Reference form that materializes per-head keys and values."""
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(context)), self._split(self.to_v(context))
        h = cross_attention(q, k, v, self.head_dim)
        b, _, n, _ = h.shape
        return self.to_out(h.transpose(1, 2).reshape(b, n, -1))

    def _cross(self, x, context):
        # Same result as explicit_cross without building the (m x dim) key/value
        # tensors: W_k folds into the query, the key bias is constant per softmax
        # row, and W_v applies after averaging since attention rows sum to 1.
        b, n, _ = x.shape
        hd, nh = self.head_dim, self.n_heads
        kv = context.shape[-1]
        q = self._split(self.to_q(x))
        wk = self.to_k.weight.reshape(nh, hd, kv)
        q_ctx = torch.einsum("bhnd,hdk->bhnk", q, wk).reshape(b, nh * n, kv)
        pooled = cross_attention(q_ctx, context, context, hd).reshape(b, nh, n, kv)
        wv = self.to_v.weight.reshape(nh, hd, kv)
        h = torch.einsum("bhnk,hdk->bnhd", pooled, wv) + self.to_v.bias.reshape(nh, hd)
        return self.to_out(h.reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, dim, hidden, dropout=0.0):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.token_dim
        self.norm1, self.norm2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.n_heads)
        self.ffn = FeedForward(d, cfg.ffn_dim, cfg.dropout)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.token_dim
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.n_heads)
        self.cross_attn = MultiHeadAttention(d, cfg.n_heads, kv_dim=cfg.cond_dim)
        self.ffn = FeedForward(d, cfg.ffn_dim, cfg.dropout)

    def forward(self, x, cond_tokens):
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), cond_tokens)
        return x + self.ffn(self.norm3(x))


class ConditionCNN(nn.Module):
    """Stride-2 conv pyramid over the K x K matrix; every scale becomes a token set.

    Positions are factorized (row embedding + column embedding) so that all
    tokens from one band of matrix rows share a code cross-attention can select.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        chans = (1,) + cfg.cond_channels
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(len(cfg.cond_channels))
        )
        self.proj = nn.ModuleList(nn.Linear(c, cfg.cond_dim) for c in cfg.cond_channels)
        sides = [math.isqrt(n) for n in cfg.cond_token_counts()]
        self.row_pos = nn.ParameterList(nn.Parameter(0.02 * torch.randn(1, s, 1, cfg.cond_dim)) for s in sides)
        self.col_pos = nn.ParameterList(nn.Parameter(0.02 * torch.randn(1, 1, s, cfg.cond_dim)) for s in sides)

    def forward(self, c: torch.Tensor) -> list:
        h = c[:, None]
        scales = []
        for conv, proj, rp, cp in zip(self.convs, self.proj, self.row_pos, self.col_pos):
            h = F.silu(conv(h))
            tokens = h.flatten(2).transpose(1, 2)
            pos = (rp + cp).flatten(1, 2)
            scales.append(proj(tokens) + pos)
        return scales


class MLPHead(nn.Module):
    def __init__(self, d, hidden, out):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, out)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(self.norm(x))))


def _default_alpha_bars(T: int) -> np.ndarray:
    return make_schedule(DiffusionConfig(T=T)).alpha_bars


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.token_dim
        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.pos = nn.Parameter(0.02 * torch.randn(1, cfg.n_tokens, d))
        self.time_proj = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_encoder_layers))
        self.cond_cnn = ConditionCNN(cfg)
        self.null_cond = nn.Parameter(0.02 * torch.randn(1, cfg.n_null_tokens, cfg.cond_dim))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_decoder_layers))
        self.heads = nn.ModuleList(MLPHead(d, cfg.ffn_dim, cfg.patch_dim) for _ in range(cfg.n_mlp_heads))
        # zero-init output: the body starts as a zero residual over the prior
        for head in self.heads:
            nn.init.zeros_(head.fc2.weight)
            nn.init.zeros_(head.fc2.bias)
        # The network body predicts the clean latent; forward converts it to eps.
        # Latents fill only a few directions of a large space, and in the empty
        # directions the optimal eps is z_t / sqrt(1 - alpha_bar), an identity
        # map the narrow token bottleneck cannot represent directly.
        self.register_buffer("alpha_bars", torch.ones(cfg.T + 1))
        self.set_schedule(_default_alpha_bars(cfg.T))
        # Gaussian prior of the training latents (mean + top principal axes). The
        # body predicts a residual over the closed-form posterior mean E[z0 | z_t]
        # under that prior; with no prior set the posterior mean is zero.
        D = int(np.prod(cfg.latent_shape))
        self.register_buffer("prior_mean", torch.zeros(cfg.latent_shape))
        self.register_buffer("prior_basis", torch.zeros(0, D))
        self.register_buffer("prior_var", torch.zeros(0))

    def set_schedule(self, alpha_bars):
        ab = torch.as_tensor(np.asarray(alpha_bars), dtype=self.alpha_bars.dtype)
        if ab.shape != (self.cfg.T,):
            raise ValidationError(f"expected {self.cfg.T} alpha_bars, got {tuple(ab.shape)}")
        self.alpha_bars[1:] = ab

    def set_prior(self, latents: torch.Tensor, n_components: int = 64):
        """Fit the Gaussian prior from (normalized) training latents."""
        n = len(latents)
        flat = latents.reshape(n, -1).double()
        mean = flat.mean(0)
        k = max(0, min(n_components, n - 1))
        if k:
            _, sv, vh = torch.linalg.svd(flat - mean, full_matrices=False)
            basis, var = vh[:k], sv[:k] ** 2 / (n - 1)
        else:
            basis, var = flat.new_zeros(0, flat.shape[1]), flat.new_zeros(0)
        dt = self.prior_mean.dtype
        self.prior_mean = mean.reshape(self.cfg.latent_shape).to(dt)
        self.prior_basis = basis.to(dt).contiguous()
        self.prior_var = var.to(dt)

    def prior_posterior_mean(self, z_t: torch.Tensor, ab: torch.Tensor) -> torch.Tensor:
        """E[z0 | z_t] when z0 ~ N(mean, U^T diag(var) U); ab has shape (b,)."""
        mu = self.prior_mean.to(z_t.dtype)
        if not len(self.prior_var):
            return mu.expand_as(z_t)
        b = z_t.shape[0]
        U, lam = self.prior_basis.to(z_t.dtype), self.prior_var.to(z_t.dtype)
        r = (z_t - ab.sqrt().reshape(b, 1, 1, 1, 1) * mu).reshape(b, -1)
        gain = ab.sqrt()[:, None] * lam / (ab[:, None] * lam + 1 - ab[:, None])
        return mu + ((r @ U.T) * gain @ U).reshape(z_t.shape)

    def encode_condition(self, c: Optional[torch.Tensor], batch: int) -> torch.Tensor:
        if c is None:
            return self.null_cond.expand(batch, -1, -1)
        if c.ndim == 2:
            c = c[None].expand(batch, -1, -1)
        if tuple(c.shape[1:]) != (self.cfg.cond_size, self.cfg.cond_size):
            raise ValidationError(f"condition shape {tuple(c.shape[1:])} != {self.cfg.cond_size}x{self.cfg.cond_size}")
        if not torch.isfinite(c).all():
            raise NonFiniteError("condition contains NaN or Inf")
        return torch.cat(self.cond_cnn(c), dim=1)

    def forward(self, z_t: torch.Tensor, t, c: Optional[torch.Tensor] = None) -> torch.Tensor:
        cfg = self.cfg
        if tuple(z_t.shape[1:]) != cfg.latent_shape:
            raise ValidationError(f"z_t shape {tuple(z_t.shape[1:])} != {cfg.latent_shape}")
        b = z_t.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        temb = timestep_embed(t, cfg.token_dim, cfg.T).to(z_t.dtype)
        x = self.patch_embed(patchify(z_t, cfg.patch_size)) + self.pos
        x = x + self.time_proj(temb)[:, None]
        for layer in self.encoder:
            x = layer(x)
        cond_tokens = self.encode_condition(None if c is None else c.to(z_t.dtype), b)
        for layer in self.decoder:
            x = layer(x, cond_tokens)
        out = sum(head(x) for head in self.heads)
        ab = self.alpha_bars[t.long()].to(z_t.dtype)
        x0 = self.prior_posterior_mean(z_t, ab) + unpatchify(out, cfg.latent_shape, cfg.patch_size)
        ab = ab.reshape(b, 1, 1, 1, 1)
        return (z_t - ab.sqrt() * x0) / (1 - ab).sqrt()


def encode_condition(c, params: Denoiser) -> list:
    """Per-scale condition token sets for a single K x K matrix."""
    c = torch.as_tensor(np.asarray(c), dtype=next(params.parameters()).dtype)
    if not torch.isfinite(c).all():
        raise NonFiniteError("condition contains NaN or Inf")
    with torch.no_grad():
        return [s[0] for s in params.cond_cnn(c[None])]


def denoise(z_t, t, c, params: Denoiser) -> torch.Tensor:
    z = torch.as_tensor(z_t, dtype=next(params.parameters()).dtype)
    squeeze = z.ndim == 4
    if squeeze:
        z = z[None]
    cond = None if c is None else torch.as_tensor(np.asarray(c) if not torch.is_tensor(c) else c)
    was_training = params.training
    params.eval()
    with torch.no_grad():
        out = params(z, t, cond)
    params.train(was_training)
    return out[0] if squeeze else out


def save_denoiser(model: Denoiser, path, extra: Optional[dict] = None):
    checkpoint.save(path, "denoiser", model.cfg.to_dict(), model.state_dict(), extra)


def load_denoiser(path):
    ck = checkpoint.load(path, "denoiser")
    model = Denoiser(DenoiserConfig.from_dict(ck["config"]))
    params = ck["params"]
    # the prior's rank is data-dependent; size the buffers before loading
    for name in ("prior_basis", "prior_var"):
        if name in params:
            setattr(model, name, torch.zeros_like(params[name]))
    model.load_state_dict(params)
    model.eval()
    return model, ck["extra"]
