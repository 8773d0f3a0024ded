"""Swin-UNet noise predictor conditioned on timestep and degradation score.

Conditioning enters through adaptive group normalization (AdaGN) inside every
Swin block; a physically guided fusion module (PGFM: red-channel compensation
followed by frequency-domain gating) sits on one decoder level.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import ConfigError


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 6  # noisy image + raw-image conditioning
    out_channels: int = 3
    embed_dim: int = 64
    depths: tuple[int, ...] = (2, 2, 2)
    window_size: int = 8
    patch_size: int = 4
    head_dim: int = 16
    mlp_ratio: float = 2.0
    num_groups: int = 8
    cond_dim: int = 128
    adagn_eps: float = 1e-5
    use_adagn: bool = True
    use_pgfm: bool = True
    pgfm_stage: int = 0  # resolution level of the decoder path, 0 = highest
    red_source: str = "feature"  # "feature": channel 0 of F; "raw": resized raw red channel
    gamma_pg_init: float = 0.5
    freq_kernel: int = 1
    image_side: int = 256

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.red_source not in ("feature", "raw"):
            raise ConfigError(f"red_source must be 'feature' or 'raw', got {self.red_source!r}")
        if self.red_source == "raw" and self.in_channels < 6:
            raise ConfigError("red_source='raw' needs raw conditioning channels in the input")
        if not 0 <= self.pgfm_stage < len(self.depths):
            raise ConfigError(f"pgfm_stage {self.pgfm_stage} outside 0..{len(self.depths) - 1}")
        self.check_side(self.image_side)
        for c in self.channels:
            if c % self.num_groups:
                raise ConfigError(f"num_groups={self.num_groups} does not divide {c} channels")

    @property
    def channels(self) -> list[int]:
        return [self.embed_dim * 2 ** i for i in range(len(self.depths))]

    def level_geometry(self, side: int) -> list[tuple[int, int, int]]:
        """(resolution, window, shift) for every level at input side ``side``."""
        out = []
        for i in range(len(self.depths)):
            res = side // self.patch_size // 2 ** i
            win = min(self.window_size, res)
            out.append((res, win, win // 2 if res > win else 0))
        return out

    def check_side(self, side: int) -> None:
        levels = len(self.depths)
        if side % (self.patch_size * 2 ** (levels - 1)):
            raise ConfigError(f"side {side} not divisible by patch_size * 2^(levels-1)")
        for res, win, _ in self.level_geometry(side):
            if res < 1 or res % win:
                raise ConfigError(f"level resolution {res} not divisible by window {win}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double().reshape(-1, 1) * freqs.to(t.device).unsqueeze(0)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConditioningEmbedding(nn.Module):
    """Sinusoidal timestep embedding plus a linear projection of D (summed)."""

    def __init__(self, dim: int, use_score: bool = True):
        super().__init__()
        self.dim = dim
        self.d_proj = nn.Linear(1, dim) if use_score else None

    def forward(self, t: Tensor, D: Tensor) -> Tensor:
        dtype = self.d_proj.weight.dtype if self.d_proj is not None else torch.get_default_dtype()
        emb = timestep_embedding(t, self.dim).to(dtype)
        if self.d_proj is not None:
            emb = emb + self.d_proj(D.reshape(-1, 1).to(dtype))
        return emb


def group_standardize(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """(x - mu_G) / (sigma_G + eps), statistics over (channels-in-group, H, W)."""
    n, c = x.shape[:2]
    if c % groups:
        raise ConfigError(f"{c} channels not divisible into {groups} groups")
    g = x.reshape(n, groups, -1)
    mu = g.mean(dim=2, keepdim=True)
    var = g.var(dim=2, unbiased=False, keepdim=True)
    # tiny floor keeps the sqrt differentiable on constant groups
    sigma = torch.sqrt(var.clamp_min(1e-24))
    return ((g - mu) / (sigma + eps)).reshape_as(x)


def ada_gn(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """gamma * GroupStandardize(x) + beta with per-sample, per-channel gamma/beta of shape (N, C)."""
    core = group_standardize(x, groups, eps)
    shape = (x.shape[0], x.shape[1]) + (1,) * (x.ndim - 2)
    return gamma.reshape(shape) * core + beta.reshape(shape)


class AdaGN(nn.Module):
    def __init__(self, channels: int, cond_dim: int, groups: int, eps: float = 1e-5):
        super().__init__()
        self.groups, self.eps = groups, eps
        self.mlp = nn.Sequential(nn.Linear(cond_dim, cond_dim), nn.SiLU(),
                                 nn.Linear(cond_dim, 2 * channels))
        with torch.no_grad():
            self.mlp[2].weight.mul_(0.1)
            self.mlp[2].bias.zero_()
            self.mlp[2].bias[:channels] = 1.0

    def params(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        gamma, beta = self.mlp(cond).chunk(2, dim=1)
        return gamma, beta

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        gamma, beta = self.params(cond)
        return ada_gn(x, gamma, beta, self.groups, self.eps)


class TimeBiasNorm(nn.Module):
    """Plain GroupNorm followed by an additive timestep bias (used when AdaGN is ablated)."""

    def __init__(self, channels: int, cond_dim: int, groups: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels, eps=eps)
        self.bias = nn.Linear(cond_dim, channels)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        return self.norm(x) + self.bias(cond)[:, :, None, None]


def _cond_norm(cfg: DenoiserConfig, channels: int) -> nn.Module:
    cls = AdaGN if cfg.use_adagn else TimeBiasNorm
    return cls(channels, cfg.cond_dim, cfg.num_groups, cfg.adagn_eps)


# --- Swin components ------------------------------------------------------

def window_partition(x: Tensor, ws: int) -> Tensor:
    n, h, w, c = x.shape
    x = x.reshape(n, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def window_reverse(windows: Tensor, ws: int, n: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    x = windows.reshape(n, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, w, c)


def shift_mask(res: int, ws: int, shift: int) -> Tensor | None:
    if shift == 0:
        return None
    img = torch.zeros(1, res, res, 1)
    cuts = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for wsl in cuts:
            img[:, hs, wsl, :] = label
            label += 1
    win = window_partition(img, ws).squeeze(-1)
    mask = win.unsqueeze(1) - win.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.heads, self.window = heads, window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
        coords = coords.flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * window - 1) + rel[..., 1], persistent=False)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        b, L, c = x.shape
        qkv = self.qkv(x).reshape(b, L, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.reshape(-1)].reshape(L, L, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(b // nw, nw, self.heads, L, L) + mask.to(attn.dtype)[None, :, None]
            attn = attn.reshape(b, self.heads, L, L)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, L, c))


class SwinBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, dim: int, window: int, shift: int, res: int):
        super().__init__()
        self.window, self.shift = window, shift
        self.norm1 = _cond_norm(cfg, dim)
        self.attn = WindowAttention(dim, window, max(1, dim // cfg.head_dim))
        self.norm2 = _cond_norm(cfg, dim)
        hidden = int(dim * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Conv2d(dim, hidden, 1), nn.GELU(), nn.Conv2d(hidden, dim, 1))
        mask = shift_mask(res, window, shift)
        self.register_buffer("mask", mask, persistent=False)
        self.res = res

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        n, c, h, w = x.shape
        y = self.norm1(x, cond).permute(0, 2, 3, 1)
        if self.shift:
            y = torch.roll(y, (-self.shift, -self.shift), dims=(1, 2))
        y = window_reverse(self.attn(window_partition(y, self.window), self.mask),
                           self.window, n, h, w)
        if self.shift:
            y = torch.roll(y, (self.shift, self.shift), dims=(1, 2))
        x = x + y.permute(0, 3, 1, 2)
        return x + self.mlp(self.norm2(x, cond))


class SwinStage(nn.Module):
    def __init__(self, cfg: DenoiserConfig, dim: int, depth: int, res: int, window: int, shift: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            SwinBlock(cfg, dim, window, shift if k % 2 else 0, res) for k in range(depth))

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x, cond)
        return x


# --- PGFM -----------------------------------------------------------------

def red_compensate(feat: Tensor, D, gamma_pg, red: Tensor | None = None) -> Tensor:
    """Append channel 0 (or ``red``) scaled by (1 + gamma_pg * D); output has C + 1 channels."""
    red = feat[:, :1] if red is None else red
    D = torch.as_tensor(D, dtype=feat.dtype, device=feat.device).reshape(-1, 1, 1, 1)
    return torch.cat([feat, red * (1.0 + gamma_pg * D)], dim=1)


def hermitian_symmetrize(g: Tensor) -> Tensor:
    """Average g[k] with g[-k] (indices mod size) over the last two axes."""
    rev = torch.roll(torch.flip(g, dims=(-2, -1)), shifts=(1, 1), dims=(-2, -1))
    return 0.5 * (g + rev)


def freq_attention(feat: Tensor, conv: nn.Module, symmetric: bool = True) -> Tensor:
    """IFFT(FFT(F) * sigmoid(Conv([Re, Im]))), real part.

    The gate is made Hermitian-symmetric so that the gated spectrum stays the
    transform of a real signal; the discarded imaginary part is then round-off.
    """
    spec = torch.fft.fft2(feat, norm="ortho")
    if not torch.isfinite(torch.view_as_real(spec)).all():
        raise FloatingPointError(f"non-finite spectrum in frequency attention, shape {tuple(feat.shape)}")
    gate = torch.sigmoid(conv(torch.cat([spec.real, spec.imag], dim=1)))
    if symmetric:
        gate = hermitian_symmetrize(gate)
    return torch.fft.ifft2(spec * gate, norm="ortho").real


class FreqAttention(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, kernel_size, padding=kernel_size // 2,
                              padding_mode="circular")

    def forward(self, feat: Tensor) -> Tensor:
        return freq_attention(feat, self.conv)


class PGFM(nn.Module):
    def __init__(self, channels: int, gamma_init: float = 0.5, kernel_size: int = 1,
                 red_source: str = "feature"):
        super().__init__()
        self.gamma_pg = nn.Parameter(torch.tensor(float(gamma_init)))
        self.mix = nn.Conv2d(channels + 1, channels, 1)
        self.freq = FreqAttention(channels, kernel_size)
        self.red_source = red_source

    def forward(self, feat: Tensor, D: Tensor, raw: Tensor | None = None) -> Tensor:
        red = None
        if self.red_source == "raw":
            red = F.interpolate(raw[:, :1], size=feat.shape[-2:], mode="bilinear",
                                align_corners=False, antialias=True)
        fused = self.mix(red_compensate(feat, D, self.gamma_pg, red))
        return feat + self.freq(fused)


# --- network --------------------------------------------------------------

class Denoiser(nn.Module):
    """eps-prediction network: (x_t ++ raw, t, D) -> eps, shaped Nx3xHxW."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        ch, p, E = cfg.channels, cfg.patch_size, cfg.embed_dim
        geo = cfg.level_geometry(cfg.image_side)
        levels = len(cfg.depths)
        self.embed = ConditioningEmbedding(cfg.cond_dim, use_score=cfg.use_adagn)
        self.patch = nn.Conv2d(cfg.in_channels, E, p, stride=p)
        self.shallow = nn.Conv2d(cfg.in_channels, E, 3, padding=1)
        self.enc = nn.ModuleList(SwinStage(cfg, ch[i], cfg.depths[i], *geo[i]) for i in range(levels))
        self.down = nn.ModuleList(nn.Conv2d(ch[i], ch[i + 1], 2, stride=2) for i in range(levels - 1))
        self.up = nn.ModuleList(nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in range(levels - 1))
        self.fuse = nn.ModuleList(nn.Conv2d(2 * ch[i], ch[i], 1) for i in range(levels - 1))
        self.dec = nn.ModuleList(SwinStage(cfg, ch[i], cfg.depths[i], *geo[i]) for i in range(levels - 1))
        self.pgfm = (PGFM(ch[cfg.pgfm_stage], cfg.gamma_pg_init, cfg.freq_kernel, cfg.red_source)
                     if cfg.use_pgfm else None)
        self.unpatch = nn.ConvTranspose2d(E, E, p, stride=p)
        self.head = nn.Sequential(nn.GroupNorm(cfg.num_groups, 2 * E), nn.SiLU(),
                                  nn.Conv2d(2 * E, cfg.out_channels, 3, padding=1))

    def forward(self, x_in: Tensor, t: Tensor, D: Tensor) -> Tensor:
        cfg = self.cfg
        n, c, h, w = x_in.shape
        if c != cfg.in_channels or h != w or h != cfg.image_side:
            raise ValueError(f"input {tuple(x_in.shape)} does not match config "
                             f"({cfg.in_channels} channels, side {cfg.image_side})")
        t = torch.as_tensor(t, device=x_in.device).reshape(-1).expand(n)
        D = torch.as_tensor(D, device=x_in.device, dtype=x_in.dtype).reshape(-1).expand(n)
        cond = self.embed(t, D).to(x_in.dtype)
        raw = x_in[:, 3:6] if cfg.in_channels >= 6 else None
        levels = len(cfg.depths)

        x = self.patch(x_in)
        skips = []
        for i in range(levels):
            x = self.enc[i](x, cond)
            if i < levels - 1:
                skips.append(x)
                x = self.down[i](x)
        if self.pgfm is not None and cfg.pgfm_stage == levels - 1:
            x = self.pgfm(x, D, raw)
        for i in range(levels - 2, -1, -1):
            x = self.fuse[i](torch.cat([self.up[i](x), skips[i]], dim=1))
            x = self.dec[i](x, cond)
            if self.pgfm is not None and cfg.pgfm_stage == i:
                x = self.pgfm(x, D, raw)
        x = torch.cat([self.unpatch(x), self.shallow(x_in)], dim=1)
        return self.head(x)

    def adagn_modules(self) -> list[AdaGN]:
        return [m for m in self.modules() if isinstance(m, AdaGN)]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
