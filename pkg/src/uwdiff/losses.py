"""Hybrid image-space objective: soft-histogram KL, perceptual L1, feature cosine."""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import ConfigError

log = logging.getLogger(__name__)

HIST_BINS = 32
HIST_BANDWIDTH = 0.02
HIST_SMOOTHING = 1e-6

# torchvision vgg16().features[:16] ends at relu3_3, the last activation of the
# third conv block ("first 16 layers").
VGG_TRUNCATE = 16
VGG_WEIGHTS_FILE = "vgg16-397923af.pth"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CACHE_ENV = "UWDIFF_CACHE"


@dataclass(frozen=True)
class LossWeights:
    lambda_perc: float = 1.0
    lambda_hist: float = 0.5
    lambda_contra: float = 0.5

    def __post_init__(self):
        vals = (self.lambda_perc, self.lambda_hist, self.lambda_contra)
        if any(v < 0 for v in vals):
            raise ConfigError(f"loss weights must be non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class LossReport:
    hist: Tensor
    perc: Tensor
    contra: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach().mean()) for k in ("hist", "perc", "contra", "total")}


def _check_pair(pred: Tensor, ref: Tensor) -> None:
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(ref.shape)}")


def _reduce(v: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return v.mean()
    if reduction == "sum":
        return v.sum()
    if reduction == "none":
        return v
    raise ValueError(f"unknown reduction {reduction!r}")


def soft_histogram(x: Tensor, bins: int = HIST_BINS, bandwidth: float = HIST_BANDWIDTH) -> Tensor:
    """Per-channel histogram of an NxCxHxW image in [0, 1], shape NxCxbins.

    Each pixel spreads unit mass over bin centres via a softmax of the Gaussian
    log-kernel -(x - c)^2 / (2 bandwidth^2); as bandwidth -> 0 this is hard binning.
    """
    if bins < 2:
        raise ConfigError("need at least two histogram bins")
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    centers = (torch.arange(bins, dtype=x.dtype, device=x.device) + 0.5) / bins
    d = x.flatten(2).unsqueeze(-1) - centers
    w = torch.softmax(-0.5 * (d / bandwidth) ** 2, dim=-1)
    return w.mean(dim=2)


def hist_loss(pred: Tensor, ref: Tensor, bins: int = HIST_BINS, bandwidth: float = HIST_BANDWIDTH,
              smoothing: float = HIST_SMOOTHING, reduction: str = "mean") -> Tensor:
    """Sum over RGB channels of KL(H_c(pred) || H_c(ref))."""
    _check_pair(pred, ref)
    p = soft_histogram(pred, bins, bandwidth) + smoothing
    q = soft_histogram(ref, bins, bandwidth) + smoothing
    p = p / p.sum(-1, keepdim=True)
    q = q / q.sum(-1, keepdim=True)
    kl = (p * (p.log() - q.log())).sum(-1).sum(-1)
    return _reduce(kl, reduction)


# --- feature extractors ---------------------------------------------------

class IdentityExtractor(nn.Module):
    """Test-mode extractor returning the (optionally shifted) pixels themselves."""
    kind = "identity"

    def __init__(self, center: float = 0.0):
        super().__init__()
        self.center = center

    def forward(self, x: Tensor) -> Tensor:
        return x - self.center


class VGGExtractor(nn.Module):
    """Frozen VGG16 trunk (features[:16]) with ImageNet input normalization."""

    def __init__(self, features: nn.Module, kind: str):
        super().__init__()
        self.features = features
        self.kind = kind
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):  # always frozen
        return super().train(False)

    def forward(self, x: Tensor) -> Tensor:
        return self.features((x - self.mean.to(x.dtype)) / self.std.to(x.dtype))


def _vgg_trunk() -> nn.Sequential:
    # only the convolutional trunk; building the full model would allocate the 120M-parameter classifier
    from torchvision.models.vgg import cfgs, make_layers
    trunk = make_layers(cfgs["D"])[:VGG_TRUNCATE]
    for m in trunk.modules():  # same init torchvision applies inside VGG
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
    return trunk


def find_vgg_weights(path: str | os.PathLike | None = None) -> Path | None:
    candidates = []
    if path:
        candidates.append(Path(path))
    if os.environ.get(CACHE_ENV):
        candidates.append(Path(os.environ[CACHE_ENV]) / VGG_WEIGHTS_FILE)
    candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / VGG_WEIGHTS_FILE)
    return next((c for c in candidates if c.is_file()), None)


def build_extractor(mode: str = "auto", weights_path: str | None = None,
                    allow_fallback: bool = True, seed: int = 0) -> nn.Module:
    """Perceptual feature extractor.

    mode: "vgg16" (pretrained weights required), "random" (seeded random-weight
    VGG16 trunk), "identity", or "auto" (pretrained when available, otherwise
    random if ``allow_fallback``).
    """
    if mode == "identity":
        return IdentityExtractor()
    if mode in ("vgg16", "auto"):
        found = find_vgg_weights(weights_path)
        if found is not None:
            trunk = _vgg_trunk()
            state = torch.load(found, map_location="cpu", weights_only=True)
            feats = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
            trunk.load_state_dict({k: v for k, v in feats.items() if int(k.split(".")[0]) < VGG_TRUNCATE})
            return VGGExtractor(trunk, "vgg16")
        if mode == "vgg16" or not allow_fallback:
            raise EnvironmentError(
                f"pretrained VGG16 weights ({VGG_WEIGHTS_FILE}) not found; set {CACHE_ENV} "
                "or allow the random-weight fallback")
        warnings.warn("pretrained VGG16 weights unavailable; using a seeded random-weight trunk",
                      RuntimeWarning, stacklevel=2)
        mode = "random"
    if mode == "random":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            trunk = _vgg_trunk()
        return VGGExtractor(trunk, "random")
    raise ConfigError(f"unknown extractor mode {mode!r}")


def perc_loss(pred: Tensor, ref: Tensor, extractor: nn.Module, reduction: str = "mean",
              ref_features: Tensor | None = None) -> Tensor:
    """Mean absolute difference of extractor activations."""
    _check_pair(pred, ref)
    fp = extractor(pred)
    fr = extractor(ref) if ref_features is None else ref_features
    return _reduce((fp - fr).abs().flatten(1).mean(1), reduction)


def contra_loss(pred: Tensor, ref: Tensor, extractor: nn.Module, reduction: str = "mean",
                ref_features: Tensor | None = None, eps: float = 1e-12) -> Tensor:
    """1 - cos(phi(pred), phi(ref)) on flattened per-sample features, in [0, 2]."""
    _check_pair(pred, ref)
    fp = extractor(pred).flatten(1)
    fr = (extractor(ref) if ref_features is None else ref_features).flatten(1)
    np_, nr = fp.norm(dim=1), fr.norm(dim=1)
    if bool(((np_ == 0) | (nr == 0)).any()):
        warnings.warn("zero-norm feature vector in contrastive loss", RuntimeWarning, stacklevel=2)
    cos = (fp * fr).sum(1) / (np_ * nr).clamp_min(eps)
    return _reduce(1.0 - cos.clamp(-1.0, 1.0), reduction)


def total_loss(pred: Tensor, ref: Tensor, weights: LossWeights, extractor: nn.Module,
               bins: int = HIST_BINS, bandwidth: float = HIST_BANDWIDTH,
               reduction: str = "mean") -> LossReport:
    """lambda_perc * perc + lambda_hist * hist + lambda_contra * contra.

    Components with zero weight are still reported but computed without a graph.
    """
    if extractor is None:
        raise ValueError("total_loss needs a feature extractor, even when lambda_perc = lambda_contra = 0")
    with torch.no_grad():
        ref_feat = extractor(ref)

    def _maybe_grad(weight: float, fn):
        if weight > 0:
            return fn()
        with torch.no_grad():
            return fn()

    need_feat = weights.lambda_perc > 0 or weights.lambda_contra > 0
    if need_feat:
        pred_feat = extractor(pred)
    else:
        with torch.no_grad():
            pred_feat = extractor(pred)
    ident = _CachedExtractor(pred_feat)
    h = _maybe_grad(weights.lambda_hist,
                    lambda: hist_loss(pred, ref, bins, bandwidth, reduction=reduction))
    p = _maybe_grad(weights.lambda_perc,
                    lambda: perc_loss(pred, ref, ident, reduction, ref_features=ref_feat))
    c = _maybe_grad(weights.lambda_contra,
                    lambda: contra_loss(pred, ref, ident, reduction, ref_features=ref_feat))
    total = weights.lambda_perc * p + weights.lambda_hist * h + weights.lambda_contra * c
    return LossReport(hist=h, perc=p, contra=c, total=total)


class _CachedExtractor(nn.Module):
    """Returns precomputed prediction features so the extractor runs once per call."""

    def __init__(self, feats: Tensor):
        super().__init__()
        self.feats = feats

    def forward(self, x: Tensor) -> Tensor:
        return self.feats
