"""Dual-stream degradation score regressor.

Both images run through one shared depthwise-separable encoder; the pooled
features are concatenated and mapped to a score in [0, 1] by a small MLP.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import ConfigError, DatasetSplit, ImagePair, batch_iter, stack
from .metrics import LabelRange, degradation_label, pair_psnr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    base_channels: int = 32
    num_stages: int = 4
    head_hidden: int = 64
    input_side: int = 256

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 1:
                raise ConfigError(f"{k} must be positive, got {v}")

    @property
    def feature_dim(self) -> int:
        return self.base_channels * 2 ** (self.num_stages - 1)


@dataclass(frozen=True)
class EstimatorHParams:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class SeparableConv(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, stride=stride, padding=1, groups=cin, bias=False)
        self.pointwise = nn.Conv2d(cin, cout, 1, bias=False)
        self.norm = nn.GroupNorm(min(8, cout), cout)
        self.act = nn.SiLU()

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.pointwise(self.depthwise(x))))


class DegradationEstimator(nn.Module):
    def __init__(self, cfg: EstimatorConfig = EstimatorConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        layers: list[nn.Module] = [nn.Conv2d(3, c, 3, padding=1), nn.SiLU()]
        for i in range(cfg.num_stages):
            cout = cfg.base_channels * 2 ** i
            layers += [SeparableConv(c, cout, stride=2), SeparableConv(cout, cout)]
            c = cout
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Linear(2 * c, cfg.head_hidden), nn.SiLU(),
                                  nn.Linear(cfg.head_hidden, 1))

    def encode(self, img: Tensor) -> Tensor:
        """Nx3xSxS image in [0, 1] -> N x feature_dim vector (global average pooled)."""
        side = self.cfg.input_side
        if img.ndim != 4 or img.shape[1] != 3 or img.shape[-2:] != (side, side):
            raise ValueError(f"expected Nx3x{side}x{side}, got {tuple(img.shape)}")
        return self.encoder(img).mean(dim=(2, 3))

    def forward(self, raw: Tensor, ref: Tensor | None = None) -> Tensor:
        """Score in [0, 1], shape (N,). Without a reference the raw image fills both streams."""
        ref = raw if ref is None else ref
        feats = self.encode(torch.cat([raw, ref], dim=0))
        fr, ff = feats.chunk(2, dim=0)
        return torch.sigmoid(self.head(torch.cat([fr, ff], dim=1))).squeeze(1)


def predict_score(model: DegradationEstimator, raw: Tensor, ref: Tensor | None = None) -> Tensor:
    model.eval()
    with torch.no_grad():
        return model(raw, ref)


def build_estimator(cfg: EstimatorConfig, seed: int = 0) -> DegradationEstimator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DegradationEstimator(cfg)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def corpus_labels(pairs: Sequence[ImagePair], label_range: LabelRange) -> dict[str, float]:
    return {p.id: degradation_label(p, label_range) for p in pairs}


def _as_tensor(x: np.ndarray) -> Tensor:
    return torch.from_numpy(x).float()


def evaluate(model: DegradationEstimator, pairs: Sequence[ImagePair], labels: Mapping[str, float],
             batch_size: int = 32, paired: bool = True) -> dict[str, float]:
    preds, targets = [], []
    model.eval()
    with torch.no_grad():
        for batch in batch_iter(pairs, batch_size):
            raw, ref = stack(batch)
            out = model(_as_tensor(raw), _as_tensor(ref) if paired else None)
            preds.append(out.numpy())
            targets.append(np.array([labels[p.id] for p in batch]))
    if not preds:
        return {"mse": float("nan"), "mae": float("nan"), "pearson": float("nan")}
    p, y = np.concatenate(preds).astype(np.float64), np.concatenate(targets)
    return {"mse": float(np.mean((p - y) ** 2)), "mae": float(np.mean(np.abs(p - y))),
            "pearson": _pearson(p, y)}


@dataclass
class EstimatorRun:
    model: DegradationEstimator
    label_range: LabelRange | None
    history: list[dict] = field(default_factory=list)


def train_estimator(split: DatasetSplit, cfg: EstimatorConfig = EstimatorConfig(),
                    hp: EstimatorHParams = EstimatorHParams(),
                    labels: Mapping[str, float] | None = None,
                    label_range: LabelRange | None = None) -> EstimatorRun:
    """Regress scores with MSE; labels default to PSNR labels fit on the training pairs.

    History row 0 is the untrained baseline; rows 1..epochs follow each epoch.
    """
    if labels is None:
        if label_range is None:
            label_range = LabelRange.fit(pair_psnr(p) for p in split.train)
        labels = corpus_labels(list(split.train) + list(split.val), label_range)
    model = build_estimator(cfg, hp.seed)
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)

    def _row(epoch: int, train_mse: float) -> dict:
        row = {"epoch": epoch, "train_mse": train_mse}
        row.update({f"val_{k}": v for k, v in evaluate(model, split.val, labels).items()})
        return row

    history = [_row(0, evaluate(model, split.train, labels)["mse"])]
    for epoch in range(1, hp.epochs + 1):
        model.train()
        losses = []
        for batch in batch_iter(split.train, hp.batch_size, shuffle_seed=hp.seed * 100_003 + epoch):
            raw, ref = stack(batch)
            y = torch.tensor([labels[p.id] for p in batch], dtype=torch.float32)
            loss = F.mse_loss(model(_as_tensor(raw), _as_tensor(ref)), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite estimator loss at epoch {epoch}",
                                       {"epoch": epoch, "ids": [p.id for p in batch],
                                        "labels": y.tolist()})
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()) * len(batch))
        history.append(_row(epoch, sum(losses) / max(1, len(split.train))))
        log.info("estimator epoch %d: %s", epoch, history[-1])
    return EstimatorRun(model=model, label_range=label_range, history=history)


ESTIMATOR_FORMAT = 1


def save_estimator(run: EstimatorRun, path) -> None:
    torch.save({
        "format_version": ESTIMATOR_FORMAT,
        "kind": "estimator",
        "config": asdict(run.model.cfg),
        "label_range": run.label_range.as_dict() if run.label_range else None,
        "state_dict": run.model.state_dict(),
        "history": run.history,
    }, path)


def load_estimator(path) -> EstimatorRun:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "estimator":
        raise ValueError(f"{path} is not an estimator checkpoint")
    model = DegradationEstimator(EstimatorConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    lr = blob.get("label_range")
    return EstimatorRun(model=model, label_range=LabelRange(**lr) if lr else None,
                        history=blob.get("history", []))
