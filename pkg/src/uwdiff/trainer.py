"""Diffusion training loop, checkpoints, run manifests and the ablation harness."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import ConfigError, DatasetSplit, ImagePair, batch_iter, corpus_fingerprint, stack
from .denoiser import Denoiser, DenoiserConfig
from .estimator import DegradationEstimator, TrainingDiverged
from .losses import LossWeights, build_extractor, total_loss
from .metrics import LabelRange, degradation_label, pair_psnr, psnr, ssim
from .schedule import make_base, modulate, predict_x0, q_sample, sample_chain

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
ABLATION_FLAGS = ("use_pgfm", "use_adagn", "use_hist", "use_perc", "use_contra")


@dataclass(frozen=True)
class TrainConfig:
    name: str = "run"
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    image_side: int = 256
    T: int = 1500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    alpha_init: float = 0.5
    learn_alpha: bool = True
    lambda_perc: float = 1.0
    lambda_hist: float = 0.5
    lambda_contra: float = 0.5
    image_loss_weight: float = 1.0
    hist_bins: int = 32
    hist_bandwidth: float = 0.02
    extractor: str = "auto"
    extractor_seed: int = 0
    use_pgfm: bool = True
    use_adagn: bool = True
    use_hist: bool = True
    use_perc: bool = True
    use_contra: bool = True
    grad_clip: float = 1.0
    ema: bool = True
    ema_decay: float = 0.999
    joint_finetune: bool = False
    val_every: int = 1
    save_every: int = 0
    sample_stride: int = 50
    chain_t_start: int | None = None
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if isinstance(self.denoiser, Mapping):
            object.__setattr__(self, "denoiser", DenoiserConfig(**self.denoiser))
        for k in ("batch_size", "T", "image_side", "sample_stride", "val_every"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        for k in ("epochs", "save_every"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")
        if self.lr <= 0 or self.alpha_init < 0 or not 0 <= self.ema_decay < 1:
            raise ConfigError("lr > 0, alpha_init >= 0 and 0 <= ema_decay < 1 required")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.chain_t_start is not None and not 1 <= self.chain_t_start <= self.T:
            raise ConfigError("chain_t_start must lie in [1, T]")
        self.denoiser_config()  # validates side/window compatibility

    def denoiser_config(self) -> DenoiserConfig:
        return replace(self.denoiser, use_pgfm=self.use_pgfm, use_adagn=self.use_adagn,
                       image_side=self.image_side)

    def loss_weights(self) -> LossWeights | None:
        lam = (self.lambda_perc * self.use_perc, self.lambda_hist * self.use_hist,
               self.lambda_contra * self.use_contra)
        if not any(v > 0 for v in lam) or self.image_loss_weight == 0:
            return None
        return LossWeights(*map(float, lam))

    def flags(self) -> dict[str, bool]:
        return {k: getattr(self, k) for k in ABLATION_FLAGS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["denoiser"] = self.denoiser.to_dict()
        return d


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale setting: 8 pairs at 64x64, a ~0.8M parameter denoiser, 200 optimizer steps.

    The reverse chain starts from a partially noised raw image (t=600) because 200 steps
    are not enough to learn the low-SNR end of a 1500-step schedule. The image loss is
    down-weighted so it does not crowd the eps term out of the clipped gradient.
    """
    base = dict(name="toy", epochs=200, batch_size=8, lr=2e-3, image_side=64, ema=False,
                image_loss_weight=0.1, extractor="random", chain_t_start=600, sample_stride=12,
                denoiser=DenoiserConfig(embed_dim=32, depths=(2, 2, 2), patch_size=2, num_groups=8,
                                        cond_dim=64, image_side=64))
    base.update(overrides)
    return TrainConfig(**base)


class DiffusionModel(nn.Module):
    """Denoiser plus the schedule parameters it is trained with (base betas and alpha)."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.denoiser = Denoiser(cfg.denoiser_config())
        base = make_base(cfg.T, cfg.beta_start, cfg.beta_end)
        self.register_buffer("beta", base.beta)
        # alpha = softplus(raw) keeps the coefficient non-negative
        raw = math.log(math.expm1(cfg.alpha_init)) if cfg.alpha_init > 0 else -30.0
        self.alpha_raw = nn.Parameter(torch.tensor(raw, dtype=torch.float64),
                                      requires_grad=cfg.learn_alpha)

    @property
    def alpha(self) -> Tensor:
        return F.softplus(self.alpha_raw)

    def schedule(self, D):
        base = make_base(self.cfg.T, self.cfg.beta_start, self.cfg.beta_end)
        base = replace(base, beta=self.beta)
        return modulate(base, D, self.alpha)

    def forward(self, x_in: Tensor, t: Tensor, D: Tensor) -> Tensor:
        return self.denoiser(x_in, t, D)

    @torch.no_grad()
    def enhance(self, raw: Tensor, D, stride: int | None = None, seed: int = 0,
                t_start: int | None = None) -> Tensor:
        """Nx3xHxW raw images in [0, 1] -> enhanced images in [0, 1]."""
        self.eval()
        stride = self.cfg.sample_stride if stride is None else stride
        t_start = t_start or self.cfg.chain_t_start or self.cfg.T
        gen = torch.Generator().manual_seed(seed)
        cond = raw * 2.0 - 1.0
        D = torch.as_tensor(D, dtype=torch.float64).reshape(-1).expand(raw.shape[0])
        sched = self.schedule(D)
        noise = torch.randn(cond.shape, generator=gen, dtype=cond.dtype)
        x_init = q_sample(cond, t_start, sched, noise)
        return sample_chain(x_init, self, D.to(raw.dtype), sched, stride=stride, cond=cond,
                            generator=gen, t_start=t_start)


def build_model(cfg: TrainConfig) -> DiffusionModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return DiffusionModel(cfg)


# --- manifest and checkpoints ---------------------------------------------

@dataclass
class RunManifest:
    config: dict
    corpus_fingerprint: str
    label_range: dict | None
    rows: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    step_rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(dict(row))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("step_rows")
        return d

    def save(self, out_dir: str | os.PathLike) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "manifest.json", json.dumps(self.to_dict(), indent=2, sort_keys=True))
        if self.step_rows:
            tmp = out / ".metrics.csv.tmp"
            with open(tmp, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(self.step_rows[0]))
                w.writeheader()
                w.writerows(self.step_rows)
            os.replace(tmp, out / "metrics.csv")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_checkpoint(path, model: DiffusionModel, *, epoch: int, label_range: LabelRange | None = None,
                    optimizer: torch.optim.Optimizer | None = None, ema: dict | None = None,
                    manifest: RunManifest | None = None, estimator: DegradationEstimator | None = None) -> None:
    pg = model.denoiser.pgfm
    blob = {
        "format_version": CHECKPOINT_FORMAT,
        "kind": "diffusion",
        "epoch": epoch,
        "train_config": model.cfg.to_dict(),
        "denoiser_config": model.denoiser.cfg.to_dict(),
        "schedule": {"T": model.cfg.T, "beta_start": model.cfg.beta_start,
                     "beta_end": model.cfg.beta_end, "family": "linear"},
        "alpha": float(model.alpha.detach()),
        "gamma_pg": float(pg.gamma_pg.detach()) if pg is not None else None,
        "label_range": label_range.as_dict() if label_range else None,
        "state_dict": model.state_dict(),
        "ema_state_dict": ema,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "manifest": manifest.to_dict() if manifest is not None else None,
        "step_rows": manifest.step_rows if manifest is not None else None,
        "estimator": ({"config": asdict(estimator.cfg), "state_dict": estimator.state_dict()}
                      if estimator is not None else None),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, use_ema: bool = False) -> tuple[DiffusionModel, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "diffusion":
        raise ValueError(f"{path} is not a diffusion checkpoint")
    if blob.get("format_version", 0) > CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: checkpoint format {blob['format_version']} is newer than supported")
    cfg = TrainConfig(**blob["train_config"])
    model = DiffusionModel(cfg)
    state = blob["ema_state_dict"] if use_ema and blob.get("ema_state_dict") else blob["state_dict"]
    model.load_state_dict(state)
    model.eval()
    return model, blob


def bundled_estimator(blob: dict) -> DegradationEstimator | None:
    from .estimator import EstimatorConfig
    est = blob.get("estimator")
    if not est:
        return None
    model = DegradationEstimator(EstimatorConfig(**est["config"]))
    model.load_state_dict(est["state_dict"])
    return model.eval()


# --- training -------------------------------------------------------------

@dataclass
class DiffusionRun:
    model: DiffusionModel
    manifest: RunManifest
    label_range: LabelRange | None
    labels: dict[str, float]
    ema_state: dict | None = None
    checkpoint: Path | None = None

    def eval_model(self) -> DiffusionModel:
        """The model used for evaluation: EMA weights when tracked, else the raw ones."""
        if self.ema_state is None:
            return self.model
        m = copy.deepcopy(self.model)
        m.load_state_dict(self.ema_state)
        return m.eval()


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + epoch)


def _tensor(x: np.ndarray) -> Tensor:
    return torch.from_numpy(x).float()


def teacher_labels(split: DatasetSplit, label_range: LabelRange | None = None
                   ) -> tuple[dict[str, float], LabelRange]:
    """PSNR-derived scores for every pair, range fit on the training pairs."""
    if label_range is None:
        label_range = LabelRange.fit(pair_psnr(p) for p in split.train)
    pairs = list(split.train) + list(split.val)
    return {p.id: degradation_label(p, label_range) for p in pairs}, label_range


def estimator_labels(estimator: DegradationEstimator, pairs: Sequence[ImagePair],
                     batch_size: int = 32) -> dict[str, float]:
    out = {}
    estimator.eval()
    with torch.no_grad():
        for batch in batch_iter(pairs, batch_size):
            raw, ref = stack(batch)
            for p, d in zip(batch, estimator(_tensor(raw), _tensor(ref)).tolist()):
                out[p.id] = float(d)
    return out


def diffusion_loss(model: DiffusionModel, raw: Tensor, ref: Tensor, D: Tensor, gen: torch.Generator,
                   weights: LossWeights | None = None, extractor: nn.Module | None = None,
                   ) -> tuple[Tensor, dict[str, float]]:
    """eps-MSE plus the hybrid image loss on the one-step x0 estimate.

    Images are in [0, 1]; the hybrid term is weighted per sample by alpha_bar_t
    so nearly pure-noise steps contribute little.
    """
    cfg = model.cfg
    n = raw.shape[0]
    t = torch.randint(1, cfg.T + 1, (n,), generator=gen)
    eps = torch.randn(ref.shape, generator=gen, dtype=ref.dtype)
    x0, cond = ref * 2.0 - 1.0, raw * 2.0 - 1.0
    sched = model.schedule(D.double())
    xt = q_sample(x0, t, sched, eps)
    eps_hat = model(torch.cat([xt, cond], dim=1), t, D)
    loss_eps = F.mse_loss(eps_hat, eps)
    parts = {"eps": float(loss_eps.detach()), "hist": 0.0, "perc": 0.0, "contra": 0.0}
    loss = loss_eps
    if weights is not None:
        x0_hat = predict_x0(xt, t, sched, eps_hat).clamp(-1.0, 1.0)
        rep = total_loss((x0_hat + 1.0) / 2.0, ref, weights, extractor, cfg.hist_bins,
                         cfg.hist_bandwidth, reduction="none")
        w = sched.at(t, n)[1].detach().to(ref.dtype)
        loss = loss + cfg.image_loss_weight * (w * rep.total).mean()
        parts.update({k: float((w * getattr(rep, k)).detach().mean()) for k in ("hist", "perc", "contra")})
    parts["loss"] = float(loss.detach())
    return loss, parts


def _val_loss(model: DiffusionModel, pairs: Sequence[ImagePair], labels: Mapping[str, float],
              seed: int, batch_size: int) -> float | None:
    if not pairs:
        return None
    gen = torch.Generator().manual_seed(seed * 7919 + 17)
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for batch in batch_iter(pairs, batch_size):
            raw, ref = map(_tensor, stack(batch))
            D = torch.tensor([labels[p.id] for p in batch], dtype=torch.float32)
            loss, _ = diffusion_loss(model, raw, ref, D, gen)
            total += float(loss) * len(batch)
            count += len(batch)
    return total / count


def train_diffusion(split: DatasetSplit, cfg: TrainConfig, *,
                    labels: Mapping[str, float] | None = None,
                    label_range: LabelRange | None = None,
                    estimator: DegradationEstimator | None = None,
                    out_dir: str | os.PathLike | None = None,
                    resume: str | os.PathLike | None = None) -> DiffusionRun:
    """Train the conditional denoiser on ``split``.

    D comes from ``labels`` when given, from a frozen ``estimator`` in paired
    mode, or else from PSNR labels fit on the training pairs (teacher forcing).
    Deterministic for a fixed seed: data order and noise are re-derived from
    (seed, epoch), so resuming reproduces an uninterrupted run.
    """
    if labels is None:
        if estimator is not None:
            labels = estimator_labels(estimator, list(split.train) + list(split.val))
        else:
            labels, label_range = teacher_labels(split, label_range)
    labels = dict(labels)
    model = build_model(cfg)
    weights = cfg.loss_weights()
    extractor = None
    if weights is not None:  # zero-weight feature terms are still logged
        extractor = build_extractor(cfg.extractor, seed=cfg.extractor_seed)
    params = [p for p in model.parameters() if p.requires_grad]
    joint = cfg.joint_finetune and estimator is not None
    if joint:
        params += list(estimator.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    ema = {k: v.detach().clone() for k, v in model.state_dict().items()} if cfg.ema else None
    manifest = RunManifest(config=cfg.to_dict(), corpus_fingerprint=corpus_fingerprint(split.train),
                           label_range=label_range.as_dict() if label_range else None)
    start = 1
    if resume is not None:
        blob = torch.load(resume, map_location="cpu", weights_only=False)
        model.load_state_dict(blob["state_dict"])
        opt.load_state_dict(blob["optimizer"])
        ema = blob["ema_state_dict"]
        m = blob["manifest"]
        manifest.rows, manifest.checkpoints = list(m["rows"]), list(m["checkpoints"])
        manifest.step_rows = list(blob.get("step_rows") or [])
        start = blob["epoch"] + 1
    out = Path(out_dir) if out_dir is not None else None
    best = min((r["val_loss"] if r.get("val_loss") is not None else r["train_loss"]
                for r in manifest.rows), default=math.inf)

    def _save(tag: str, epoch: int) -> Path | None:
        if out is None:
            return None
        path = out / f"ckpt_{tag}.pt"
        save_checkpoint(path, model, epoch=epoch, label_range=label_range, optimizer=opt, ema=ema,
                        manifest=manifest, estimator=estimator)
        if str(path) not in manifest.checkpoints:
            manifest.checkpoints.append(str(path))
        return path

    step = len(manifest.step_rows)
    for epoch in range(start, cfg.epochs + 1):
        model.train()
        gen = _epoch_generator(cfg.seed, epoch)
        sums: dict[str, float] = {}
        n_seen = 0
        for batch in batch_iter(split.train, cfg.batch_size, shuffle_seed=cfg.seed * 100_003 + epoch):
            raw, ref = map(_tensor, stack(batch))
            if joint:
                D = estimator(raw, ref)
            else:
                D = torch.tensor([labels[p.id] for p in batch], dtype=torch.float32)
            try:
                loss, parts = diffusion_loss(model, raw, ref, D, gen, weights, extractor)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}: {exc}",
                                       {"epoch": epoch, "ids": [p.id for p in batch]}) from exc
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite diffusion loss at epoch {epoch}",
                                       {"epoch": epoch, "ids": [p.id for p in batch], "parts": parts})
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            if ema is not None:
                with torch.no_grad():
                    for k, v in model.state_dict().items():
                        if v.dtype.is_floating_point:
                            ema[k].mul_(cfg.ema_decay).add_(v, alpha=1.0 - cfg.ema_decay)
                        else:
                            ema[k].copy_(v)
            step += 1
            manifest.step_rows.append({"epoch": epoch, "step": step, **parts})
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            n_seen += len(batch)
        row = {"epoch": epoch, "train_loss": sums.get("loss", 0.0) / max(n_seen, 1),
               **{f"train_{k}": v / max(n_seen, 1) for k, v in sums.items() if k != "loss"},
               "alpha": float(model.alpha.detach())}
        if model.denoiser.pgfm is not None:
            row["gamma_pg"] = float(model.denoiser.pgfm.gamma_pg.detach())
        row["val_loss"] = (_val_loss(model, split.val, labels, cfg.seed, cfg.batch_size)
                           if epoch % cfg.val_every == 0 else None)
        manifest.append(row)
        score = row["val_loss"] if row["val_loss"] is not None else row["train_loss"]
        if score < best:
            best = score
            _save("best", epoch)
        if cfg.save_every and epoch % cfg.save_every == 0:
            _save(str(epoch), epoch)
        log.info("epoch %d: %s", epoch, row)

    ckpt = _save(str(cfg.epochs), cfg.epochs)
    if out is not None:
        manifest.save(out)
    return DiffusionRun(model=model, manifest=manifest, label_range=label_range, labels=labels,
                        ema_state=ema, checkpoint=ckpt)


# --- evaluation and ablation ----------------------------------------------

def evaluate_model(model: DiffusionModel, pairs: Sequence[ImagePair], labels: Mapping[str, float],
                   stride: int | None = None, seed: int = 0, batch_size: int = 8,
                   t_start: int | None = None) -> dict:
    """Enhance every raw image and score it against its reference."""
    rows = []
    for batch in batch_iter(pairs, batch_size):
        raw, _ = stack(batch)
        D = torch.tensor([labels[p.id] for p in batch], dtype=torch.float32)
        out = model.enhance(_tensor(raw), D, stride=stride, seed=seed, t_start=t_start)
        for p, img in zip(batch, out.permute(0, 2, 3, 1).numpy()):
            rows.append({"id": p.id, "psnr": psnr(img, p.reference), "ssim": ssim(img, p.reference),
                         "raw_psnr": psnr(p.raw, p.reference)})
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "raw_psnr")} if rows else {}
    return {"rows": rows, "mean": mean}


def _strip_flags(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    for k in ABLATION_FLAGS + ("name",):
        d.pop(k)
    for k in ("use_pgfm", "use_adagn"):
        d["denoiser"].pop(k)
    return d


def module_grid(base: TrainConfig) -> list[TrainConfig]:
    """PGFM x AdaGN cells."""
    return [replace(base, name=f"pgfm{int(p)}_adagn{int(a)}", use_pgfm=p, use_adagn=a)
            for p in (False, True) for a in (False, True)]


def loss_grid(base: TrainConfig) -> list[TrainConfig]:
    """The seven non-empty subsets of {hist, perc, contra}."""
    cells = []
    for h in (False, True):
        for p in (False, True):
            for c in (False, True):
                if h or p or c:
                    cells.append(replace(base, name=f"hist{int(h)}_perc{int(p)}_contra{int(c)}",
                                         use_hist=h, use_perc=p, use_contra=c))
    return cells


def run_ablation(grid: Sequence[TrainConfig], split: DatasetSplit, *,
                 labels: Mapping[str, float] | None = None, eval_seed: int = 0,
                 stride: int | None = None, out_dir: str | os.PathLike | None = None) -> list[dict]:
    """Train every cell with identical seeds and score it on the validation pairs."""
    if not grid:
        return []
    ref = _strip_flags(grid[0])
    for cfg in grid[1:]:
        if _strip_flags(cfg) != ref:
            raise ConfigError(f"ablation cell {cfg.name!r} differs from the grid in more than its flags")
    table = []
    for cfg in grid:
        cell_dir = Path(out_dir) / cfg.name if out_dir is not None else None
        run = train_diffusion(split, cfg, labels=labels, out_dir=cell_dir)
        model = run.eval_model()
        pairs = split.val if split.val else split.train
        ev = evaluate_model(model, pairs, run.labels, stride=stride, seed=eval_seed)
        table.append({"name": cfg.name, **cfg.flags(), "psnr": ev["mean"]["psnr"],
                      "ssim": ev["mean"]["ssim"], "final_train_loss": run.manifest.rows[-1]["train_loss"]
                      if run.manifest.rows else None,
                      "checkpoint": str(run.checkpoint) if run.checkpoint else None})
        log.info("ablation %s: %s", cfg.name, table[-1])
    if out_dir is not None:
        write_table(table, Path(out_dir) / "ablation.csv")
    return table


def write_table(rows: Sequence[Mapping], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)
