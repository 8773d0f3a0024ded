"""DDPM forward/reverse machinery with a degradation-modulated noise schedule.

Step indices are 1-based throughout (t = 1..T), matching the usual DDPM
notation; tensors are indexed with ``t - 1`` internally.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor

from .data import ConfigError

BETA_CLAMP = 0.999


class DiffusionError(FloatingPointError):
    """Raised when the reverse chain meets non-finite values."""


@dataclass(frozen=True)
class BaseSchedule:
    beta: Tensor  # (T,)
    beta_start: float
    beta_end: float
    family: str = "linear"

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])


def make_base(T: int = 1500, beta_start: float = 1e-4, beta_end: float = 0.02,
              dtype: torch.dtype = torch.float64) -> BaseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=dtype)
    return BaseSchedule(beta=beta, beta_start=beta_start, beta_end=beta_end)


@dataclass(frozen=True)
class ModulatedSchedule:
    """Per-sample schedule: rows of ``beta_tilde``/``alpha_bar`` belong to batch elements.

    ``timesteps`` holds the original step number of every column, which differs
    from ``1..T`` only for respaced (strided) schedules.
    """
    beta_tilde: Tensor  # (N, T')
    alpha_bar: Tensor  # (N, T')
    timesteps: Tensor  # (T',) long, original step numbers
    alpha_coeff: Tensor | float
    D: Tensor  # (N,)

    @property
    def T(self) -> int:
        return int(self.beta_tilde.shape[1])

    @property
    def batch(self) -> int:
        return int(self.beta_tilde.shape[0])

    def _gather(self, table: Tensor, t, n: int) -> Tensor:
        t = torch.as_tensor(t, device=table.device).long().reshape(-1)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise IndexError(f"step index out of range [1, {self.T}]: {t.tolist()}")
        if t.numel() == 1:
            t = t.expand(n)
        rows = table if table.shape[0] == n else table.expand(n, -1)
        return rows.gather(1, (t - 1).unsqueeze(1)).squeeze(1)

    def at(self, t, n: int | None = None) -> tuple[Tensor, Tensor]:
        """(beta_tilde_t, alpha_bar_t), each shaped (N,)."""
        n = self.batch if n is None else n
        return self._gather(self.beta_tilde, t, n), self._gather(self.alpha_bar, t, n)

    def respace(self, steps: Sequence[int]) -> "ModulatedSchedule":
        """Restrict to an increasing subsequence of steps, re-deriving betas from alpha_bar ratios."""
        steps = sorted(int(s) for s in steps)
        if steps == list(range(1, self.T + 1)):
            return self
        idx = torch.tensor(steps, dtype=torch.long, device=self.alpha_bar.device) - 1
        ab = self.alpha_bar[:, idx]
        prev = torch.cat([torch.ones_like(ab[:, :1]), ab[:, :-1]], dim=1)
        beta = 1.0 - ab / prev
        return ModulatedSchedule(beta_tilde=beta, alpha_bar=ab, timesteps=self.timesteps[idx],
                                 alpha_coeff=self.alpha_coeff, D=self.D)


def modulate(base: BaseSchedule, D, alpha_coeff=0.5) -> ModulatedSchedule:
    """Scale every beta by (1 + alpha * D) per sample and rebuild cumulative products.

    ``alpha_coeff`` may be a float or a scalar tensor (learnable); gradients flow
    through it. Values of beta_tilde that reach 1 are clamped to 0.999 with a warning.
    """
    D = torch.as_tensor(D, dtype=base.beta.dtype, device=base.beta.device).reshape(-1)
    if isinstance(alpha_coeff, Tensor):
        alpha = alpha_coeff.to(base.beta.dtype)
        negative = bool((alpha.detach() < 0).any())
    else:
        alpha, negative = float(alpha_coeff), alpha_coeff < 0
    if negative:
        raise ConfigError("alpha_coeff must be non-negative")
    scale = 1.0 + alpha * D.unsqueeze(1)  # (N, 1)
    beta_tilde = base.beta.unsqueeze(0) * scale
    if bool((beta_tilde.detach() >= 1.0).any()):
        warnings.warn("modulated beta reached 1; clamping to 0.999", RuntimeWarning, stacklevel=2)
    beta_tilde = beta_tilde.clamp(max=BETA_CLAMP)
    alpha_bar = torch.cumprod(1.0 - beta_tilde, dim=1)
    steps = torch.arange(1, base.T + 1, device=base.beta.device)
    return ModulatedSchedule(beta_tilde=beta_tilde, alpha_bar=alpha_bar, timesteps=steps,
                             alpha_coeff=alpha_coeff, D=D)


def _bcast(v: Tensor, like: Tensor) -> Tensor:
    return v.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: Tensor, t, sched: ModulatedSchedule, noise: Tensor) -> Tensor:
    """Closed-form forward jump x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    _, ab = sched.at(t, x0.shape[0])
    ab = _bcast(ab, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def q_step(x_prev: Tensor, t, sched: ModulatedSchedule, noise: Tensor) -> Tensor:
    """Single forward transition x_{t-1} -> x_t."""
    b, _ = sched.at(t, x_prev.shape[0])
    b = _bcast(b, x_prev)
    return (1.0 - b).sqrt() * x_prev + b.sqrt() * noise


def predict_x0(xt: Tensor, t, sched: ModulatedSchedule, eps: Tensor) -> Tensor:
    """One-step reconstruction (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)."""
    _, ab = sched.at(t, xt.shape[0])
    ab = _bcast(ab, xt)
    return (xt - (1.0 - ab).sqrt() * eps) / ab.sqrt()


def p_step(xt: Tensor, t: int, eps_pred: Tensor, sched: ModulatedSchedule,
           noise: Tensor | None = None) -> Tensor:
    """Reverse transition with fixed variance sigma_t^2 = beta_tilde_t; no noise at t = 1."""
    if eps_pred.shape != xt.shape:
        raise ValueError(f"eps_pred shape {tuple(eps_pred.shape)} != xt shape {tuple(xt.shape)}")
    if not torch.isfinite(eps_pred).all():
        bad = int((~torch.isfinite(eps_pred)).sum())
        raise DiffusionError(f"non-finite eps prediction at step t={int(t)} ({bad} entries)")
    b, ab = sched.at(t, xt.shape[0])
    b, ab = _bcast(b, xt), _bcast(ab, xt)
    mean = (xt - b / (1.0 - ab).sqrt() * eps_pred) / (1.0 - b).sqrt()
    if int(t) == 1 or noise is None:
        return mean
    return mean + b.sqrt() * noise


def visited_steps(T: int, stride: int, t_start: int | None = None) -> list[int]:
    """Descending steps t_start, t_start - stride, ... (all >= 1)."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    t_start = T if t_start is None else t_start
    if not 1 <= t_start <= T:
        raise ConfigError(f"t_start must lie in [1, {T}]")
    return list(range(t_start, 0, -stride))


EpsModel = Callable[[Tensor, Tensor, Tensor], Tensor]


def sample_chain(x_init: Tensor, denoiser: EpsModel, D, sched: ModulatedSchedule,
                 stride: int = 1, cond: Tensor | None = None,
                 generator: torch.Generator | None = None,
                 t_start: int | None = None) -> Tensor:
    """Run the (strided) reverse chain from ``x_init`` and return images in [0, 1].

    ``denoiser(x_in, t, D)`` predicts noise; ``x_in`` is ``x_t`` with ``cond``
    concatenated along channels when given. The chain lives in [-1, 1].
    """
    steps = visited_steps(sched.T, stride, t_start)
    sub = sched.respace(steps)
    D = torch.as_tensor(D, dtype=x_init.dtype, device=x_init.device).reshape(-1)
    n = x_init.shape[0]
    if D.numel() == 1:
        D = D.expand(n)
    x = x_init
    for k in range(sub.T, 0, -1):
        t_orig = sub.timesteps[k - 1].expand(n)
        x_in = x if cond is None else torch.cat([x, cond.to(x.dtype)], dim=1)
        eps = denoiser(x_in, t_orig, D)
        z = None
        if k > 1:
            z = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        x = p_step(x, k, eps.to(x.dtype), sub, z)
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)
