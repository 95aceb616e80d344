"""Linear-beta noise schedule and the deterministic DDIM update."""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
import torch

# noise level index used for the clean latent (alpha_bar = 1)
CLEAN = -1


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SchedulerParams:
    train_steps: int
    betas: np.ndarray
    alphas_cumprod: np.ndarray
    # noise levels visited by sampling, ascending, noisiest last
    timesteps: np.ndarray

    @property
    def sample_steps(self) -> int:
        return len(self.timesteps)

    @property
    def levels(self) -> np.ndarray:
        """Clean level followed by the sampled noise levels (length sample_steps + 1)."""
        return np.concatenate([[CLEAN], self.timesteps])

    def alpha_bar(self, t: int) -> float:
        if t == CLEAN:
            return 1.0
        if not 0 <= t < self.train_steps:
            raise ScheduleError(f"timestep {t} outside [0, {self.train_steps})")
        return float(self.alphas_cumprod[t])

    def normalized(self, t: int) -> float:
        """Map a noise level to [0, 1]; 1 is the noisiest train step."""
        return 0.0 if t == CLEAN else (t + 1) / self.train_steps


def make_schedule(train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  sample_steps: int = 50) -> SchedulerParams:
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= sample_steps <= train_steps:
        raise ScheduleError(f"sample_steps must lie in [1, {train_steps}], got {sample_steps}")
    betas = np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)
    alphas_cumprod = np.cumprod(1.0 - betas)
    ratio = train_steps // sample_steps
    # trailing spacing: the last sampled level is the noisiest train step
    timesteps = train_steps - 1 - ratio * np.arange(sample_steps)[::-1]
    return SchedulerParams(train_steps, betas, alphas_cumprod, timesteps.astype(np.int64))


def ddim_coefficients(t_from: int, t_to: int, params: SchedulerParams) -> tuple[float, float]:
    """(a, b) with ddim_step(z, eps) = a*z + b*eps."""
    ab_from, ab_to = params.alpha_bar(t_from), params.alpha_bar(t_to)
    a = math.sqrt(ab_to / ab_from)
    b = math.sqrt(1.0 - ab_to) - math.sqrt(ab_to) * math.sqrt(1.0 - ab_from) / math.sqrt(ab_from)
    return float(a), float(b)


def ddim_step(z: torch.Tensor, eps: torch.Tensor, t_from: int, t_to: int,
              params: SchedulerParams) -> torch.Tensor:
    """Deterministic DDIM move between two noise levels (either direction)."""
    if t_from == t_to:
        raise ScheduleError("t_from and t_to must differ")
    if z.shape != eps.shape:
        raise ScheduleError(f"latent {tuple(z.shape)} and noise {tuple(eps.shape)} differ in shape")
    ab_from, ab_to = params.alpha_bar(t_from), params.alpha_bar(t_to)
    x0 = (z - math.sqrt(1.0 - ab_from) * eps) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0 + math.sqrt(1.0 - ab_to) * eps


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor | int,
              params: SchedulerParams) -> torch.Tensor:
    ab = torch.as_tensor(params.alphas_cumprod, dtype=z0.dtype)[torch.as_tensor(t)]
    ab = ab.reshape(-1, *([1] * (z0.dim() - 1))) if ab.dim() else ab
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
