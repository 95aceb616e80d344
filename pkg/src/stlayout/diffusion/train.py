"""Noise-prediction training for the toy denoiser."""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import Sequence

import numpy as np
import torch

from .denoiser import NO_CONTROL, AttentionControl, ToyDenoiser, substream
from .schedule import SchedulerParams, add_noise, make_schedule

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def noise_prediction_loss(denoiser: ToyDenoiser, z0: torch.Tensor, t: torch.Tensor,
                          eps: torch.Tensor, text: torch.Tensor,
                          params: SchedulerParams,
                          control: AttentionControl = NO_CONTROL) -> torch.Tensor:
    """Mean squared error between the true and predicted noise for a batch."""
    zt = add_noise(z0, eps, t, params)
    return torch.mean((denoiser(zt, t, text, control) - eps) ** 2)


def _factory(item):
    return item[2] if len(item) > 2 else None


def train_toy(denoiser: ToyDenoiser, dataset: Sequence[tuple[torch.Tensor, torch.Tensor]],
              steps: int, lr: float, batch_size: int = 8, seed: int = 0,
              params: SchedulerParams | None = None, optimizer: str = "sgd",
              log_every: int = 100) -> list[float]:
    """Train in place and return the per-step loss history.

    ``dataset`` holds (video (N, H, W, C), prompt vectors (L, d_text)) pairs;
    a batch is split into groups of equal video shape and prompt length.
    An item may carry a third element, a callable mapping the sampled level
    to the attention control used for its forward pass (or None); such items
    are run on their own.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    params = params or make_schedule(denoiser.dims.train_steps)
    rng = substream(seed, "training")
    if optimizer == "sgd":
        opt = torch.optim.SGD(denoiser.parameters(), lr=lr)
    elif optimizer == "adam":
        opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    losses = []
    denoiser.train()
    for step in range(steps):
        idx = rng.integers(len(dataset), size=batch_size)
        groups = defaultdict(list)
        for i in idx:
            video, text = dataset[i][:2]
            own = _factory(dataset[i]) is not None
            groups[(tuple(video.shape), text.shape[0], int(i) if own else -1)].append(i)
        opt.zero_grad()
        total = 0.0
        for members in groups.values():
            z0 = torch.stack([dataset[i][0] for i in members])
            text = torch.stack([dataset[i][1] for i in members])
            t = torch.as_tensor(rng.integers(params.train_steps, size=len(members)))
            eps = torch.as_tensor(rng.standard_normal(z0.shape), dtype=z0.dtype)
            factory = _factory(dataset[members[0]])
            control = factory(int(t[0])) if factory is not None else NO_CONTROL
            loss = noise_prediction_loss(denoiser, z0, t, eps, text, params, control)
            (loss * len(members) / batch_size).backward()
            total += loss.item() * len(members) / batch_size
        if not np.isfinite(total):
            raise TrainingError(f"training diverged at step {step}")
        opt.step()
        losses.append(total)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, total)
    denoiser.eval()
    return losses
