"""Latent blending: outside the foreground mask the denoising latent is
replaced by the inversion latent of the same noise level."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .diffusion.sampling import Trajectory


class BlendError(ValueError):
    pass


@dataclass
class BlendMask:
    """``grid`` is (N, H, W) bool; with ``aggregated`` every frame holds the
    same OR-of-all-frames mask."""

    grid: np.ndarray
    aggregated: bool = True


def aggregate_masks(per_frame_masks: Sequence[np.ndarray] | np.ndarray,
                    mode: str = "aggregate") -> BlendMask:
    masks = [np.asarray(m, dtype=bool) for m in per_frame_masks]
    if not masks:
        raise BlendError("no masks to aggregate")
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise BlendError(f"resolution mismatch: {sorted(shapes)}")
    stack = np.stack(masks)
    if mode == "per_frame":
        return BlendMask(stack, aggregated=False)
    if mode != "aggregate":
        raise BlendError(f"unknown blend mode {mode!r}")
    union = np.logical_or.reduce(stack, axis=0)
    return BlendMask(np.broadcast_to(union, stack.shape).copy(), aggregated=True)


def blend_step(z_denoise: torch.Tensor, z_inversion: torch.Tensor, mask: BlendMask) -> torch.Tensor:
    """Inside the mask keep the denoising latent, outside copy the inversion latent."""
    if z_denoise.shape != z_inversion.shape:
        raise BlendError(f"latent shapes differ: {tuple(z_denoise.shape)} vs {tuple(z_inversion.shape)}")
    if tuple(mask.grid.shape) != tuple(z_denoise.shape[:3]):
        raise BlendError(f"mask {mask.grid.shape} does not match latent {tuple(z_denoise.shape)}")
    inside = torch.as_tensor(mask.grid)[..., None]
    return torch.where(inside, z_denoise, z_inversion)


def blend_hook(trajectory: Trajectory, mask: BlendMask, level_range: range | None = None):
    """Per-step hook for ``ddim_denoise``; blends at every level index in
    ``level_range`` (default: all)."""

    def hook(level_index: int, z: torch.Tensor) -> torch.Tensor:
        if not 0 <= level_index < len(trajectory):
            raise BlendError(f"no cached inversion latent at level index {level_index}")
        if level_range is not None and level_index not in level_range:
            return z
        return blend_step(z, trajectory.latents[level_index], mask)

    return hook


def dilate(mask: BlendMask, radius: int = 1) -> BlendMask:
    """Square dilation of each frame's mask; off by default."""
    grid = mask.grid.copy()
    out = grid.copy()
    n, h, w = grid.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = np.zeros_like(grid)
            shifted[:, max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
                grid[:, max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
            out |= shifted
    return BlendMask(out, mask.aggregated)
