"""DDIM inversion and denoising loops."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .denoiser import NO_CONTROL, AttentionControl, ToyDenoiser
from .schedule import SchedulerParams, ddim_step
from .text import PromptEmbedding


class DivergenceError(RuntimeError):
    pass


@dataclass
class Trajectory:
    """Inversion chain: ``latents[k]`` sits at noise level ``levels[k]`` and
    ``eps[k]`` is the denoiser's prediction there (source prompt, no hooks).
    Index 0 is the clean latent."""

    levels: np.ndarray
    latents: torch.Tensor
    eps: torch.Tensor
    # (block, level index) -> per-token self-attention features, (N*T, d)
    features: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def source(self) -> torch.Tensor:
        return self.latents[0]

    @property
    def noisiest(self) -> torch.Tensor:
        return self.latents[-1]


class _FeatureRecorder(AttentionControl):
    def __init__(self, blocks: set[int]):
        self.blocks = blocks
        self.captured: dict[int, torch.Tensor] = {}

    def record(self, kind, block, weights, hidden):
        if kind == "self" and block in self.blocks:
            self.captured[block] = hidden[0].detach().clone()


def _check(z: torch.Tensor, where: str) -> None:
    if not torch.isfinite(z).all():
        raise DivergenceError(f"divergence: non-finite latent at {where}")


@torch.no_grad()
def ddim_invert(z0: torch.Tensor, denoiser: ToyDenoiser, prompt: PromptEmbedding,
                params: SchedulerParams,
                record: Iterable[tuple[int, int]] = (),
                fixed_point_iters: int = 10, tol: float = 1e-6) -> Trajectory:
    """Walk the clean latent up to the noisiest level, caching every step.

    Each upward step solves ``z_{k+1} = step(z_k, eps(z_{k+1}, t_{k+1}))`` by
    fixed-point iteration (``fixed_point_iters=0`` gives the classic
    explicit inversion that reuses ``eps(z_k, t_k)``). Evaluating the noise
    where the downward sampler will evaluate it is what lets an unedited
    free-running denoise land back on the source.

    ``record`` lists (block, level index) pairs whose self-attention
    features should be kept for clustering.
    """
    levels = params.levels
    wanted: dict[int, set[int]] = {}
    for block, k in record:
        wanted.setdefault(int(k), set()).add(int(block))
    latents, eps_list, features = [z0], [], {}
    z = z0
    _check(z, "level index 0")
    for k, level in enumerate(levels):
        control = _FeatureRecorder(wanted[k]) if k in wanted else NO_CONTROL
        eps = denoiser(z, int(level), prompt.vectors, control)
        if control is not NO_CONTROL:
            for block, feat in control.captured.items():
                features[(block, k)] = feat
        eps_list.append(eps)
        if k + 1 < len(levels):
            t_from, t_to = int(level), int(levels[k + 1])
            z_next = ddim_step(z, eps, t_from, t_to, params)
            for _ in range(fixed_point_iters):
                guess = ddim_step(z, denoiser(z_next, t_to, prompt.vectors), t_from, t_to, params)
                shift = (guess - z_next).norm() / guess.norm().clamp_min(1e-30)
                z_next = guess
                if shift < tol:
                    break
            z = z_next
            _check(z, f"level index {k + 1}")
            latents.append(z)
    return Trajectory(levels=levels.copy(), latents=torch.stack(latents),
                      eps=torch.stack(eps_list), features=features)


ModulationHook = Callable[[int, int, bool], AttentionControl]
BlendHook = Callable[[int, torch.Tensor], torch.Tensor]


@torch.no_grad()
def ddim_denoise(z_T: torch.Tensor, denoiser: ToyDenoiser, prompt: PromptEmbedding,
                 params: SchedulerParams,
                 modulation_hook: Optional[ModulationHook] = None,
                 blend_hook: Optional[BlendHook] = None,
                 modulate_steps: int = 15,
                 replay: Optional[Trajectory] = None,
                 source_prompt: Optional[PromptEmbedding] = None) -> torch.Tensor:
    """Walk from the noisiest level down to the clean latent.

    Denoising step ``j`` (0 = noisiest) moves from level index S-j to S-j-1.
    ``modulation_hook(j, level, active)`` supplies the attention control for
    the step; ``active`` is True for the first ``modulate_steps`` steps (all
steps if the window is longer than the schedule).

    With ``replay`` set, each step is anchored to the cached inversion chain:

        z_k = z~_k + step(z_{k+1}, eps_new) - step(z~_{k+1}, eps~_{k+1})

    so an unedited run (same prompt, no hooks) lands on the cached latents
    bit-exactly, and an edit only contributes its difference.
    """
    levels = params.levels
    steps = len(levels) - 1
    if modulate_steps < 0:
        raise ValueError(f"modulate_steps must be >= 0, got {modulate_steps}")
    if replay is not None and len(replay) != len(levels):
        raise ValueError(f"trajectory has {len(replay)} levels, schedule has {len(levels)}")
    same_prompt = replay is not None and (
        source_prompt is None or torch.equal(source_prompt.vectors, prompt.vectors))
    z = z_T
    for j in range(steps):
        k_from, k_to = steps - j, steps - j - 1
        t_from, t_to = int(levels[k_from]), int(levels[k_to])
        active = j < modulate_steps
        control = modulation_hook(j, t_from, active) if modulation_hook else NO_CONTROL
        if replay is None:
            eps = denoiser(z, t_from, prompt.vectors, control)
            z = ddim_step(z, eps, t_from, t_to, params)
        else:
            anchor = replay.latents[k_from]
            untouched = same_prompt and not control.modulates and torch.equal(z, anchor)
            if untouched:
                if control is not NO_CONTROL:
                    # observers still see the forward pass
                    denoiser(z, t_from, prompt.vectors, control)
                z = replay.latents[k_to].clone()
            else:
                eps = denoiser(z, t_from, prompt.vectors, control)
                moved = ddim_step(z, eps, t_from, t_to, params)
                ref = ddim_step(anchor, replay.eps[k_from], t_from, t_to, params)
                z = replay.latents[k_to] + (moved - ref)
        if blend_hook is not None:
            z = blend_hook(k_to, z)
        _check(z, f"denoising step {j}")
    return z
