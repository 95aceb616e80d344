"""Layout-guided modulation of attention scores.

Scores of positive query-key pairs are pulled toward their row maximum and
scores of negative pairs toward their row minimum, by a fraction ``lam`` of
the gap, before the usual 1/sqrt(d) scaling and softmax. Because the pull is
a convex combination, modulated scores never leave the original range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

Scope = Literal["row", "global"]


class ModulationError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Modulation intensity over normalized time: coefficient * t**exponent."""

    branch: Literal["cross", "self"]
    exponent: float = 5.0
    coefficient: float | None = None

    def __post_init__(self):
        if self.branch not in ("cross", "self"):
            raise ModulationError(f"unknown branch {self.branch!r}")
        if self.coefficient is None:
            object.__setattr__(self, "coefficient", 1.0 if self.branch == "cross" else 0.3)
        if not 0.0 < self.coefficient <= 1.0:
            raise ModulationError(f"coefficient must lie in (0, 1], got {self.coefficient}")

    def xi(self, t: float) -> float:
        return self.coefficient * t ** self.exponent


CROSS = Schedule("cross")
SELF = Schedule("self")


def lambda_value(t: float, area: float, schedule: Schedule) -> float:
    if not 0.0 <= t <= 1.0:
        raise ModulationError(f"normalized timestep {t} outside [0, 1]")
    if not 0.0 <= area <= 1.0:
        raise ModulationError(f"area fraction {area} outside [0, 1]")
    return schedule.xi(t) * (1.0 - area)


def _extrema(scores: torch.Tensor, scope: Scope):
    if scope == "row":
        return scores.amax(dim=-1, keepdim=True), scores.amin(dim=-1, keepdim=True)
    if scope == "global":
        return (scores.amax(dim=(-2, -1), keepdim=True),
                scores.amin(dim=(-2, -1), keepdim=True))
    raise ModulationError(f"unknown scope {scope!r}")


def pos_neg_values(scores: torch.Tensor, scope: Scope = "row"):
    """Gap to the maximum (positive values) and to the minimum (negative values)."""
    hi, lo = _extrema(scores, scope)
    return hi - scores, scores - lo


def modulate_scores(scores: torch.Tensor, condition: torch.Tensor, lam,
                    exempt: torch.Tensor | None = None, scope: Scope = "row") -> torch.Tensor:
    """Apply ``s + lam * (R * m_pos - (1 - R) * m_neg)`` to raw scores.

    ``condition`` is broadcast against ``scores`` (1 = positive pair,
    0 = negative pair). ``exempt`` marks entries left untouched; ``lam`` is a
    scalar or a tensor broadcastable to ``scores`` with entries in [0, 1].
    """
    lam_t = torch.as_tensor(lam, dtype=scores.dtype)
    if lam_t.numel() and (lam_t.min() < 0 or lam_t.max() > 1 or torch.isnan(lam_t).any()):
        raise ModulationError("modulation out of range")
    hi, lo = _extrema(scores, scope)
    positive = torch.as_tensor(condition, device=scores.device) > 0.5
    # R=1: s + lam*(max - s); R=0: s - lam*(s - min)
    pulled = torch.lerp(scores, torch.where(positive, hi, lo), lam_t)
    # rounding can overshoot a bound by one ulp
    out = torch.clamp(pulled, lo, hi)
    if exempt is not None:
        out = torch.where(torch.as_tensor(exempt, device=scores.device), scores, out)
    return out


@dataclass
class AttentionOutput:
    weights: torch.Tensor
    context: torch.Tensor


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
           condition: torch.Tensor | None = None, lam=None,
           exempt: torch.Tensor | None = None, scope: Scope = "row") -> AttentionOutput:
    """softmax((QK^T + lam*M) / sqrt(d)) V, with M built from ``condition``.

    Leading dimensions of q/k/v are batch dimensions (frames, heads, ...).
    Without a condition this is plain scaled dot-product attention.
    """
    d = q.shape[-1]
    scores = q @ k.transpose(-2, -1)
    if condition is not None:
        scores = modulate_scores(scores, condition, 0.0 if lam is None else lam,
                                 exempt=exempt, scope=scope)
    # torch.softmax subtracts the row max internally
    weights = torch.softmax(scores / math.sqrt(d), dim=-1)
    return AttentionOutput(weights=weights, context=weights @ v)


def cross_lambda(owner: np.ndarray, areas: dict[int, np.ndarray], t: float,
                 schedule: Schedule = CROSS) -> np.ndarray:
    """Per (frame, text position) λ, sized by the area of the key's region.

    Returns shape (N, 1, L); unowned positions get 0.
    """
    n = len(next(iter(areas.values())))
    lam = np.zeros((n, 1, len(owner)))
    for region_id in np.unique(owner[owner > 0]):
        cols = owner == region_id
        for i in range(n):
            lam[i, 0, cols] = lambda_value(t, float(areas[int(region_id)][i]), schedule)
    return lam


def self_lambda(labels: np.ndarray, areas: dict[int, np.ndarray], t: float,
                schedule: Schedule = SELF) -> np.ndarray:
    """Per query λ of shape (N*T, 1), sized by the area of the query's region."""
    n, _ = labels.shape
    lam = np.zeros(labels.shape)
    for region_id in np.unique(labels):
        for i in range(n):
            sel = labels[i] == region_id
            lam[i, sel] = lambda_value(t, float(areas[int(region_id)][i]), schedule)
    return lam.reshape(-1, 1)


def st_layout_cross_attention(q: torch.Tensor, k_text: torch.Tensor, v_text: torch.Tensor,
                              cross_map, areas: dict[int, np.ndarray], t: float,
                              schedule: Schedule = CROSS, scope: Scope = "row") -> AttentionOutput:
    """Cross-attention from per-frame queries (N, T, d) to text keys (L, d)."""
    n, tokens, d = q.shape
    if k_text.shape[-1] != d or k_text.shape[0] != v_text.shape[0]:
        raise ModulationError(f"key/value shapes {tuple(k_text.shape)}, {tuple(v_text.shape)} "
                              f"do not match queries {tuple(q.shape)}")
    if cross_map.values.shape != (n, tokens, k_text.shape[0]):
        raise ModulationError(f"condition map shape {cross_map.values.shape} does not match "
                              f"({n}, {tokens}, {k_text.shape[0]})")
    cond = torch.as_tensor(cross_map.values, dtype=q.dtype)
    lam = torch.as_tensor(cross_lambda(cross_map.owner, areas, t, schedule), dtype=q.dtype)
    exempt = torch.as_tensor(~cross_map.modulated)
    return attend(q, k_text, v_text, cond, lam, exempt=exempt, scope=scope)


def st_layout_self_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                             labels: np.ndarray, areas: dict[int, np.ndarray], t: float,
                             schedule: Schedule = SELF, scope: Scope = "row") -> AttentionOutput:
    """Spatial-temporal self-attention over all N*T tokens of the video.

    q, k, v have shape (N*T, d); keys of every frame are concatenated, so a
    query attends across the whole clip. ``labels`` is (N, T).
    """
    labels = np.asarray(labels)
    if labels.size != q.shape[0] or k.shape[0] != q.shape[0]:
        raise ModulationError(f"labels length {labels.size} does not match {q.shape[0]} tokens")
    flat = torch.as_tensor(labels.reshape(-1))
    cond = flat[:, None] == flat[None, :]
    lam = torch.as_tensor(self_lambda(labels, areas, t, schedule), dtype=q.dtype)
    return attend(q, k, v, cond, lam, scope=scope)
