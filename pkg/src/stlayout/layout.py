"""Region layouts: masks per (frame, region), overlap resolution and the
query-key condition maps consumed by the attention modulation."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class LayoutError(ValueError):
    pass


class Level(str, enum.Enum):
    CLASS = "class"
    INSTANCE = "instance"
    PART = "part"


@dataclass(frozen=True)
class RegionSpec:
    id: int
    prompt_tokens: tuple[str, ...]
    level: Level = Level.INSTANCE
    priority: int = 1
    # source prompt == target prompt; excluded from the blend foreground
    preserve: bool = False

    def __post_init__(self):
        if self.id < 1:
            raise LayoutError(f"region id must be >= 1, got {self.id}")
        if not self.prompt_tokens:
            raise LayoutError(f"region {self.id}: empty prompt")
        object.__setattr__(self, "prompt_tokens", tuple(self.prompt_tokens))
        object.__setattr__(self, "level", Level(self.level))


@dataclass
class LayoutSet:
    """Masks are stored as a dense bool array of shape (N, R, H, W) whose
    second axis follows the order of ``regions``."""

    regions: list[RegionSpec]
    masks: np.ndarray
    global_prompt_tokens: tuple[str, ...] = ()

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 4:
            raise LayoutError(f"masks must be (N, R, H, W), got shape {self.masks.shape}")
        if self.masks.shape[1] != len(self.regions):
            raise LayoutError(
                f"{self.masks.shape[1]} mask channels for {len(self.regions)} regions")
        ids = [r.id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise LayoutError(f"duplicate region ids: {ids}")
        self.global_prompt_tokens = tuple(self.global_prompt_tokens)

    @property
    def frames(self) -> int:
        return self.masks.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.masks.shape[2], self.masks.shape[3]

    @property
    def ids(self) -> list[int]:
        return [r.id for r in self.regions]

    def index_of(self, region_id: int) -> int:
        for i, r in enumerate(self.regions):
            if r.id == region_id:
                return i
        raise LayoutError(f"unknown region {region_id}")

    def region(self, region_id: int) -> RegionSpec:
        return self.regions[self.index_of(region_id)]

    def mask(self, frame: int, region_id: int) -> np.ndarray:
        return self.masks[frame, self.index_of(region_id)]

    def replace(self, **changes) -> "LayoutSet":
        return dataclasses.replace(self, **changes)

    def check_part_priorities(self) -> None:
        """Part-level regions must outrank every class/instance region they touch."""
        for i, part in enumerate(self.regions):
            if part.level is not Level.PART:
                continue
            for j, other in enumerate(self.regions):
                if other.level is Level.PART or i == j:
                    continue
                touches = np.any(self.masks[:, i] & self.masks[:, j])
                if touches and part.priority <= other.priority:
                    raise LayoutError(
                        f"part region {part.id} (priority {part.priority}) overlaps "
                        f"region {other.id} (priority {other.priority})")


def resample_mask(mask: np.ndarray, src_res: tuple[int, int] | None,
                  dst_res: tuple[int, int]) -> np.ndarray:
    """Majority-vote resampling of a boolean grid; ties resolve to True.

    Each destination cell covers a (possibly fractional) rectangle of the
    source grid; source cells are weighted by their overlap area.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.size == 0:
        raise LayoutError("empty mask")
    h_dst, w_dst = dst_res
    if h_dst <= 0 or w_dst <= 0:
        raise LayoutError("empty mask")
    h_src, w_src = mask.shape
    if src_res is not None and tuple(src_res) != (h_src, w_src):
        raise LayoutError(f"mask shape {mask.shape} does not match declared {tuple(src_res)}")
    if (h_src, w_src) == (h_dst, w_dst):
        return mask.copy()
    wy = _overlap_weights(h_src, h_dst)
    wx = _overlap_weights(w_src, w_dst)
    # covered area and true area per destination cell, in exact rationals
    # scaled by (h_dst*w_dst) so everything stays integral
    true_area = wy @ mask.astype(np.int64) @ wx.T
    total_area = wy.sum(axis=1)[:, None] * wx.sum(axis=1)[None, :]
    return 2 * true_area >= total_area


def _overlap_weights(n_src: int, n_dst: int) -> np.ndarray:
    # destination cell j spans [j*n_src, (j+1)*n_src) in units of 1/n_dst source cells
    w = np.zeros((n_dst, n_src), dtype=np.int64)
    for j in range(n_dst):
        lo, hi = j * n_src, (j + 1) * n_src
        for s in range(lo // n_dst, min(n_src, -(-hi // n_dst))):
            w[j, s] = max(0, min(hi, (s + 1) * n_dst) - max(lo, s * n_dst))
    return w


def resolve_overlaps(layout: LayoutSet) -> LayoutSet:
    """Assign each contested pixel to the highest (priority, id) region."""
    if not layout.regions:
        return layout.replace(masks=layout.masks.copy())
    rank = sorted(range(len(layout.regions)),
                  key=lambda i: (layout.regions[i].priority, layout.regions[i].id))
    out = np.zeros_like(layout.masks)
    taken = np.zeros((layout.frames, *layout.resolution), dtype=bool)
    for i in reversed(rank):
        out[:, i] = layout.masks[:, i] & ~taken
        taken |= out[:, i]
    return layout.replace(masks=out)


def merge_foreground(layout: LayoutSet, frame: int) -> np.ndarray:
    if not 0 <= frame < layout.frames:
        raise LayoutError(f"frame {frame} out of range [0, {layout.frames})")
    merged = np.zeros(layout.resolution, dtype=bool)
    for i, r in enumerate(layout.regions):
        if not r.preserve:
            merged |= layout.masks[frame, i]
    return merged


@dataclass
class CrossConditionMap:
    """Per-frame binary map over (query token, text position).

    ``values`` has shape (N, H*W, L); ``modulated`` flags the text positions
    that belong to some region span. Unflagged columns are left alone by the
    modulation; their entries in ``values`` are zero.
    """

    values: np.ndarray
    modulated: np.ndarray
    # text position -> owning region id (0 for unmodulated positions)
    owner: np.ndarray


def build_cross_condition(layout: LayoutSet,
                          prompt_spans: Mapping[int, Sequence[range] | range],
                          seq_len: int) -> CrossConditionMap:
    owner = np.zeros(seq_len, dtype=np.int64)
    for region_id, spans in prompt_spans.items():
        layout.index_of(region_id)
        if isinstance(spans, range):
            spans = [spans]
        for span in spans:
            for y in span:
                if not 0 <= y < seq_len:
                    raise LayoutError(f"span position {y} outside [0, {seq_len})")
                if owner[y]:
                    raise LayoutError("ambiguous token ownership")
                owner[y] = region_id
    n = layout.frames
    h, w = layout.resolution
    values = np.zeros((n, h * w, seq_len), dtype=np.float64)
    for region_id in prompt_spans:
        cols = owner == region_id
        m = layout.masks[:, layout.index_of(region_id)].reshape(n, h * w)
        values[:, :, cols] = m[:, :, None]
    return CrossConditionMap(values=values, modulated=owner > 0, owner=owner)


def region_labels(layout: LayoutSet) -> np.ndarray:
    """Per-frame token labels of shape (N, H*W); 0 marks background.

    Two tokens (in any frames) form a positive self-attention pair iff
    their labels are equal.
    """
    n = layout.frames
    h, w = layout.resolution
    labels = np.zeros((n, h * w), dtype=np.int64)
    for i, r in enumerate(layout.regions):
        m = layout.masks[:, i].reshape(n, h * w)
        if np.any(labels[m] != 0):
            raise LayoutError("layout is not overlap-resolved")
        labels[m] = r.id
    return labels


def self_condition(labels: np.ndarray) -> np.ndarray:
    """Dense R^self over all N*T tokens. Only for small inputs and tests."""
    flat = np.asarray(labels).reshape(-1)
    return (flat[:, None] == flat[None, :]).astype(np.float64)


def region_area_fraction(layout: LayoutSet, frame: int, region_id: int) -> float:
    m = layout.mask(frame, region_id)
    return float(np.count_nonzero(m)) / m.size


def area_table(layout: LayoutSet) -> dict[int, np.ndarray]:
    """Per-frame area fractions for each region id, background (0) included."""
    n = layout.frames
    h, w = layout.resolution
    areas = {r.id: layout.masks[:, i].reshape(n, -1).mean(axis=1)
             for i, r in enumerate(layout.regions)}
    covered = layout.masks.any(axis=1).reshape(n, -1).mean(axis=1)
    areas[0] = 1.0 - covered
    return areas
