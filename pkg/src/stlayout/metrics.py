"""Desk-scale editing metrics.

Prompt alignment and frame consistency stand in for CLIP-based scores: the
first compares region colours against target colour descriptors, the second
embeds frames with a fixed random linear patch projection. Warp error uses
ground-truth flow from the synthetic generator.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .diffusion.denoiser import substream

QEDIT_EPS = 1e-4


class MetricError(ValueError):
    pass


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Sample img (H, W, C) at float coordinates; returns (values, in_bounds)."""
    h, w = img.shape[:2]
    inb = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    yc = np.clip(ys, 0, h - 1)
    xc = np.clip(xs, 0, w - 1)
    y0 = np.minimum(np.floor(yc).astype(int), h - 1)
    x0 = np.minimum(np.floor(xc).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (yc - y0)[..., None]
    wx = (xc - x0)[..., None]
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bottom = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bottom * wy, inb


def warp_error(frames: np.ndarray, flow: np.ndarray) -> float:
    """Mean |frame_i - warp(frame_{i+1})| over in-bounds samples, averaged
    over consecutive pairs, x100.

    ``flow[i]`` is (H, W, 2) holding (dx, dy): where the content at each
    pixel of frame i sits in frame i+1.
    """
    frames = np.asarray(frames, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    n, h, w = frames.shape[:3]
    if n < 2:
        raise MetricError("warp error needs at least two frames")
    if flow.shape[0] < n - 1 or flow.shape[1:] != (h, w, 2):
        raise MetricError(f"missing flow: need {n - 1} fields of shape ({h}, {w}, 2), "
                          f"got {flow.shape}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    errs = []
    for i in range(n - 1):
        warped, inb = bilinear_sample(frames[i + 1], yy + flow[i, ..., 1], xx + flow[i, ..., 0])
        if not inb.any():
            continue
        errs.append(np.abs(frames[i] - warped)[inb].mean())
    return 100.0 * float(np.mean(errs)) if errs else 0.0


class PatchEmbedder:
    """Linear patch projection followed by mean pooling over patches."""

    def __init__(self, channels: int = 3, patch: int = 4, dim: int = 64, seed: int = 0):
        self.patch = patch
        rng = substream(seed, "embedder")
        self.weight = rng.standard_normal((patch * patch * channels, dim)) / patch

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        h, w, c = frame.shape
        p = self.patch
        hp, wp = h // p, w // p
        patches = (frame[:hp * p, :wp * p]
                   .reshape(hp, p, wp, p, c).transpose(0, 2, 1, 3, 4).reshape(hp * wp, -1))
        return (patches @ self.weight).mean(axis=0)


def mean_cosine(embeddings: Sequence[np.ndarray]) -> float:
    """Mean cosine similarity of consecutive embeddings, x100."""
    sims = []
    for a, b in zip(embeddings[:-1], embeddings[1:]):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        sims.append(float(a @ b) / (na * nb) if na > 0 and nb > 0 else 0.0)
    return 100.0 * float(np.mean(sims))


def frame_consistency(frames: np.ndarray, embedder=None) -> float:
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) < 2:
        raise MetricError("frame consistency needs at least two frames")
    embedder = embedder or PatchEmbedder(channels=frames.shape[-1])
    return mean_cosine([embedder(f) for f in frames])


def region_alignment(frames: np.ndarray, masks: np.ndarray,
                     descriptor: np.ndarray) -> list[float]:
    """Per-frame cosine (x100) between a region's mean colour and a descriptor.

    ``masks`` is (N, H, W); frames where the region is empty are skipped.
    """
    descriptor = np.asarray(descriptor, dtype=np.float64)
    scores = []
    for frame, m in zip(np.asarray(frames, dtype=np.float64), masks):
        if not m.any():
            continue
        mean = frame[m].mean(axis=0)
        denom = np.linalg.norm(mean) * np.linalg.norm(descriptor)
        scores.append(100.0 * float(mean @ descriptor) / denom if denom > 0 else 0.0)
    return scores


def prompt_alignment(frames: np.ndarray, region_masks: Mapping[int, np.ndarray],
                     targets: Mapping[int, np.ndarray]) -> float:
    """Mean over regions of the mean per-frame alignment, x100."""
    per_region = per_region_alignment(frames, region_masks, targets)
    return float(np.mean(list(per_region.values())))


def per_region_alignment(frames, region_masks, targets) -> dict[int, float]:
    out = {}
    for rid, descriptor in targets.items():
        if rid not in region_masks:
            raise MetricError(f"no descriptor region {rid} in layout")
        scores = region_alignment(frames, region_masks[rid], descriptor)
        if not scores:
            raise MetricError(f"region {rid} is empty in every frame")
        out[rid] = float(np.mean(scores))
    return out


def edit_accuracy(frames: np.ndarray, masks: np.ndarray, target: np.ndarray,
                  palette: Mapping[str, np.ndarray]) -> float:
    """Fraction of region pixels whose nearest palette colour is the target."""
    frames = np.asarray(frames, dtype=np.float64)
    pixels = frames[np.asarray(masks, dtype=bool)]
    if len(pixels) == 0:
        raise MetricError("region is empty in every frame")
    colours = np.stack([np.asarray(c, dtype=np.float64) for c in palette.values()])
    target = np.asarray(target, dtype=np.float64)
    t_idx = [i for i, c in enumerate(colours) if np.array_equal(c, target)]
    if not t_idx:
        colours = np.vstack([colours, target])
        t_idx = [len(colours) - 1]
    d = ((pixels[:, None, :] - colours[None]) ** 2).sum(-1)
    return float(np.mean(d.argmin(axis=1) == t_idx[0]))


def attention_mass(weights: np.ndarray, positive: np.ndarray) -> float:
    """Mean over rows of the weight falling on each row's positive keys.

    ``positive`` is a boolean array broadcastable to ``weights``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    positive = np.broadcast_to(np.asarray(positive, dtype=bool), weights.shape)
    if weights.shape[0] == 0:
        return 0.0
    return float(np.where(positive, weights, 0.0).sum(axis=-1).mean())


def q_edit(alignment: float, warp: float) -> float:
    if warp < 0:
        raise MetricError(f"warp error must be non-negative, got {warp}")
    return alignment / max(warp, QEDIT_EPS)


@dataclass
class MetricReport:
    clip_t_proxy: float
    clip_f_proxy: float
    warp_err: float
    q_edit: float
    edit_accuracy: dict[int, float] = field(default_factory=dict)
    attention_mass: dict[int, float] = field(default_factory=dict)
    region_alignment: dict[int, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float, str]]:
        rows = [("clip_t_proxy", self.clip_t_proxy, "video"),
                ("clip_f_proxy", self.clip_f_proxy, "video"),
                ("warp_err", self.warp_err, "video"),
                ("q_edit", self.q_edit, "video")]
        for name, table in (("edit_accuracy", self.edit_accuracy),
                            ("attention_mass", self.attention_mass),
                            ("region_alignment", self.region_alignment)):
            for rid in sorted(table):
                rows.append((name, table[rid], f"region:{rid}"))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value", "scope"])
        for name, value, scope in self.rows():
            writer.writerow([name, repr(float(value)), scope])
        return buf.getvalue()

    def to_json(self) -> str:
        data = asdict(self)
        for key in ("edit_accuracy", "attention_mass", "region_alignment"):
            data[key] = {str(k): v for k, v in sorted(data[key].items())}
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        for key in ("edit_accuracy", "attention_mass", "region_alignment"):
            data[key] = {int(k): v for k, v in data.get(key, {}).items()}
        return cls(**data)


def build_report(edited: np.ndarray, flow: np.ndarray,
                 region_masks: Mapping[int, np.ndarray] | None = None,
                 targets: Mapping[int, np.ndarray] | None = None,
                 palette: Mapping[str, np.ndarray] | None = None,
                 attention: Mapping[int, float] | None = None) -> MetricReport:
    warp = warp_error(edited, flow)
    consistency = frame_consistency(edited)
    align, per_region, accuracy = 0.0, {}, {}
    if targets:
        per_region = per_region_alignment(edited, region_masks, targets)
        align = float(np.mean(list(per_region.values())))
        if palette is not None:
            accuracy = {rid: edit_accuracy(edited, region_masks[rid], targets[rid], palette)
                        for rid in targets}
    return MetricReport(clip_t_proxy=align, clip_f_proxy=consistency, warp_err=warp,
                        q_edit=q_edit(align, warp), edit_accuracy=accuracy,
                        attention_mass=dict(attention or {}), region_alignment=per_region)
