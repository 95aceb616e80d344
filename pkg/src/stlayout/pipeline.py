"""End-to-end edit: invert, build the layout, denoise under layout-guided
attention, blend, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from . import blend as blend_mod
from .clustering import ClusterLayout, cluster_frames, collect_features, layout_from_clusters, match_clusters
from .config import EditConfig
from .diffusion import (AttentionControl, ToyDenoiser, Trajectory, ddim_denoise, ddim_invert,
                        embed_prompt, make_schedule)
from .diffusion.denoiser import NO_CONTROL
from .diffusion.schedule import SchedulerParams
from .layout import (LayoutError, LayoutSet, RegionSpec, area_table, build_cross_condition,
                     region_labels, resample_mask, resolve_overlaps)
from .metrics import MetricReport, attention_mass, build_report
from .modulation import Schedule, cross_lambda, self_lambda
from .synth import PALETTE, colour

log = logging.getLogger(__name__)

LayoutSource = Union[LayoutSet, ClusterLayout, None]


def default_checkpoint() -> Path:
    return Path(str(resources.files("stlayout").joinpath("data/toy_checkpoint")))


def load_denoiser(path: str | Path | None = None) -> ToyDenoiser:
    model = ToyDenoiser.load(path or default_checkpoint())
    model.eval()
    return model


class LayoutControl(AttentionControl):
    """Attention hooks for one denoising step."""

    def __init__(self, cross=None, self_=None, record=False):
        self.cross = cross
        self.self_ = self_
        self.record_weights = record
        self.weights: dict[tuple[str, int], np.ndarray] = {}

    def self_modulation(self, block):
        return self.self_

    def cross_modulation(self, block):
        return self.cross

    def needs_weights(self, kind, block):
        return self.record_weights

    @property
    def modulates(self):
        return self.cross is not None or self.self_ is not None

    def record(self, kind, block, weights, hidden):
        if self.record_weights and weights is not None:
            # head-averaged, batch item 0
            self.weights[(kind, block)] = weights[0].mean(dim=0).numpy()


@dataclass
class Conditioning:
    """Everything the attention hooks need, fixed for a whole run."""

    layout: LayoutSet
    labels: np.ndarray
    areas: dict[int, np.ndarray]
    cross_values: torch.Tensor
    cross_exempt: torch.Tensor
    owner: np.ndarray
    self_condition: torch.Tensor
    spans: dict[int, range]


def prepare_conditioning(layout: LayoutSet, spans: dict[int, range], seq_len: int) -> Conditioning:
    layout = resolve_overlaps(layout)
    cross = build_cross_condition(layout, spans, seq_len)
    labels = region_labels(layout)
    flat = torch.as_tensor(labels.reshape(-1))
    return Conditioning(layout=layout, labels=labels, areas=area_table(layout),
                        cross_values=torch.as_tensor(cross.values, dtype=torch.float32),
                        cross_exempt=torch.as_tensor(~cross.modulated), owner=cross.owner,
                        self_condition=flat[:, None] == flat[None, :], spans=dict(spans))


@dataclass
class AttentionProbe:
    """Head-averaged attention recorded at one denoising step, per block."""

    step: int
    level: int
    cross: dict[int, np.ndarray] = field(default_factory=dict)
    self_: dict[int, np.ndarray] = field(default_factory=dict)


def make_hook(cond: Conditioning, params: SchedulerParams, config: EditConfig,
              probes: dict[int, AttentionProbe], probe_steps=()):
    cross_sched = Schedule("cross", config.xi_cross.exp, config.xi_cross.coef)
    self_sched = Schedule("self", config.xi_self.exp, config.xi_self.coef)
    probe_steps = set(probe_steps)

    def hook(step: int, level: int, active: bool) -> AttentionControl:
        record = step in probe_steps
        if not (active or record):
            return NO_CONTROL
        t = params.normalized(level)
        cross = self_ = None
        if active and config.cross_modulation:
            lam = torch.as_tensor(cross_lambda(cond.owner, cond.areas, t, cross_sched),
                                  dtype=torch.float32)
            cross = {"condition": cond.cross_values, "lam": lam, "exempt": cond.cross_exempt,
                     "scope": config.scope}
        if active and config.self_modulation:
            lam = torch.as_tensor(self_lambda(cond.labels, cond.areas, t, self_sched),
                                  dtype=torch.float32)
            self_ = {"condition": cond.self_condition, "lam": lam, "scope": config.scope}
        control = _ProbingControl(cross, self_, record, probes, step, level) if record \
            else LayoutControl(cross, self_)
        return control

    return hook


class _ProbingControl(LayoutControl):
    def __init__(self, cross, self_, record, probes, step, level):
        super().__init__(cross, self_, record)
        self.probe = probes.setdefault(step, AttentionProbe(step, level))

    def record(self, kind, block, weights, hidden):
        if weights is None:
            return
        w = weights[0].mean(dim=0).numpy()
        if kind == "cross":
            self.probe.cross[block] = w
        else:
            self.probe.self_[block] = w


def cross_mass(probe: AttentionProbe, cond: Conditioning, blocks=None) -> dict[int, float]:
    """Per region: mean cross-attention weight its pixels put on its own prompt span,
    averaged over ``blocks`` (default all recorded)."""
    out = {}
    blocks = sorted(probe.cross) if blocks is None else list(blocks)
    n, t = cond.labels.shape
    for rid, span in cond.spans.items():
        rows = cond.labels.reshape(-1) == rid
        if not rows.any():
            continue
        positive = np.zeros(len(cond.owner), dtype=bool)
        positive[list(span)] = True
        vals = [attention_mass(probe.cross[b].reshape(n * t, -1)[rows], positive[None, :])
                for b in blocks]
        out[rid] = float(np.mean(vals))
    return out


def self_leakage(probe: AttentionProbe, cond: Conditioning, blocks=None) -> dict[int, float]:
    """Per region: mean self-attention weight its tokens put on other regions' tokens."""
    out = {}
    blocks = sorted(probe.self_) if blocks is None else list(blocks)
    flat = cond.labels.reshape(-1)
    for rid in cond.spans:
        rows = flat == rid
        if not rows.any():
            continue
        outside = flat != rid
        vals = [attention_mass(probe.self_[b][rows], outside[None, :]) for b in blocks]
        out[rid] = float(np.mean(vals))
    return out


@dataclass
class EditResult:
    edited: np.ndarray
    report: MetricReport
    layout: LayoutSet
    trajectory: Trajectory
    probes: dict[int, AttentionProbe]
    cross_mass: dict[int, float]
    self_leakage: dict[int, float]
    tokens: tuple[str, ...]
    conditioning: Conditioning


def descriptor_for(region) -> np.ndarray:
    if region.descriptor:
        return colour(region.descriptor)
    for word in region.target_prompt.split():
        if word in PALETTE:
            return colour(word)
    raise LayoutError(f"region {region.id}: no colour word in {region.target_prompt!r}")


def _layout_for(config: EditConfig, source: LayoutSource, trajectory: Trajectory,
                frames: int, resolution: tuple[int, int]) -> LayoutSet:
    specs = {r.id: RegionSpec(r.id, tuple(r.target_prompt.split()), r.level, r.priority, r.preserve)
             for r in config.regions}
    if source is None or isinstance(source, ClusterLayout):
        clusters = source
        if clusters is None:
            cc = config.clustering
            feats = collect_features(trajectory, cc.block, cc.level_index, frames)
            clusters = match_clusters(cluster_frames(feats, cc.k, seed=cc.seed))
        bindings = {}
        for i, r in enumerate(config.regions):
            if r.cluster is None:
                raise LayoutError(f"regions[{i}]: cluster layouts need a cluster id per region")
            bindings[r.cluster] = specs[r.id]
        return layout_from_clusters(clusters, bindings, resolution, config.target_tokens)
    masks = []
    for r in config.regions:
        try:
            m = source.masks[:, source.index_of(r.id)]
        except LayoutError:
            raise LayoutError(f"layout has no region {r.id}") from None
        if m.shape[0] != frames:
            raise LayoutError(f"layout has {m.shape[0]} frames, video has {frames}")
        if m.shape[1:] != resolution:
            m = np.stack([resample_mask(f, None, resolution) for f in m])
        masks.append(m)
    layout = LayoutSet([specs[r.id] for r in config.regions], np.stack(masks, axis=1),
                       config.target_tokens)
    layout.check_part_priorities()
    return layout


def run_edit(config: EditConfig, video: np.ndarray, layout_source: LayoutSource = None,
             denoiser: Optional[ToyDenoiser] = None, flow: Optional[np.ndarray] = None,
             probe_steps=None, trajectory: Optional[Trajectory] = None) -> EditResult:
    """Run one edit. ``video`` is (N, H, W, C) in latent units.

    ``trajectory`` may carry a cached inversion of the same video and source
    prompt, to share it between paired runs.
    """
    config.validate()
    torch.manual_seed(config.seed)
    denoiser = denoiser or load_denoiser(config.checkpoint)
    params = make_schedule(denoiser.dims.train_steps, sample_steps=config.sample_steps)
    z0 = torch.as_tensor(np.asarray(video, dtype=np.float32))
    n, h, w, _ = z0.shape
    target = embed_prompt(config.target_tokens)
    source = embed_prompt(config.source_tokens)

    if trajectory is None:
        cc = config.clustering
        record = [(cc.block, cc.level_index)] if not isinstance(layout_source, LayoutSet) else []
        trajectory = ddim_invert(z0, denoiser, source, params, record=record)
    layout = _layout_for(config, layout_source, trajectory, n, (h, w))
    spans = {r.id: range(s + 1, e + 1) for r, (s, e) in zip(config.regions, config.region_spans())}
    cond = prepare_conditioning(layout, spans, target.length)

    probes: dict[int, AttentionProbe] = {}
    steps = {config.probe} if probe_steps is None else set(probe_steps)
    hook = make_hook(cond, params, config, probes, steps)

    blend_hook = None
    if config.blend.enabled:
        fg = [np.logical_or.reduce([cond.layout.masks[f, i] for i, r in enumerate(cond.layout.regions)
                                    if not r.preserve] or [np.zeros((h, w), bool)])
              for f in range(n)]
        mask = blend_mod.aggregate_masks(fg, mode=config.blend.mode)
        if config.blend.dilate:
            mask = blend_mod.dilate(mask, config.blend.dilate)
        total = config.sample_steps
        stop = total if config.blend.stop is None else config.blend.stop
        # denoising step j lands on level index total-1-j
        levels = range(total - stop, total - config.blend.start)
        blend_hook = blend_mod.blend_hook(trajectory, mask, levels)

    edited = ddim_denoise(trajectory.noisiest, denoiser, target, params,
                          modulation_hook=hook, blend_hook=blend_hook,
                          modulate_steps=config.modulate_steps,
                          replay=trajectory if config.replay_mode else None,
                          source_prompt=source)
    edited_np = edited.numpy()

    probe = probes.get(config.probe)
    masses = cross_mass(probe, cond) if probe else {}
    leakage = self_leakage(probe, cond) if probe else {}
    region_masks = {r.id: cond.layout.masks[:, i] for i, r in enumerate(cond.layout.regions)}
    targets = {r.id: descriptor_for(r) for r in config.regions if not r.preserve}
    palette = {k: np.array(v) for k, v in PALETTE.items()}
    if flow is None:
        flow = np.zeros((max(n - 1, 1), h, w, 2))
    report = build_report(edited_np, flow, region_masks, targets, palette, masses) if n > 1 else None
    return EditResult(edited=edited_np, report=report, layout=cond.layout, trajectory=trajectory,
                      probes=probes, cross_mass=masses, self_leakage=leakage,
                      tokens=target.tokens, conditioning=cond)
