"""Command-line surface: synth, invert, cluster, edit, eval, attn-dump.

Exit codes: 0 success, 1 usage or validation error, 2 runtime error.
Every command builds its output in a temporary sibling directory and renames
it into place only after all computation has succeeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as fio
from .clustering import ClusterLayout, ClusteringError, cluster_frames, collect_features, match_clusters
from .config import ConfigError, EditConfig
from .diffusion import DivergenceError, Trajectory, ddim_invert, embed_prompt, make_schedule
from .diffusion.text import PromptError
from .layout import LayoutError, LayoutSet, Level, RegionSpec
from .metrics import MetricError, build_report
from .pipeline import cross_mass, descriptor_for, load_denoiser, run_edit, self_leakage
from .synth import AMPLITUDE, PALETTE, SceneError, SyntheticScene, random_scene, scene_prompt, synth_video, two_shape_scene

log = logging.getLogger("stlayout")


class UsageError(Exception):
    """Bad input that the user can fix: exit code 1."""


VALIDATION_ERRORS = (UsageError, ConfigError, LayoutError, SceneError, fio.FormatError,
                     PromptError, ClusteringError, MetricError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------- helpers

def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _write_frames(out: Path, frames: np.ndarray, name: str = "frames") -> None:
    fio.write_tensor(out / f"{name}.f32", frames, layout="N,H,W,C",
                     units=f"latent [-{AMPLITUDE:g}, {AMPLITUDE:g}]")
    preview = out / "preview"
    preview.mkdir(exist_ok=True)
    for i, f in enumerate(frames):
        fio.write_ppm(preview / f"{name}_{i:03}.ppm", f)


def _read_video(directory: Path) -> np.ndarray:
    frames, _ = fio.read_tensor(_require(Path(directory) / "frames.f32", "video frames"))
    if frames.ndim != 4:
        raise fio.FormatError(f"{directory}/frames.f32: expected (N, H, W, C), got {frames.shape}")
    return frames


def _read_flow(path: Path | None, frames: np.ndarray) -> np.ndarray | None:
    if path is None:
        return None
    path = Path(path)
    if path.is_dir():
        path = path / "flow.f32"
    flow, _ = fio.read_tensor(_require(path, "flow"))
    return flow


def _save_trajectory(out: Path, traj: Trajectory, prompt: tuple[str, ...], sample_steps: int) -> None:
    fio.write_tensor(out / "latents.f32", traj.latents.numpy(), layout="S+1,N,H,W,C")
    fio.write_tensor(out / "eps.f32", traj.eps.numpy(), layout="S+1,N,H,W,C")
    feats = []
    for (block, k), value in sorted(traj.features.items()):
        name = f"features_b{block}_l{k:03}.f32"
        fio.write_tensor(out / name, value.numpy(), layout="N*T,d")
        feats.append({"block": block, "level_index": k, "file": name})
    fio.write_json(out / "trajectory.json", {
        "levels": [int(v) for v in traj.levels], "prompt": " ".join(prompt),
        "sample_steps": sample_steps, "features": feats})


def _load_trajectory(directory: Path) -> tuple[Trajectory, dict]:
    directory = Path(directory)
    meta = json.loads(_require(directory / "trajectory.json", "inversion manifest").read_text())
    latents, _ = fio.read_tensor(directory / "latents.f32")
    eps, _ = fio.read_tensor(directory / "eps.f32")
    features = {}
    for entry in meta["features"]:
        arr, _ = fio.read_tensor(directory / entry["file"])
        features[(entry["block"], entry["level_index"])] = torch.from_numpy(arr)
    traj = Trajectory(np.asarray(meta["levels"]), torch.from_numpy(latents), torch.from_numpy(eps),
                      features)
    return traj, meta


def _save_clusters(out: Path, clusters: ClusterLayout, resolution: tuple[int, int], meta: dict) -> None:
    n = clusters.labels.shape[0]
    h, w = resolution
    grid = clusters.labels.reshape(n, h, w)
    for f in range(n):
        for c in range(clusters.k):
            fio.write_pgm(out / fio.MASK_PATTERN.format(frame=f, region=c), grid[f] == c)
    fio.write_tensor(out / "centroids.f32", clusters.centroids, layout="N,k,d")
    fio.write_json(out / "clusters.json", {
        "k": clusters.k, "frames": n, "resolution": [h, w],
        "labels": grid.astype(int).tolist(), **meta})


def _load_clusters(directory: Path) -> ClusterLayout:
    meta = json.loads((directory / "clusters.json").read_text())
    labels = np.asarray(meta["labels"], dtype=np.int64)
    centroids, _ = fio.read_tensor(directory / "centroids.f32")
    return ClusterLayout(labels.reshape(labels.shape[0], -1), centroids, int(meta["k"]))


def _load_layout_source(path: str | None):
    if path is None:
        return None
    p = Path(path)
    if p.is_dir():
        if (p / "clusters.json").exists():
            return _load_clusters(p)
        p = p / "layout.json"
    _require(p, "layout")
    if p.name == "clusters.json":
        return _load_clusters(p.parent)
    return fio.load_layout(p)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    if args.scene == "two-shape":
        colours = args.colours.split(",")
        if len(colours) != 2:
            raise UsageError("--colours needs two comma-separated colours")
        scene = two_shape_scene(*colours, frames=args.frames, size=args.size)
    else:
        scene = random_scene(args.seed, frames=args.frames, size=args.size, n_shapes=args.shapes)
    scene.noise = args.noise
    video = synth_video(scene, seed=args.seed)
    with fio.staged_dir(args.out) as out:
        _write_frames(out, video["frames"])
        (out / "flow").mkdir()
        fio.write_tensor(out / "flow" / "flow.f32", video["flow"], layout="N-1,H,W,2",
                         components="dx,dy")
        prompt = tuple(scene_prompt(scene).split())
        regions = [RegionSpec(i + 1, (s.color, s.kind), Level.INSTANCE) for i, s in enumerate(scene.shapes)]
        fio.save_layout(out / "masks", LayoutSet(regions, video["masks"], prompt))
        fio.write_json(out / "manifest.json", {
            "seed": args.seed, "scene": scene.to_dict(), "prompt": " ".join(prompt),
            "frames": "frames.f32", "flow": "flow/flow.f32", "layout": "masks/layout.json"})


def cmd_invert(args) -> None:
    frames = _read_video(Path(args.video))
    denoiser = load_denoiser(args.checkpoint)
    params = make_schedule(denoiser.dims.train_steps, sample_steps=args.steps)
    prompt = embed_prompt(args.prompt)
    if args.record_level >= args.steps + 1:
        raise UsageError(f"--record-level must be below {args.steps + 1}")
    traj = ddim_invert(torch.from_numpy(frames), denoiser, prompt, params,
                       record=[(args.record_block, args.record_level)])
    with fio.staged_dir(args.out) as out:
        _save_trajectory(out, traj, prompt.tokens[1:-1], args.steps)


def cmd_cluster(args) -> None:
    traj, meta = _load_trajectory(Path(args.inversion))
    latents = traj.source
    n, h, w, _ = latents.shape
    key = (args.block, args.level_index)
    if key not in traj.features:
        available = ", ".join(f"block {b} level {k}" for b, k in sorted(traj.features)) or "none"
        raise UsageError(f"inversion did not record block {args.block} level {args.level_index} "
                         f"(available: {available})")
    feats = collect_features(traj, args.block, args.level_index, n)
    clusters = match_clusters(cluster_frames(feats, args.k, seed=args.seed))
    with fio.staged_dir(args.out) as out:
        _save_clusters(out, clusters, (h, w), {"seed": args.seed, "block": args.block,
                                               "level_index": args.level_index})


def cmd_edit(args) -> None:
    if args.config is None:
        raise UsageError("edit requires --config <json>")
    config = EditConfig.load(_require(Path(args.config), "config"))
    if args.checkpoint:
        config.checkpoint = args.checkpoint
    if args.video is None:
        raise UsageError("edit requires --video <dir>")
    video_dir = Path(args.video)
    frames = _read_video(video_dir)
    flow = _read_flow(video_dir / "flow" if (video_dir / "flow").exists() else None, frames)
    source = _load_layout_source(args.layout)
    trajectory = None
    if args.inversion:
        trajectory, meta = _load_trajectory(Path(args.inversion))
        if meta["sample_steps"] != config.sample_steps or tuple(meta["prompt"].split()) != config.source_tokens:
            raise UsageError("--inversion was computed with a different source prompt or step count")
        if not np.array_equal(trajectory.source.numpy(), frames):
            raise UsageError("--inversion does not match --video")
    probe_steps = sorted(set(args.dump_step or [config.probe]))
    for s in probe_steps:
        if not 0 <= s < config.sample_steps:
            raise UsageError(f"--dump-step {s} outside [0, {config.sample_steps})")
    result = run_edit(config, frames, layout_source=source, flow=flow, probe_steps=probe_steps,
                      trajectory=trajectory)
    with fio.staged_dir(args.out) as out:
        _write_frames(out, result.edited)
        fio.write_json(out / "config.json", config.to_dict())
        fio.save_layout(out / "layout", result.layout)
        if result.report is not None:
            (out / "report.csv").write_text(result.report.to_csv())
            (out / "report.json").write_text(result.report.to_json())
        _write_attention(out / "attention", result)


def _write_attention(directory: Path, result) -> None:
    directory.mkdir()
    cond = result.conditioning
    index = {"tokens": list(result.tokens), "labels_shape": list(cond.labels.shape),
             "spans": {str(k): [v.start, v.stop] for k, v in sorted(cond.spans.items())},
             "records": []}
    fio.write_tensor(directory / "labels.f32", cond.labels.astype(np.float32), layout="N,T")
    for step in sorted(result.probes):
        probe = result.probes[step]
        for block in sorted(probe.cross):
            entry = {"step": step, "level": int(probe.level), "layer": block,
                     "cross": f"step{step:03}_b{block}_cross.f32",
                     "self": f"step{step:03}_b{block}_self.f32",
                     "cross_mass": {str(k): v for k, v in sorted(cross_mass(probe, cond, [block]).items())},
                     "self_leakage": {str(k): v for k, v in
                                      sorted(self_leakage(probe, cond, [block]).items())}}
            fio.write_tensor(directory / entry["cross"], probe.cross[block], layout="N,T,L")
            fio.write_tensor(directory / entry["self"], probe.self_[block], layout="N*T,N*T")
            index["records"].append(entry)
    fio.write_json(directory / "index.json", index)


def cmd_eval(args) -> None:
    edited_dir = Path(args.edited)
    edited = _read_video(edited_dir)
    source = _read_video(Path(args.source))
    if edited.shape != source.shape:
        raise UsageError(f"edited video {edited.shape} does not match source {source.shape}")
    flow = _read_flow(Path(args.flow), source)
    config = EditConfig.load(_require(Path(args.config) if args.config else edited_dir / "config.json",
                                      "edit config"))
    layout = fio.load_layout(_require(Path(args.layout) if args.layout else edited_dir / "layout",
                                      "layout"))
    region_masks = {r.id: layout.masks[:, i] for i, r in enumerate(layout.regions)}
    targets = {r.id: descriptor_for(r) for r in config.regions if not r.preserve}
    attention = {}
    index_path = edited_dir / "attention" / "index.json"
    if index_path.exists():
        index = json.loads(index_path.read_text())
        probe = config.probe
        rows = [r for r in index["records"] if r["step"] == probe]
        for rid in targets:
            vals = [r["cross_mass"][str(rid)] for r in rows if str(rid) in r["cross_mass"]]
            if vals:
                attention[rid] = float(np.mean(vals))
    palette = {k: np.array(v) for k, v in PALETTE.items()}
    report = build_report(edited, flow, region_masks, targets, palette, attention)
    target = Path(args.report)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp_csv = target.with_name(f".{target.name}.tmp")
    json_path = target.with_suffix(".json")
    tmp_json = json_path.with_name(f".{json_path.name}.tmp")
    tmp_csv.write_text(report.to_csv())
    tmp_json.write_text(report.to_json())
    tmp_csv.replace(target)
    tmp_json.replace(json_path)


def cmd_attn_dump(args) -> None:
    run = Path(args.run) / "attention"
    index = json.loads(_require(run / "index.json", "attention index").read_text())
    match = [r for r in index["records"] if r["step"] == args.step and r["layer"] == args.layer]
    if not match:
        have = sorted({(r["step"], r["layer"]) for r in index["records"]})
        raise UsageError(f"no attention recorded at step {args.step} layer {args.layer} "
                         f"(recorded: {have})")
    rec = match[0]
    labels, _ = fio.read_tensor(run / "labels.f32")
    n, t = labels.shape
    layout = fio.load_layout(Path(args.run) / "layout")
    h, w = layout.resolution
    maps = []
    with fio.staged_dir(args.out) as out:
        if args.kind == "cross":
            weights, _ = fio.read_tensor(run / rec["cross"])
            for f in range(n):
                for j, token in enumerate(index["tokens"]):
                    name = f"cross_f{f:03}_t{j:02}.pgm"
                    fio.write_pgm(out / name, fio.normalized_pgm(weights[f, :, j].reshape(h, w)))
                    maps.append({"frame": f, "token": j, "word": token, "file": name})
        else:
            weights, _ = fio.read_tensor(run / rec["self"])
            flat = labels.reshape(-1)
            for rid in sorted({int(v) for v in flat}):
                rows = flat == rid
                received = weights[rows].mean(axis=0).reshape(n, h, w)
                for f in range(n):
                    name = f"self_f{f:03}_r{rid}.pgm"
                    fio.write_pgm(out / name, fio.normalized_pgm(received[f]))
                    maps.append({"frame": f, "region": rid, "file": name})
        fio.write_json(out / "index.json", {"step": args.step, "layer": args.layer,
                                            "kind": args.kind, "normalization": "per-map min-max",
                                            "maps": maps})


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stlayout", description="Layout-guided video editing on a toy diffusion stack.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic moving-shape video")
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene", choices=["random", "two-shape"], default="random")
    p.add_argument("--shapes", type=int, default=2)
    p.add_argument("--colours", default="red,red", help="two-shape scene colours, e.g. red,red")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("invert", help="DDIM-invert a video and record features")
    p.add_argument("--video", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--record-block", type=int, default=1)
    p.add_argument("--record-level", type=int, default=25)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("cluster", help="k-means layout from inversion features")
    p.add_argument("--inversion", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--block", type=int, default=1)
    p.add_argument("--level-index", type=int, default=25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("edit", help="layout-guided edit")
    p.add_argument("--config")
    p.add_argument("--video")
    p.add_argument("--layout", help="layout manifest or cluster directory")
    p.add_argument("--inversion", help="reuse a saved inversion")
    p.add_argument("--dump-step", type=int, action="append",
                   help="record attention at this denoising step (repeatable)")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="metric report for an edited video")
    p.add_argument("--edited", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--config")
    p.add_argument("--layout")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-dump", help="attention heatmaps from an edit run")
    p.add_argument("--run", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--kind", choices=["cross", "self"], default="cross")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"stlayout {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, RuntimeError, OSError, ValueError) as exc:
        print(f"stlayout {args.command}: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
