"""File formats: binary PGM/PPM images, raw little-endian float32 tensors
with JSON sidecars, and layout manifests."""

from __future__ import annotations

import contextlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .layout import Level, LayoutSet, RegionSpec
from .synth import AMPLITUDE

MASK_PATTERN = "mask_f{frame:03}_r{region}.pgm"


class FormatError(ValueError):
    pass


def write_pgm(path: str | Path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise FormatError(f"PGM needs a 2-D grid, got shape {grid.shape}")
    if grid.dtype == bool:
        grid = grid.astype(np.uint8) * 255
    data = np.asarray(grid, dtype=np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def _header_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _header_tokens(raw, 4)
    if magic != b"P5" or int(maxval) != 255:
        raise FormatError(f"{path}: expected 8-bit binary PGM")
    w, h = int(w), int(h)
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=offset)
    return data.reshape(h, w).copy()


def read_mask(path: str | Path) -> np.ndarray:
    return read_pgm(path) >= 128


def write_ppm(path: str | Path, frame: np.ndarray) -> None:
    """Preview of an RGB latent frame, palette range mapped to 0..255."""
    unit = np.asarray(frame, dtype=np.float64) / AMPLITUDE
    rgb = np.clip((unit + 1.0) * 127.5 + 0.5, 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def normalized_pgm(grid: np.ndarray) -> np.ndarray:
    """Per-map normalization to 0..255; a constant map becomes mid-gray."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi - lo <= 0:
        return np.full(g.shape, 128, dtype=np.uint8)
    return np.round((g - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_tensor(path: str | Path, array, **meta) -> None:
    """Raw little-endian float32 blob at ``path`` plus ``path.json`` sidecar."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    path = Path(path)
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "order": "row-major", "dtype": "float32-le", **meta}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"{path}: {data.size} floats do not fill shape {shape}")
    return data.reshape(shape).astype(np.float32), meta


def write_json(path: str | Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


@contextlib.contextmanager
def staged_dir(target: str | Path):
    """Yield a temp directory that replaces ``target`` only if the block succeeds."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def save_layout(directory: str | Path, layout: LayoutSet, extra_regions: dict | None = None) -> None:
    """Write one PGM per (frame, region) and ``layout.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in range(layout.frames):
        for r in layout.regions:
            write_pgm(directory / MASK_PATTERN.format(frame=f, region=r.id), layout.mask(f, r.id))
    regions = []
    for r in layout.regions:
        entry = {"id": r.id, "level": r.level.value, "priority": r.priority,
                 "prompt": " ".join(r.prompt_tokens), "preserve": r.preserve,
                 "mask": MASK_PATTERN.replace("{region}", str(r.id))}
        entry.update((extra_regions or {}).get(r.id, {}))
        regions.append(entry)
    write_json(directory / "layout.json", {
        "frames": layout.frames, "resolution": list(layout.resolution),
        "global_prompt": " ".join(layout.global_prompt_tokens), "regions": regions})


def load_layout(manifest: str | Path) -> LayoutSet:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "layout.json"
    data = json.loads(manifest.read_text())
    base = manifest.parent
    frames = int(data["frames"])
    h, w = data["resolution"]
    regions, masks = [], []
    for entry in data["regions"]:
        spec = RegionSpec(id=int(entry["id"]), prompt_tokens=tuple(entry["prompt"].split()),
                          level=Level(entry.get("level", "instance")),
                          priority=int(entry.get("priority", 1)),
                          preserve=bool(entry.get("preserve", False)))
        pattern = entry.get("mask", MASK_PATTERN.replace("{region}", str(spec.id)))
        per_frame = []
        for f in range(frames):
            m = read_mask(base / pattern.format(frame=f, region=spec.id))
            if m.shape != (h, w):
                raise FormatError(f"mask {pattern.format(frame=f, region=spec.id)} is "
                                  f"{m.shape}, layout declares {(h, w)}")
            per_frame.append(m)
        regions.append(spec)
        masks.append(np.stack(per_frame))
    arr = np.stack(masks, axis=1) if masks else np.zeros((frames, 0, h, w), dtype=bool)
    return LayoutSet(regions, arr, tuple(data.get("global_prompt", "").split()))
