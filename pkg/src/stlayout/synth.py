"""Synthetic moving-shape videos with exact flow and masks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion.denoiser import substream

# latent units per colour step; unit colours live in [-1, 1] per channel
AMPLITUDE = 1.0

_UNIT: dict[str, tuple[float, float, float]] = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "magenta": (1.0, -1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (-1.0, -1.0, -1.0),
    "gray": (0.0, 0.0, 0.0),
}
PALETTE: dict[str, tuple[float, float, float]] = {
    k: tuple(AMPLITUDE * c for c in v) for k, v in _UNIT.items()}
SHAPE_COLOURS = ("red", "green", "blue", "yellow", "cyan", "magenta")


class SceneError(ValueError):
    pass


def colour(name: str) -> np.ndarray:
    try:
        return np.array(PALETTE[name], dtype=np.float64)
    except KeyError:
        raise SceneError(f"unknown colour {name!r}") from None


@dataclass
class Shape:
    kind: str
    color: str
    # square: top-left corner; circle: centre (pixel units)
    position: tuple[int, int]
    size: int
    # (dx, dy) pixels per frame
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("square", "circle"):
            raise SceneError(f"unknown shape kind {self.kind!r}")
        colour(self.color)
        if self.size < 1:
            raise SceneError("shape size must be >= 1")
        self.position = tuple(int(p) for p in self.position)
        self.velocity = tuple(float(v) for v in self.velocity)

    def extent(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1) inclusive pixel bounds at offset zero."""
        x, y = self.position
        if self.kind == "square":
            return x, y, x + self.size - 1, y + self.size - 1
        return x - self.size, y - self.size, x + self.size, y + self.size

    def render(self, h: int, w: int, offset: tuple[int, int]) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w]
        ox, oy = offset
        x, y = self.position[0] + ox, self.position[1] + oy
        if self.kind == "square":
            return (xx >= x) & (xx < x + self.size) & (yy >= y) & (yy < y + self.size)
        return (xx - x) ** 2 + (yy - y) ** 2 <= self.size ** 2


@dataclass
class SyntheticScene:
    shapes: list[Shape]
    frames: int = 4
    size: tuple[int, int] = (16, 16)
    background: str = "gray"
    noise: float = 0.0

    def __post_init__(self):
        self.shapes = [s if isinstance(s, Shape) else Shape(**s) for s in self.shapes]
        self.size = tuple(self.size)
        colour(self.background)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        return d


def _offsets(shape: Shape, frames: int, h: int, w: int) -> list[tuple[int, int]]:
    x0, y0, x1, y1 = shape.extent()
    if x0 < 1 or y0 < 1 or x1 > w - 2 or y1 > h - 2:
        raise SceneError(f"{shape.kind} at {shape.position} lies outside the 1 px margin")
    vx, vy = shape.velocity
    last = frames - 1
    if last > 0:
        # clip so the final frame still respects the margin
        vx = min(max(vx, (1 - x0) / last), (w - 2 - x1) / last)
        vy = min(max(vy, (1 - y0) / last), (h - 2 - y1) / last)
    return [(math.floor(i * vx + 0.5), math.floor(i * vy + 0.5)) for i in range(frames)]


def synth_video(scene: SyntheticScene, seed: int = 0) -> dict:
    """Render frames (N, H, W, C), flow (N-1, H, W, 2) as (dx, dy) and
    per-shape masks (N, S, H, W)."""
    h, w = scene.size
    n = scene.frames
    if n < 1:
        raise SceneError("need at least one frame")
    frames = np.broadcast_to(colour(scene.background), (n, h, w, 3)).copy()
    masks = np.zeros((n, len(scene.shapes), h, w), dtype=bool)
    flow = np.zeros((max(n - 1, 0), h, w, 2))
    offsets = [_offsets(s, n, h, w) for s in scene.shapes]
    for j, shape in enumerate(scene.shapes):
        for i in range(n):
            masks[i, j] = shape.render(h, w, offsets[j][i])
            frames[i][masks[i, j]] = colour(shape.color)
            if i + 1 < n:
                (ax, ay), (bx, by) = offsets[j][i], offsets[j][i + 1]
                flow[i][masks[i, j]] = (bx - ax, by - ay)
    overlap = masks.sum(axis=1) > 1
    if overlap.any():
        raise SceneError(f"shapes overlap in frame {int(np.argwhere(overlap)[0][0])}")
    if scene.noise > 0:
        rng = substream(seed, "scene")
        frames = frames + scene.noise * rng.standard_normal(frames.shape)
    return {"frames": frames.astype(np.float32), "flow": flow.astype(np.float32),
            "masks": masks, "scene": scene}


def random_scene(seed: int, frames: int = 4, size: int = 16, n_shapes: int = 2,
                 max_tries: int = 100) -> SyntheticScene:
    """Non-overlapping random shapes with integer velocities."""
    rng = substream(seed, "scene")
    side = max(3, size // 4)
    for _ in range(max_tries):
        shapes = []
        for _ in range(n_shapes):
            kind = str(rng.choice(["square", "circle"]))
            sz = side if kind == "square" else max(1, side // 2)
            lo = 1 if kind == "square" else 1 + sz
            hi = size - 1 - side if kind == "square" else size - 2 - sz
            pos = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
            vel = (float(rng.integers(-1, 2)), float(rng.integers(-1, 2)))
            shapes.append(Shape(kind, str(rng.choice(SHAPE_COLOURS)), pos, sz, vel))
        scene = SyntheticScene(shapes, frames=frames, size=(size, size))
        try:
            synth_video(scene)
        except SceneError:
            continue
        return scene
    raise SceneError("could not place non-overlapping shapes")


def two_shape_scene(colour_a: str = "red", colour_b: str = "red", frames: int = 4,
                    size: int = 16) -> SyntheticScene:
    """Two squares moving toward each other horizontally, one above the other."""
    s = max(3, size // 4)
    return SyntheticScene(
        shapes=[Shape("square", colour_a, (2, 2), s, (1.0, 0.0)),
                Shape("square", colour_b, (size - 2 - s, size - 2 - s), s, (-1.0, 0.0))],
        frames=frames, size=(size, size))


def scene_prompt(scene: SyntheticScene) -> str:
    parts = [f"{s.color} {s.kind}" for s in scene.shapes]
    return " and ".join(parts) + f" on {scene.background} background"


def training_videos(seed: int, count: int, frames: int = 2, size: int = 16,
                    max_shapes: int = 2, with_masks: bool = False) -> list[tuple]:
    """Random one- or two-shape clips paired with their captions, plus the
    per-shape masks (N, S, H, W) when ``with_masks`` is set."""
    rng = substream(seed, "dataset")
    out = []
    while len(out) < count:
        n_shapes = int(rng.integers(1, max_shapes + 1))
        shapes = []
        for _ in range(n_shapes):
            kind = str(rng.choice(["square", "circle"]))
            sz = int(rng.integers(3, 6)) if kind == "square" else int(rng.integers(1, 3))
            lo = 1 if kind == "square" else 1 + sz
            hi = size - 1 - sz if kind == "square" else size - 2 - sz
            pos = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
            vel = (float(rng.integers(-1, 2)), float(rng.integers(-1, 2)))
            shapes.append(Shape(kind, str(rng.choice(SHAPE_COLOURS)), pos, sz, vel))
        scene = SyntheticScene(shapes, frames=frames, size=(size, size))
        try:
            video = synth_video(scene)
        except SceneError:
            continue
        item = (video["frames"], scene_prompt(scene))
        out.append(item + (video["masks"],) if with_masks else item)
    return out
