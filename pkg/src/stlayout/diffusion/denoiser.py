"""A small pixel-token transformer that predicts diffusion noise for a video.

Every latent pixel of every frame is one token. Self-attention runs over all
tokens of the clip at once (spatial-temporal attention); cross-attention
reads the prompt embedding. There is no positional encoding, so the network
can only tell tokens apart by content -- the same limitation that makes
same-class instances blend together without layout control.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..modulation import attend


@dataclass(frozen=True)
class DenoiserDims:
    channels: int = 3
    d_model: int = 64
    heads: int = 4
    blocks: int = 2
    d_text: int = 32
    mlp_mult: int = 4
    train_steps: int = 1000


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named generator derived from one master seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def timestep_embedding(t: torch.Tensor, dim: int, train_steps: int) -> torch.Tensor:
    """Sinusoidal embedding of integer noise levels, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    # clean level (-1) embeds like level 0 shifted by one
    args = (t.to(torch.float64)[:, None] + 1.0) * freqs[None, :] * (1000.0 / train_steps)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class AttentionControl:
    """Hook interface used by the denoiser. The default does nothing."""

    def self_modulation(self, block: int):
        return None

    def cross_modulation(self, block: int):
        return None

    def needs_weights(self, kind: str, block: int) -> bool:
        return False

    def record(self, kind: str, block: int, weights, hidden: torch.Tensor) -> None:
        """``weights`` is None unless ``needs_weights`` asked for them."""

    @property
    def modulates(self) -> bool:
        """False for controls that only observe; they must not change the output."""
        return False


NO_CONTROL = AttentionControl()


def _attention(q, k, v, modulation, need_weights):
    if modulation or need_weights:
        out = attend(q, k, v, **(modulation or {}))
        return out.context, out.weights
    # fused kernel; same math as the explicit path up to float rounding
    return torch.nn.functional.scaled_dot_product_attention(q, k, v), None


class Block(nn.Module):
    def __init__(self, dims: DenoiserDims):
        super().__init__()
        d = dims.d_model
        self.heads = dims.heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj_self = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.q_cross = nn.Linear(d, d)
        self.kv_cross = nn.Linear(dims.d_text, 2 * d)
        self.proj_cross = nn.Linear(d, d)
        self.norm3 = nn.LayerNorm(d)
        self.time = nn.Linear(d, d)
        self.mlp_in = nn.Linear(d, dims.mlp_mult * d)
        self.mlp_out = nn.Linear(dims.mlp_mult * d, d)

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, temb, text, frames, index, control):
        b, nt, d = x.shape
        tokens = nt // frames

        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        ctx, weights = _attention(q, k, v, control.self_modulation(index),
                                  control.needs_weights("self", index))
        x = x + self.proj_self(ctx.transpose(1, 2).reshape(b, nt, d))
        control.record("self", index, weights, x)

        q = self._split(self.q_cross(self.norm2(x)))
        k, v = self.kv_cross(text).chunk(2, dim=-1)
        k, v = self._split(k), self._split(v)
        dh = d // self.heads
        # per-frame layout: queries (B, h, N, T, dh) against keys (B, h, 1, L, dh)
        q = q.reshape(b, self.heads, frames, tokens, dh)
        k, v = k[:, :, None], v[:, :, None]
        ctx, weights = _attention(q, k, v, control.cross_modulation(index),
                                  control.needs_weights("cross", index))
        ctx = ctx.reshape(b, self.heads, nt, dh).transpose(1, 2).reshape(b, nt, d)
        x = x + self.proj_cross(ctx)
        control.record("cross", index, weights, x)

        h = self.norm3(x + self.time(temb)[:, None, :])
        return x + self.mlp_out(torch.nn.functional.gelu(self.mlp_in(h)))


class ToyDenoiser(nn.Module):
    def __init__(self, dims: DenoiserDims = DenoiserDims(), seed: int = 0,
                 out_scale: float = 0.1):
        super().__init__()
        self.dims = dims
        self.seed = seed
        d = dims.d_model
        self.inp = nn.Linear(dims.channels, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(dims) for _ in range(dims.blocks))
        self.norm_out = nn.LayerNorm(d)
        self.out = nn.Linear(d, dims.channels)
        self._init_weights(out_scale)

    def _init_weights(self, out_scale: float) -> None:
        rng = substream(self.seed, "weights")
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif p.dim() == 1:  # layer norm gains
                    p.fill_(1.0)
                else:
                    std = 1.0 / math.sqrt(p.shape[1])
                    if name.startswith("out."):
                        std *= out_scale
                    p.copy_(torch.from_numpy(rng.standard_normal(p.shape) * std))

    def forward(self, z: torch.Tensor, t, text: torch.Tensor,
                control: AttentionControl = NO_CONTROL) -> torch.Tensor:
        """Predict noise for latents z of shape (N, H, W, C) or (B, N, H, W, C).

        ``t`` is an integer noise level (or one per batch item); ``text`` is
        (L, d_text) or (B, L, d_text).
        """
        batched = z.dim() == 5
        if not batched:
            z, text = z[None], text[None]
        b, n, h, w, c = z.shape
        t = torch.as_tensor(t).reshape(-1).expand(b)
        temb = self.time_mlp(timestep_embedding(t, self.dims.d_model, self.dims.train_steps).to(z.dtype))
        x = self.inp(z.reshape(b, n * h * w, c)) + temb[:, None, :]
        for i, block in enumerate(self.blocks):
            x = block(x, temb, text, n, i, control)
        eps = self.out(self.norm_out(x)).reshape(b, n, h, w, c)
        return eps if batched else eps[0]

    # serialization: one little-endian float32 blob plus a JSON manifest
    def save(self, directory: str | Path, **extra) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensors, blobs = [], []
        for name, p in self.state_dict().items():
            arr = p.detach().cpu().numpy().astype("<f4")
            tensors.append({"name": name, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
        (directory / "weights.bin").write_bytes(b"".join(blobs))
        manifest = {"seed": self.seed, "dims": asdict(self.dims), "tensors": tensors, **extra}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "ToyDenoiser":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        model = cls(DenoiserDims(**manifest["dims"]), seed=manifest["seed"])
        raw = np.frombuffer((directory / "weights.bin").read_bytes(), dtype="<f4")
        state, offset = {}, 0
        for entry in manifest["tensors"]:
            size = int(np.prod(entry["shape"], dtype=np.int64))
            state[entry["name"]] = torch.from_numpy(
                raw[offset:offset + size].reshape(entry["shape"]).copy())
            offset += size
        if offset != raw.size:
            raise ValueError(f"weights blob has {raw.size} floats, manifest describes {offset}")
        model.load_state_dict(state)
        return model
