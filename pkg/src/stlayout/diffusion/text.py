"""Deterministic prompt embedding: every token maps to a fixed unit vector
derived from a hash of the token, so no text encoder is needed."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np
import torch

START, END = "<start>", "<end>"
D_TEXT = 32


class PromptError(ValueError):
    pass


def load_lexicon() -> list[str]:
    text = resources.files("stlayout").joinpath("data/lexicon.txt").read_text()
    return [line.strip() for line in text.splitlines() if line.strip()]


def tokenize(prompt: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(prompt, str):
        prompt = prompt.lower().replace(",", " ").replace(".", " ").split()
    return tuple(prompt)


@lru_cache(maxsize=4096)
def token_vector(token: str, dim: int = D_TEXT, seed: int = 0) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


@dataclass
class PromptEmbedding:
    tokens: tuple[str, ...]
    vectors: torch.Tensor

    @property
    def length(self) -> int:
        return len(self.tokens)

    def span(self, words: Sequence[str], start: int = 0) -> range:
        """Positions of the first occurrence of ``words`` at or after ``start``."""
        words = tuple(words)
        n = len(words)
        for i in range(start, len(self.tokens) - n + 1):
            if self.tokens[i:i + n] == words:
                return range(i, i + n)
        raise PromptError(f"{' '.join(words)!r} not found in prompt {' '.join(self.tokens)!r}")


def embed_prompt(tokens: str | Sequence[str], dim: int = D_TEXT, seed: int = 0,
                 dtype: torch.dtype = torch.float32) -> PromptEmbedding:
    words = tokenize(tokens)
    if not words:
        raise PromptError("empty prompt")
    seq = (START, *words, END)
    vectors = np.stack([token_vector(t, dim, seed) for t in seq])
    return PromptEmbedding(tokens=seq, vectors=torch.as_tensor(vectors, dtype=dtype))
