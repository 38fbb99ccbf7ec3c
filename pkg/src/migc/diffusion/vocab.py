"""Toy phrase encoder standing in for a real text encoder.

A description is exactly two tokens, ``[color, shape]``; the null
description is ``[null, null]``.  Global prompts are the concatenation of the
instance descriptions with an ordinal embedding per instance so the frozen
backbone can bind colors to shapes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch
import torch.nn as nn

COLORS = ("red", "yellow", "green", "blue", "white", "black", "brown")
SHAPES = ("circle", "square", "triangle", "cross")
NULL = "<null>"
FILLER = {"a", "an", "and"}


@dataclass(frozen=True)
class ToyVocab:
    colors: tuple[str, ...] = COLORS
    shapes: tuple[str, ...] = SHAPES

    @property
    def tokens(self) -> tuple[str, ...]:
        return (NULL,) + self.colors + self.shapes

    @property
    def null_id(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.tokens)

    def token_id(self, tok: str) -> int:
        try:
            return self.tokens.index(tok)
        except ValueError:
            raise KeyError(f"unknown token {tok!r}") from None

    def desc_ids(self, desc) -> list[int]:
        """``(color, shape)``, ``"color shape"`` or None -> two token ids."""
        if desc is None:
            return [self.null_id, self.null_id]
        if isinstance(desc, str):
            desc = desc.split()
        color, shape = desc
        if color not in self.colors:
            raise KeyError(f"unknown color {color!r}")
        if shape not in self.shapes:
            raise KeyError(f"unknown shape {shape!r}")
        return [self.token_id(color), self.token_id(shape)]

    def parse_prompt(self, prompt: str) -> list[tuple[str, str]]:
        """Recover ``(color, shape)`` pairs from a template prompt."""
        words = [w for w in re.split(r"[\s,.]+", prompt.lower()) if w and w not in FILLER]
        if len(words) % 2:
            raise KeyError(f"prompt {prompt!r} does not split into color/shape pairs")
        pairs = list(zip(words[::2], words[1::2]))
        for c, s in pairs:
            self.desc_ids((c, s))
        return pairs


class PhraseEncoder(nn.Module):
    """Embedding table plus per-instance ordinal embeddings for global prompts."""

    def __init__(self, vocab: ToyVocab = ToyVocab(), dim: int = 32, max_instances: int = 8):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.max_instances = max_instances
        self.table = nn.Embedding(len(vocab), dim)
        self.ordinal = nn.Embedding(max_instances, dim)
        nn.init.normal_(self.table.weight, std=1.0)
        nn.init.normal_(self.ordinal.weight, std=0.5)

    def encode_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)

    def encode_phrase(self, desc) -> torch.Tensor:
        """[2, dim] embedding of one description (or the null description)."""
        return self.table(torch.tensor(self.vocab.desc_ids(desc)))

    def encode_prompt_ids(self, ids: torch.Tensor) -> torch.Tensor:
        """ids [B, 2*max_instances] laid out as consecutive description pairs."""
        emb = self.table(ids)
        B, L, _ = emb.shape
        slot = torch.arange(L) // 2
        emb = emb + self.ordinal(slot)[None] * (ids != self.vocab.null_id).unsqueeze(-1).to(emb.dtype)
        return emb

    def prompt_ids(self, descs) -> torch.Tensor:
        if len(descs) > self.max_instances:
            raise ValueError(f"prompt has {len(descs)} instances; encoder holds {self.max_instances}")
        ids = [i for d in descs for i in self.vocab.desc_ids(d)]
        ids += [self.vocab.null_id] * (2 * self.max_instances - len(ids))
        return torch.tensor(ids)
