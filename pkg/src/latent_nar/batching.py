"""Padding and batch iteration over id-encoded sentence pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from .corpus import PAD, SentencePair
from .layers import padding_mask


def pad_sequences(seqs: Sequence[Sequence[int]], pad: int = PAD, device=None) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad, dtype=torch.long, device=device)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def lengths_of(seqs: Sequence[Sequence[int]], device=None) -> torch.Tensor:
    return torch.tensor([len(s) for s in seqs], dtype=torch.long, device=device)


@dataclass
class Batch:
    """Padded source/target ids with boolean masks (True on real tokens)."""

    src: torch.Tensor
    src_lengths: torch.Tensor
    tgt: torch.Tensor | None = None
    tgt_lengths: torch.Tensor | None = None

    @property
    def src_mask(self) -> torch.Tensor:
        return padding_mask(self.src_lengths, self.src.size(1))

    @property
    def tgt_mask(self) -> torch.Tensor:
        return padding_mask(self.tgt_lengths, self.tgt.size(1))

    @property
    def size(self) -> int:
        return self.src.size(0)

    @property
    def num_target_tokens(self) -> int:
        return int(self.tgt_lengths.sum())

    @classmethod
    def from_sources(cls, sources: Sequence[Sequence[int]], device=None) -> "Batch":
        return cls(pad_sequences(sources, device=device), lengths_of(sources, device))

    @classmethod
    def from_pairs(cls, pairs: Sequence[SentencePair], device=None) -> "Batch":
        sources = [p.source for p in pairs]
        targets = [p.target for p in pairs]
        return cls(
            pad_sequences(sources, device=device),
            lengths_of(sources, device),
            pad_sequences(targets, device=device),
            lengths_of(targets, device),
        )


def iterate_batches(
    pairs: Sequence[SentencePair],
    batch_size: int,
    seed: int,
    window: int = 50,
) -> Iterator[list[SentencePair]]:
    """Yield shuffled batches forever, one reshuffle per epoch.

    Within each window of ``window`` batches pairs are sorted by source
    length so that a batch holds sentences of similar size.
    """
    if not pairs:
        raise ValueError("empty corpus")
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    rng = np.random.default_rng(seed)
    chunk = batch_size * window
    while True:
        order = rng.permutation(len(pairs))
        batches = []
        for start in range(0, len(order), chunk):
            block = sorted(order[start : start + chunk], key=lambda i: len(pairs[i].source))
            batches.extend(block[i : i + batch_size] for i in range(0, len(block), batch_size))
        for b in rng.permutation(len(batches)):
            yield [pairs[i] for i in batches[b]]
