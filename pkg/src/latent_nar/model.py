"""The latent-variable non-autoregressive translation model.

Four components share one token embedding:

``prior``       p(z | x): Transformer encoder over x, projected to a Gaussian
                per source position. Its hidden states are reused as the
                source encoding for the decoder.
``posterior``   q(z | x, y): encoder over y, then a non-causal decoder whose
                queries are the x embeddings, projected to a Gaussian per
                source position.
``length``      p(l_y | z): softmax over offsets l_y - |x| in [-L, L] from
                the pooled latent sequence.
``decoder``     p(y | x, z, l_y): the latents are stretched to l_y vectors by
                a monotonic location-based attention (``length_transform``),
                projected to the hidden size and decoded in parallel.

All tensors are batch-first; masks are True on real positions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import MAX_OFFSET
from .layers import Decoder, Encoder, PositionalEncoding, TokenEmbedding, init_weights

logger = logging.getLogger(__name__)

POOLING_MODES = ("mean", "max")


@dataclass
class LatentNARConfig:
    latent_dim: int = 8
    hidden: int = 64
    ff: int = 256
    prior_layers: int = 2
    decoder_layers: int = 2
    posterior_layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    max_offset: int = MAX_OFFSET
    length_pooling: str = "mean"
    std_floor: float = 1e-3
    sigma_init: float = 1.0
    share_posterior_embeddings: bool = True

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be at least 1")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.length_pooling not in POOLING_MODES:
            raise ValueError(f"length_pooling must be one of {POOLING_MODES}")
        if self.max_offset < 1:
            raise ValueError("max_offset must be at least 1")
        if self.std_floor <= 0 or self.sigma_init <= 0:
            raise ValueError("std_floor and sigma_init must be positive")

    @classmethod
    def full(cls) -> "LatentNARConfig":
        return cls(latent_dim=8, hidden=512, ff=2048, prior_layers=6, decoder_layers=6,
                   posterior_layers=3, heads=8)

    @property
    def num_offsets(self) -> int:
        return 2 * self.max_offset + 1


@dataclass
class GaussianSequence:
    """Diagonal Gaussian per source position: ``means``/``stds`` are ``(..., |x|, D)``."""

    means: torch.Tensor
    stds: torch.Tensor

    def __post_init__(self):
        if self.means.shape != self.stds.shape:
            raise ValueError(f"means {tuple(self.means.shape)} and stds {tuple(self.stds.shape)} differ")

    def __len__(self) -> int:
        return self.means.size(-2)

    def log_density(self, z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``log N(z; means, stds²)`` summed over positions and dimensions."""
        var = self.stds ** 2
        per_dim = -0.5 * ((z - self.means) ** 2 / var + torch.log(2 * math.pi * var))
        per_pos = per_dim.sum(-1)
        if mask is not None:
            per_pos = per_pos.masked_fill(~mask, 0.0)
        return per_pos.sum(-1)

    def scaled(self, temperature: float) -> "GaussianSequence":
        return GaussianSequence(self.means, self.stds * temperature)


def reparameterize(g: GaussianSequence, noise: torch.Tensor) -> torch.Tensor:
    """``means + stds * noise``; gradients reach both means and stds."""
    if noise.shape != g.means.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} does not match {tuple(g.means.shape)}")
    return g.means + g.stds * noise


def length_transform(
    z: torch.Tensor,
    target_lengths,
    sigma,
    src_lengths: torch.Tensor | None = None,
    max_offset: int | None = MAX_OFFSET,
    return_weights: bool = False,
):
    """Stretch ``|x|`` latent vectors to ``l_y`` vectors by monotonic attention.

    Row j (1-based) is a softmax-weighted sum of the z_k (1-based) with
    logits ``-(k - j·|x|/l_y)² / (2σ²)``.

    Parameters
    ----------
    z : Tensor
        ``(|x|, D)`` or ``(batch, |x|, D)``.
    target_lengths : int or Tensor
        l_y per sentence.
    sigma : float or Tensor
        Attention scale.
    src_lengths : Tensor, optional
        Real source lengths when ``z`` is padded; defaults to ``z.size(-2)``.
    max_offset : int or None
        l_y must lie in ``[1, |x| + max_offset]``; ``None`` skips the check.

    Returns
    -------
    Tensor
        ``(batch, max l_y, D)`` (unbatched input gives ``(l_y, D)``); rows past
        a sentence's l_y are padding. With ``return_weights`` also the
        ``(batch, max l_y, |x|)`` weights.
    """
    unbatched = z.dim() == 2
    if unbatched:
        z = z.unsqueeze(0)
    batch, width, _ = z.shape
    targets = torch.as_tensor(target_lengths, device=z.device).reshape(-1).expand(batch).long()
    sources = (
        torch.full((batch,), width, device=z.device, dtype=torch.long)
        if src_lengths is None else src_lengths.to(z.device).long()
    )
    if bool((targets < 1).any()):
        raise ValueError(f"target length must be at least 1, got {targets.tolist()}")
    if max_offset is not None and bool((targets > sources + max_offset).any()):
        raise ValueError(f"target length {targets.tolist()} exceeds |x| + {max_offset}")

    sigma = torch.as_tensor(sigma, dtype=z.dtype, device=z.device)
    k = torch.arange(1, width + 1, dtype=z.dtype, device=z.device)
    j = torch.arange(1, int(targets.max()) + 1, dtype=z.dtype, device=z.device)
    centers = (sources.to(z.dtype) / targets.to(z.dtype)).unsqueeze(1) * j.unsqueeze(0)
    logits = -((k.view(1, 1, -1) - centers.unsqueeze(-1)) ** 2) / (2 * sigma ** 2)
    key_mask = k.view(1, 1, -1) <= sources.to(z.dtype).view(-1, 1, 1)
    weights = logits.masked_fill(~key_mask, -math.inf).softmax(dim=-1)
    out = torch.matmul(weights, z)
    if unbatched:
        out, weights = out[0], weights[0]
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# components
# ---------------------------------------------------------------------------

class GaussianHead(nn.Module):
    """Linear maps from hidden states to means and (softplus, floored) stds."""

    def __init__(self, hidden: int, latent_dim: int, std_floor: float):
        super().__init__()
        self.mean = nn.Linear(hidden, latent_dim)
        self.std = nn.Linear(hidden, latent_dim)
        self.std_floor = std_floor

    def forward(self, h) -> GaussianSequence:
        return GaussianSequence(self.mean(h), F.softplus(self.std(h)).clamp_min(self.std_floor))


class PriorNetwork(nn.Module):
    def __init__(self, c: LatentNARConfig):
        super().__init__()
        self.encoder = Encoder(c.hidden, c.heads, c.ff, c.prior_layers, c.dropout)
        self.head = GaussianHead(c.hidden, c.latent_dim, c.std_floor)

    def forward(self, x_embedded, src_mask):
        encoding = self.encoder(x_embedded, src_mask.unsqueeze(1))
        return self.head(encoding), encoding


class PosteriorNetwork(nn.Module):
    def __init__(self, c: LatentNARConfig, vocab_size: int):
        super().__init__()
        self.embed = None if c.share_posterior_embeddings else TokenEmbedding(vocab_size, c.hidden)
        self.y_encoder = Encoder(c.hidden, c.heads, c.ff, c.posterior_layers, c.dropout)
        self.x_decoder = Decoder(c.hidden, c.heads, c.ff, c.posterior_layers, c.dropout)
        self.head = GaussianHead(c.hidden, c.latent_dim, c.std_floor)

    def forward(self, x_embedded, src_mask, y_embedded, tgt_mask) -> GaussianSequence:
        y_states = self.y_encoder(y_embedded, tgt_mask.unsqueeze(1))
        # queries are source positions; no causal mask anywhere
        h = self.x_decoder(x_embedded, y_states, tgt_mask.unsqueeze(1), src_mask.unsqueeze(1))
        return self.head(h)


class LengthPredictor(nn.Module):
    def __init__(self, c: LatentNARConfig):
        super().__init__()
        self.proj = nn.Linear(c.latent_dim, c.num_offsets)
        self.pooling = c.length_pooling
        self.max_offset = c.max_offset

    def forward(self, z, src_mask):
        keep = src_mask.unsqueeze(-1).to(z.dtype)
        if self.pooling == "mean":
            pooled = (z * keep).sum(1) / keep.sum(1).clamp_min(1.0)
        else:
            pooled = z.masked_fill(~src_mask.unsqueeze(-1), -math.inf).max(dim=1).values
        return F.log_softmax(self.proj(pooled), dim=-1)


class LengthTransform(nn.Module):
    """Holds the single trainable scale σ."""

    def __init__(self, sigma_init: float):
        super().__init__()
        self.sigma = nn.Parameter(torch.tensor(float(sigma_init)))

    def forward(self, z, target_lengths, src_lengths, max_offset=None):
        sigma = self.sigma.abs().clamp_min(1e-3)
        return length_transform(z, target_lengths, sigma, src_lengths, max_offset=max_offset)


class TokenDecoder(nn.Module):
    def __init__(self, c: LatentNARConfig, vocab_size: int):
        super().__init__()
        self.latent_proj = nn.Linear(c.latent_dim, c.hidden)
        self.positions = PositionalEncoding(c.hidden, c.dropout)
        self.decoder = Decoder(c.hidden, c.heads, c.ff, c.decoder_layers, c.dropout)
        self.generator = nn.Linear(c.hidden, vocab_size)

    def forward(self, z_bar, encoding, src_mask, tgt_mask):
        h = self.positions(self.latent_proj(z_bar))
        h = self.decoder(h, encoding, src_mask.unsqueeze(1), tgt_mask.unsqueeze(1))
        return F.log_softmax(self.generator(h), dim=-1)


class LatentNAR(nn.Module):
    def __init__(self, vocab_size: int, config: LatentNARConfig):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        self.embed = TokenEmbedding(vocab_size, config.hidden)
        self.positions = PositionalEncoding(config.hidden, config.dropout)
        self.prior = PriorNetwork(config)
        self.posterior = PosteriorNetwork(config, vocab_size)
        self.length = LengthPredictor(config)
        self.length_transform = LengthTransform(config.sigma_init)
        self.decoder = TokenDecoder(config, vocab_size)

    def _embed(self, ids, table=None):
        return self.positions((self.embed if table is None else table)(ids))

    def prior_encode(self, src, src_mask):
        """Prior Gaussian and source encoding, both of source length."""
        return self.prior(self._embed(src), src_mask)

    def posterior_encode(self, src, src_mask, tgt, tgt_mask) -> GaussianSequence:
        table = self.posterior.embed
        return self.posterior(self._embed(src, table), src_mask, self._embed(tgt, table), tgt_mask)

    def predict_length(self, z, src_mask):
        """``(batch, 2L+1)`` log-probabilities over offsets ``-L..L``."""
        return self.length(z, src_mask)

    def decode_tokens(self, z_bar, encoding, src_mask, tgt_mask):
        """``(batch, l_y, |V|)`` token log-probabilities, all positions in parallel."""
        return self.decoder(z_bar, encoding, src_mask, tgt_mask)

    def stretch(self, z, target_lengths, src_lengths, max_offset=None):
        return self.length_transform(z, target_lengths, src_lengths, max_offset=max_offset)

    @property
    def sigma(self) -> float:
        return float(self.length_transform.sigma.abs().clamp_min(1e-3))

    def offset_classes(self, src_lengths, tgt_lengths) -> torch.Tensor:
        """Class index of ``l_y - |x|``; offsets beyond ±L are clamped with a warning."""
        offsets = tgt_lengths - src_lengths
        limit = self.config.max_offset
        if bool((offsets.abs() > limit).any()):
            logger.warning("clamping %d length offsets into [-%d, %d]",
                           int((offsets.abs() > limit).sum()), limit, limit)
        return offsets.clamp(-limit, limit) + limit

    def lengths_from_classes(self, classes, src_lengths) -> torch.Tensor:
        """Target length from offset class, floored at 1."""
        return (src_lengths + classes - self.config.max_offset).clamp_min(1)


def build_model(vocab_size: int, config: LatentNARConfig, seed: int = 0) -> LatentNAR:
    torch.manual_seed(seed)
    model = LatentNAR(vocab_size, config)
    init_weights(model)
    return model
