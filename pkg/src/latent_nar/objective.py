"""Evidence lower bound with a per-position KL budget.

Training maximizes, per sentence pair,

    E_{z~q}[ Σ_i log p(y_i | x, z, l_y) + log p(l_y | z) ]
        - Σ_k max(b, KL[q(z_k | x, y) || p(z_k | x)])

with a single reparameterized sample. The budget b stays at 1 for the
first half of training and then decays linearly to 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .batching import Batch
from .corpus import SentencePair
from .errors import NonFiniteLossError
from .model import GaussianSequence, LatentNAR, reparameterize


@dataclass(frozen=True)
class TrainSchedule:
    step: int
    max_step: int

    def __post_init__(self):
        if self.max_step < 2:
            raise ValueError("max_step must be at least 2")
        if not 0 <= self.step <= self.max_step:
            raise ValueError(f"step {self.step} outside [0, {self.max_step}]")

    @property
    def budget(self) -> float:
        return budget_schedule(self.step, self.max_step)


@dataclass
class LossBreakdown:
    """Batch-summed ELBO terms; ``total`` is the tensor to differentiate."""

    reconstruction: torch.Tensor
    length_log_prob: torch.Tensor
    kl_raw: torch.Tensor
    kl_budgeted: torch.Tensor
    total: torch.Tensor
    budget: float
    num_tokens: int

    def as_dict(self) -> dict:
        """Logging view; ``loss`` is normalized per target token."""
        return {
            "loss": float(self.total) / max(self.num_tokens, 1),
            "recon": float(self.reconstruction),
            "length_lp": float(self.length_log_prob),
            "kl_raw": float(self.kl_raw),
            "kl_budgeted": float(self.kl_budgeted),
            "b": self.budget,
        }


def gaussian_kl(q: GaussianSequence, p: GaussianSequence) -> torch.Tensor:
    """Per-position ``KL[q || p]`` between diagonal Gaussians, summed over dimensions."""
    if q.means.shape != p.means.shape:
        raise ValueError(f"shape mismatch: {tuple(q.means.shape)} vs {tuple(p.means.shape)}")
    if bool((q.stds <= 0).any()) or bool((p.stds <= 0).any()):
        raise ValueError("standard deviations must be strictly positive")
    var_ratio = (q.stds / p.stds) ** 2
    mean_term = ((q.means - p.means) / p.stds) ** 2
    per_dim = 0.5 * (var_ratio + mean_term - 1.0) - torch.log(q.stds / p.stds)
    return per_dim.sum(-1).clamp_min(0.0)


def budget_schedule(step: int, max_step: int) -> float:
    """1 for ``step < M/2``, then ``(M - step) / (M/2)`` down to 0 at ``step = M``."""
    if not 0 <= step <= max_step:
        raise ValueError(f"step {step} outside [0, {max_step}]")
    half = max_step / 2
    if step < half:
        return 1.0
    return (max_step - step) / half


def budgeted_kl(kl: torch.Tensor, b: float, mask: torch.Tensor | None = None) -> torch.Tensor:
    """``Σ_k max(b, kl_k)``; positions below the budget get no gradient."""
    if b < 0:
        raise ValueError("budget must be non-negative")
    clamped = kl.clamp_min(b)
    if mask is not None:
        clamped = clamped.masked_fill(~mask, 0.0)
    return clamped.sum()


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteLossError(name, float(value.sum()))


def _likelihood_terms(model: LatentNAR, batch: Batch, z: torch.Tensor, encoding: torch.Tensor):
    """Per-sentence reconstruction and length log-probabilities given latents ``z``."""
    src_mask, tgt_mask = batch.src_mask, batch.tgt_mask
    length_lp = model.predict_length(z, src_mask)
    classes = model.offset_classes(batch.src_lengths, batch.tgt_lengths)
    length_term = length_lp.gather(1, classes.unsqueeze(1)).squeeze(1)

    z_bar = model.stretch(z, batch.tgt_lengths, batch.src_lengths)
    token_lp = model.decode_tokens(z_bar, encoding, src_mask, tgt_mask)
    picked = token_lp.gather(-1, batch.tgt.unsqueeze(-1)).squeeze(-1)
    recon_term = picked.masked_fill(~tgt_mask, 0.0).sum(1)
    return recon_term, length_term


def elbo_loss(
    model: LatentNAR,
    batch: Batch,
    schedule: TrainSchedule,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Single-sample negative ELBO with the budgeted KL, summed over the batch.

    ``noise`` (shape of the posterior means) fixes the reparameterization
    sample; otherwise it is drawn from ``generator``.

    Raises
    ------
    NonFiniteLossError
        If any term is NaN or infinite; the component is named.
    """
    src_mask = batch.src_mask
    prior, encoding = model.prior_encode(batch.src, src_mask)
    posterior = model.posterior_encode(batch.src, src_mask, batch.tgt, batch.tgt_mask)
    if noise is None:
        noise = torch.randn(
            posterior.means.shape, generator=generator,
            dtype=posterior.means.dtype, device=posterior.means.device,
        )
    z = reparameterize(posterior, noise)

    recon, length = _likelihood_terms(model, batch, z, encoding)
    kl = gaussian_kl(posterior, prior).masked_fill(~src_mask, 0.0)
    b = schedule.budget
    reconstruction, length_log_prob = recon.sum(), length.sum()
    kl_raw = kl.sum()
    kl_budgeted = budgeted_kl(kl, b, src_mask)
    for name, value in (("reconstruction", reconstruction), ("length", length_log_prob), ("kl", kl_raw)):
        _check_finite(name, value)

    total = -(reconstruction + length_log_prob) + kl_budgeted
    return LossBreakdown(
        reconstruction=reconstruction,
        length_log_prob=length_log_prob,
        kl_raw=kl_raw,
        kl_budgeted=kl_budgeted,
        total=total,
        budget=b,
        num_tokens=batch.num_target_tokens,
    )


@torch.no_grad()
def monte_carlo_elbo(model: LatentNAR, pair: SentencePair, samples: int = 20, seed: int = 0) -> float:
    """Unbudgeted ELBO of one pair from ``samples`` posterior draws.

    ``(1/K) Σ_k [recon + length log-prob]`` under ``z_k ~ q`` minus the exact
    KL; deterministic given ``seed``.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    batch = Batch.from_pairs([pair] * samples)
    src_mask = batch.src_mask
    prior, encoding = model.prior_encode(batch.src, src_mask)
    posterior = model.posterior_encode(batch.src, src_mask, batch.tgt, batch.tgt_mask)
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(posterior.means.shape, generator=generator).to(posterior.means)
    z = reparameterize(posterior, noise)
    recon, length = _likelihood_terms(model, batch, z, encoding)
    kl = gaussian_kl(
        GaussianSequence(posterior.means[:1], posterior.stds[:1]),
        GaussianSequence(prior.means[:1], prior.stds[:1]),
    ).sum()
    return float((recon + length).mean() - kl)
