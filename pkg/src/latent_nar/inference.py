"""Deterministic iterative inference and latent search.

Inference replaces the posterior by a point mass (a *delta posterior*)
located at μ. Starting from the prior mean, it alternates

    y_t = argmax_y log p(y | x, z=μ_t)      (token-wise, length from p(l_y | μ_t))
    μ_{t+1} = E_q[z | x, y_t]               (posterior mean given the new output)

until the output stops changing or ``T`` refinement steps have been taken.
Latent search runs the same loop from several prior samples and lets the
autoregressive teacher pick among the results.

All entry points put the model in eval mode and run without gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch

from .batching import Batch, pad_sequences
from .corpus import BOS, EOS, PAD, SentencePair
from .layers import padding_mask
from .model import GaussianSequence, LatentNAR
from .objective import monte_carlo_elbo
from .teacher import TeacherModel, score_candidates

logger = logging.getLogger(__name__)

# reserved ids the non-autoregressive decoder never emits
BLOCKED_OUTPUTS = (PAD, BOS, EOS)


@dataclass
class DeltaPosterior:
    """Point mass at ``means`` (``(|x|, D)``)."""

    means: torch.Tensor

    def __post_init__(self):
        if self.means.dim() != 2:
            raise ValueError(f"expected (|x|, D) means, got shape {tuple(self.means.shape)}")
        if not bool(torch.isfinite(self.means).all()):
            raise ValueError("delta posterior location is not finite")

    def __len__(self) -> int:
        return self.means.size(0)


@dataclass
class SourceEncoding:
    """Prior-network hidden states for a (padded) batch of sources."""

    states: torch.Tensor
    mask: torch.Tensor
    lengths: torch.Tensor
    src: torch.Tensor
    prior: GaussianSequence


@dataclass
class StepRecord:
    step: int
    length: int
    tokens: tuple[int, ...]
    decoder_lp: float
    prior_lp: float
    bound_minus_prior: float
    bound_plus_prior: float
    elbo: float | None = None


@dataclass
class RefinementTrace:
    records: list[StepRecord] = field(default_factory=list)
    converged: bool = False
    steps: int = 0

    @property
    def output(self) -> tuple[int, ...]:
        return self.records[-1].tokens

    def to_records(self) -> list[dict]:
        """One JSON-ready dict per step (tokens as a list)."""
        rows = []
        for rec in self.records:
            row = asdict(rec)
            row["tokens"] = list(rec.tokens)
            rows.append(row)
        return rows


# ---------------------------------------------------------------------------
# batched building blocks
# ---------------------------------------------------------------------------

def encode_sources(model: LatentNAR, sources: Sequence[Sequence[int]]) -> SourceEncoding:
    if not sources or any(len(s) == 0 for s in sources):
        raise ValueError("sources must be non-empty")
    model.eval()
    batch = Batch.from_sources(sources)
    prior, states = model.prior_encode(batch.src, batch.src_mask)
    return SourceEncoding(states, batch.src_mask, batch.src_lengths, batch.src, prior)


def _decode_batch(model: LatentNAR, mu: torch.Tensor, enc: SourceEncoding):
    """Argmax length and tokens for each row of ``mu``.

    Returns the chosen lengths, the token sequences and the log-probability
    ``log p(y | x, μ, l) + log p(l | μ)`` of each output.
    """
    length_lp = model.predict_length(mu, enc.mask)
    lengths = model.lengths_from_classes(length_lp.argmax(dim=-1), enc.lengths)
    # the floor at 1 can move the length off the argmax class
    classes = model.offset_classes(enc.lengths, lengths)

    z_bar = model.stretch(mu, lengths, enc.lengths)
    tgt_mask = padding_mask(lengths, int(lengths.max()))
    token_lp = model.decode_tokens(z_bar, enc.states, enc.mask, tgt_mask)
    allowed = token_lp.clone()
    allowed[..., list(BLOCKED_OUTPUTS)] = -math.inf
    # torch.argmax returns the first maximal index, so the lowest id wins ties
    tokens = allowed.argmax(dim=-1)

    picked = token_lp.gather(-1, tokens.unsqueeze(-1)).squeeze(-1).masked_fill(~tgt_mask, 0.0)
    scores = picked.sum(1) + length_lp.gather(1, classes.unsqueeze(1)).squeeze(1)
    outputs = [tuple(tokens[i, : int(lengths[i])].tolist()) for i in range(tokens.size(0))]
    return lengths.tolist(), outputs, scores.tolist()


def _posterior_means(model: LatentNAR, enc: SourceEncoding, outputs: Sequence[Sequence[int]]) -> torch.Tensor:
    tgt = pad_sequences(outputs)
    tgt_lengths = torch.tensor([len(y) for y in outputs])
    tgt_mask = padding_mask(tgt_lengths, tgt.size(1))
    return model.posterior_encode(enc.src, enc.mask, tgt, tgt_mask).means


def _select(enc: SourceEncoding, rows: list[int]) -> SourceEncoding:
    """Sub-batch of ``enc``, trimmed to the longest remaining source."""
    index = torch.tensor(rows)
    width = int(enc.lengths[index].max())
    return SourceEncoding(
        states=enc.states[index, :width],
        mask=enc.mask[index, :width],
        lengths=enc.lengths[index],
        src=enc.src[index, :width],
        prior=GaussianSequence(enc.prior.means[index, :width], enc.prior.stds[index, :width]),
    )


def _refine(model: LatentNAR, enc: SourceEncoding, mu0: torch.Tensor, T: int):
    """Run the refinement loop on every row, stopping rows independently.

    Returns per-row outputs, steps taken and convergence flags.
    """
    _, outputs, _ = _decode_batch(model, mu0, enc)
    n = len(outputs)
    steps, converged = [0] * n, [False] * n
    active = list(range(n))
    for _ in range(T):
        if not active:
            break
        sub = _select(enc, active)
        mu = _posterior_means(model, sub, [outputs[i] for i in active])
        _, new_outputs, _ = _decode_batch(model, mu, sub)
        still_active = []
        for i, y in zip(active, new_outputs):
            steps[i] += 1
            if y == outputs[i]:
                converged[i] = True
            else:
                outputs[i] = y
                still_active.append(i)
        active = still_active
    return outputs, steps, converged


# ---------------------------------------------------------------------------
# single-sentence operations
# ---------------------------------------------------------------------------

@torch.no_grad()
def init_delta(model: LatentNAR, x: Sequence[int]) -> DeltaPosterior:
    """Delta posterior at the prior mean of ``x``."""
    enc = encode_sources(model, [x])
    return DeltaPosterior(enc.prior.means[0])


@torch.no_grad()
def argmax_decode(model: LatentNAR, mu, enc: SourceEncoding) -> tuple[int, tuple[int, ...]]:
    """Most probable length, then the most probable token at every position.

    ``mu`` is a :class:`DeltaPosterior` or a ``(|x|, D)`` tensor; ``enc`` is
    the single-sentence encoding from :func:`encode_sources`.
    """
    means = mu.means if isinstance(mu, DeltaPosterior) else mu
    if means.size(0) != int(enc.lengths[0]):
        raise ValueError(f"latent length {means.size(0)} does not match |x| = {int(enc.lengths[0])}")
    lengths, outputs, _ = _decode_batch(model, means.unsqueeze(0), enc)
    return lengths[0], outputs[0]


@torch.no_grad()
def fit_delta(model: LatentNAR, x: Sequence[int], y_prev: Sequence[int]) -> DeltaPosterior:
    """Delta posterior at the approximate-posterior mean given ``(x, y_prev)``.

    The Gaussian density is maximized at its mean, so this is the exact
    maximizer of ``log q(μ | x, y_prev)``.
    """
    if not y_prev:
        raise ValueError("y_prev must be non-empty")
    enc = encode_sources(model, [x])
    return DeltaPosterior(_posterior_means(model, enc, [y_prev])[0])


def _step_record(model, x, enc, step, means, elbo_samples, seed) -> StepRecord:
    lengths, outputs, scores = _decode_batch(model, means.unsqueeze(0), enc)
    prior_lp = float(enc.prior.log_density(means.unsqueeze(0), enc.mask)[0])
    elbo = None
    if elbo_samples > 0:
        elbo = monte_carlo_elbo(model, SentencePair(tuple(x), outputs[0]), elbo_samples, seed)
    return StepRecord(
        step=step,
        length=lengths[0],
        tokens=outputs[0],
        decoder_lp=scores[0],
        prior_lp=prior_lp,
        bound_minus_prior=scores[0] - prior_lp,
        bound_plus_prior=scores[0] + prior_lp,
        elbo=elbo,
    )


@torch.no_grad()
def deterministic_inference(
    model: LatentNAR,
    x: Sequence[int],
    T: int,
    elbo_samples: int = 0,
    seed: int = 0,
) -> tuple[tuple[int, ...], RefinementTrace]:
    """Refine the prior-mean guess for up to ``T`` steps.

    Parameters
    ----------
    model : LatentNAR
    x : sequence of int
        Source ids.
    T : int
        Maximum number of refinement steps; ``T=0`` returns the single-pass
        output.
    elbo_samples : int
        If positive, every step also records the Monte Carlo ELBO of its
        output with this many posterior samples (seeded by ``seed``).

    Returns
    -------
    (y, trace)
        The final output and one :class:`StepRecord` per decode.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    enc = encode_sources(model, [x])
    trace = RefinementTrace()
    means = enc.prior.means[0]
    trace.records.append(_step_record(model, x, enc, 0, means, elbo_samples, seed))
    for t in range(1, T + 1):
        means = _posterior_means(model, enc, [trace.output])[0]
        previous = trace.output
        trace.records.append(_step_record(model, x, enc, t, means, elbo_samples, seed))
        trace.steps = t
        if trace.output == previous:
            trace.converged = True
            break
    return trace.output, trace


@torch.no_grad()
def translate_batch(
    model: LatentNAR,
    sources: Sequence[Sequence[int]],
    T: int,
) -> list[tuple[int, ...]]:
    """Deterministic inference for many sentences in one padded batch.

    Each sentence stops refining as soon as its output repeats; outputs are
    the same as calling :func:`deterministic_inference` one at a time.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    enc = encode_sources(model, sources)
    outputs, _, _ = _refine(model, enc, enc.prior.means, T)
    return outputs


# ---------------------------------------------------------------------------
# latent search
# ---------------------------------------------------------------------------

@torch.no_grad()
def search_candidates(
    model: LatentNAR,
    x: Sequence[int],
    N: int,
    temperature: float,
    T: int,
    seed: int,
) -> list[tuple[int, ...]]:
    """Refined outputs of ``N`` prior samples, in candidate order.

    Candidate 0 starts from the prior mean; candidate n > 0 starts from
    ``μ_p + temperature · σ_p · ε_n`` with ``ε_n`` drawn from a generator
    seeded by ``seed``. Draws are made one candidate at a time, so the first
    ``N`` candidates do not depend on how many are requested.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if T < 0:
        raise ValueError("T must be non-negative")
    enc = encode_sources(model, [x] * N)
    means, stds = enc.prior.means[0], enc.prior.stds[0]
    generator = torch.Generator().manual_seed(seed)
    starts = [means]
    for _ in range(1, N):
        noise = torch.randn(means.shape, generator=generator).to(means)
        starts.append(means + temperature * stds * noise)
    outputs, _, _ = _refine(model, enc, torch.stack(starts), T)
    return outputs


@torch.no_grad()
def latent_search(
    model: LatentNAR,
    teacher: TeacherModel,
    x: Sequence[int],
    N: int,
    temperature: float,
    T: int,
    seed: int,
) -> tuple[int, ...]:
    """Best of ``N`` refined candidates under the teacher's log-probability.

    Identical candidates are scored once; among equal scores the earliest
    candidate wins.
    """
    candidates = search_candidates(model, x, N, temperature, T, seed)
    unique = list(dict.fromkeys(candidates))
    scores = score_candidates(teacher, x, unique)
    best = max(range(len(unique)), key=lambda i: (scores[i], -i))
    logger.debug("latent search: %d candidates, %d unique, best %d (%.3f)",
                 len(candidates), len(unique), best, scores[best])
    return unique[best]
