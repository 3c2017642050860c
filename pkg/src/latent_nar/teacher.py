"""Autoregressive Transformer teacher.

Used three ways: its beam-search outputs become the distilled training
targets, it rescores latent-search candidates, and it is the latency
baseline. Target sequences are ``<s> y </s>`` internally; callers pass and
receive ``y`` without the markers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .batching import Batch, iterate_batches, pad_sequences
from .corpus import BOS, EOS, PAD, SentencePair
from .errors import TrainingDivergedError
from .layers import (
    Decoder,
    Encoder,
    PositionalEncoding,
    TokenEmbedding,
    causal_mask,
    init_weights,
    padding_mask,
)
from .training import make_optimizer, write_metrics

logger = logging.getLogger(__name__)

# never emitted by the decoder
BLOCKED_OUTPUTS = (PAD, BOS)


@dataclass
class TeacherConfig:
    hidden: int = 64
    ff: int = 256
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    max_steps: int = 3000
    label_smoothing: float = 0.1
    batch_size: int = 64
    warmup: int = 400
    lr_factor: float = 1.0
    log_every: int = 100
    # beam search: score / len(y)**length_penalty; 0 keeps raw log-probs
    length_penalty: float = 0.0
    max_len_ratio: float = 3.0
    max_len_offset: int = 5

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def full(cls) -> "TeacherConfig":
        return cls(hidden=512, ff=2048, encoder_layers=6, decoder_layers=6, heads=8,
                   max_steps=100_000, warmup=4000, batch_size=256)

    def max_len(self, source_len: int) -> int:
        return math.ceil(self.max_len_ratio * source_len) + self.max_len_offset


@dataclass
class Hypothesis:
    """A decoded target (no bos/eos) with its scores.

    ``score`` is the teacher log-probability including the eos term (when
    ``finished``); ``teacher_score`` is filled in by rescoring.
    """

    tokens: tuple[int, ...]
    score: float
    finished: bool = True
    teacher_score: float | None = None


class TeacherModel(nn.Module):
    """Encoder-decoder with a causal target mask and a joint embedding."""

    def __init__(self, vocab_size: int, config: TeacherConfig):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        c = config
        self.embed = TokenEmbedding(vocab_size, c.hidden)
        self.positions = PositionalEncoding(c.hidden, c.dropout)
        self.encoder = Encoder(c.hidden, c.heads, c.ff, c.encoder_layers, c.dropout)
        self.decoder = Decoder(c.hidden, c.heads, c.ff, c.decoder_layers, c.dropout)
        self.generator = nn.Linear(c.hidden, vocab_size)

    def encode(self, src, src_mask):
        return self.encoder(self.positions(self.embed(src)), src_mask.unsqueeze(1))

    def decode_logits(self, tgt_in, memory, src_mask, tgt_mask):
        self_mask = tgt_mask.unsqueeze(1) & causal_mask(tgt_in.size(1), tgt_in.device)
        h = self.decoder(self.positions(self.embed(tgt_in)), memory, src_mask.unsqueeze(1), self_mask)
        return self.generator(h)

    def decode(self, tgt_in, memory, src_mask, tgt_mask):
        """Log-probabilities ``(batch, len, vocab)`` for the next token at each position."""
        return F.log_softmax(self.decode_logits(tgt_in, memory, src_mask, tgt_mask), dim=-1)

    def forward(self, src, src_mask, tgt_in, tgt_mask):
        return self.decode(tgt_in, self.encode(src, src_mask), src_mask, tgt_mask)


def build_teacher(vocab_size: int, config: TeacherConfig, seed: int = 0) -> TeacherModel:
    torch.manual_seed(seed)
    model = TeacherModel(vocab_size, config)
    init_weights(model)
    return model


def _check_ids(model: TeacherModel, seq: Sequence[int], side: str) -> None:
    if not seq:
        raise ValueError(f"empty {side} sequence")
    bad = [i for i in seq if not 0 <= int(i) < model.vocab_size]
    if bad:
        raise ValueError(f"{side} ids {bad} outside vocabulary of size {model.vocab_size}")


def _teacher_inputs(targets: Sequence[Sequence[int]]):
    tgt_in = pad_sequences([(BOS, *t) for t in targets])
    tgt_out = pad_sequences([(*t, EOS) for t in targets])
    lengths = torch.tensor([len(t) + 1 for t in targets])
    return tgt_in, tgt_out, padding_mask(lengths, tgt_in.size(1))


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@torch.no_grad()
def token_log_probs(model: TeacherModel, x: Sequence[int], y: Sequence[int]) -> torch.Tensor:
    """Per-position ``log p(y_i | y_<i, x)`` for ``y + [eos]`` (length ``|y| + 1``)."""
    _check_ids(model, x, "source")
    _check_ids(model, y, "target")
    model.eval()
    src = torch.tensor([list(x)])
    src_mask = torch.ones_like(src, dtype=torch.bool)
    tgt_in, tgt_out, tgt_mask = _teacher_inputs([y])
    logp = model(src, src_mask, tgt_in, tgt_mask)
    return logp[0].gather(-1, tgt_out[0].unsqueeze(-1)).squeeze(-1)


def teacher_log_prob(model: TeacherModel, x: Sequence[int], y: Sequence[int]) -> float:
    """``log p(y | x) = Σ_i log p(y_i | y_<i, x)`` including the eos term."""
    return float(token_log_probs(model, x, y).sum())


@torch.no_grad()
def score_candidates(model: TeacherModel, x: Sequence[int], candidates: Sequence[Sequence[int]]) -> list[float]:
    """Teacher log-probabilities of several targets for one source, in one batch."""
    _check_ids(model, x, "source")
    for cand in candidates:
        _check_ids(model, cand, "target")
    model.eval()
    n = len(candidates)
    src = torch.tensor([list(x)] * n)
    src_mask = torch.ones_like(src, dtype=torch.bool)
    tgt_in, tgt_out, tgt_mask = _teacher_inputs(candidates)
    logp = model(src, src_mask, tgt_in, tgt_mask)
    picked = logp.gather(-1, tgt_out.unsqueeze(-1)).squeeze(-1).masked_fill(~tgt_mask, 0.0)
    return picked.sum(dim=1).tolist()


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _next_token_log_probs(model, memory, src_mask, prefixes):
    tgt_in = pad_sequences(prefixes)
    lengths = torch.tensor([len(p) for p in prefixes])
    tgt_mask = padding_mask(lengths, tgt_in.size(1))
    n = len(prefixes)
    logp = model.decode(tgt_in, memory.expand(n, -1, -1), src_mask.expand(n, -1), tgt_mask)
    last = logp[torch.arange(n), lengths - 1]
    last[:, list(BLOCKED_OUTPUTS)] = -math.inf
    return last


@torch.no_grad()
def greedy_decode(model: TeacherModel, x: Sequence[int], max_len: int | None = None) -> Hypothesis:
    """Pick the most probable next token until eos (lowest id wins ties).

    At most ``max_len`` tokens are emitted; after that only eos can finish
    the hypothesis, otherwise it comes back unfinished.
    """
    _check_ids(model, x, "source")
    model.eval()
    max_len = model.config.max_len(len(x)) if max_len is None else max_len
    src = torch.tensor([list(x)])
    src_mask = torch.ones_like(src, dtype=torch.bool)
    memory = model.encode(src, src_mask)

    prefix, score = [BOS], 0.0
    for step in range(max_len + 1):
        logp = _next_token_log_probs(model, memory, src_mask, [prefix])[0]
        token = int(torch.argmax(logp))
        if token == EOS:
            return Hypothesis(tuple(prefix[1:]), score + float(logp[token]), finished=True)
        if step == max_len:
            break
        score += float(logp[token])
        prefix.append(token)
    return Hypothesis(tuple(prefix[1:]), score, finished=False)


def _normalized(score: float, length: int, penalty: float) -> float:
    return score if penalty == 0 else score / max(length, 1) ** penalty


@torch.no_grad()
def beam_decode(
    model: TeacherModel,
    x: Sequence[int],
    beam_size: int,
    max_len: int | None = None,
    length_penalty: float | None = None,
) -> Hypothesis:
    """Beam search over the teacher.

    Candidates are ranked by (score desc, beam index, token id), so
    ``beam_size=1`` reproduces :func:`greedy_decode` exactly. With raw scores
    the search stops as soon as no live beam can beat the best finished one.
    If nothing finishes within ``max_len`` tokens, the best live hypothesis
    (exactly ``max_len`` tokens) is returned with ``finished=False``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be at least 1")
    _check_ids(model, x, "source")
    model.eval()
    penalty = model.config.length_penalty if length_penalty is None else length_penalty
    max_len = model.config.max_len(len(x)) if max_len is None else max_len
    src = torch.tensor([list(x)])
    src_mask = torch.ones_like(src, dtype=torch.bool)
    memory = model.encode(src, src_mask)

    alive: list[tuple[list[int], float]] = [([BOS], 0.0)]
    finished: list[Hypothesis] = []
    for step in range(max_len + 1):
        # on the last step prefixes hold max_len tokens and only eos may extend them
        last = step == max_len
        logp = _next_token_log_probs(model, memory, src_mask, [p for p, _ in alive])
        # stable sort keeps the lower id first among equal log-probs
        top_lp, top_ids = torch.sort(logp, dim=-1, descending=True, stable=True)
        candidates = []
        for b, (prefix, score) in enumerate(alive):
            for lp, tok in zip(top_lp[b, :beam_size].tolist(), top_ids[b, :beam_size].tolist()):
                if lp == -math.inf:
                    continue
                candidates.append((score + lp, b, tok))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

        next_alive = []
        for total, b, tok in candidates:
            prefix = alive[b][0]
            if tok == EOS:
                finished.append(Hypothesis(tuple(prefix[1:]), total, finished=True))
            elif not last:
                next_alive.append((prefix + [tok], total))
            if len(next_alive) == beam_size:
                break
        if last:
            break
        alive = next_alive

        if len(finished) >= beam_size or not alive:
            break
        if penalty == 0 and finished and max(h.score for h in finished) >= alive[0][1]:
            break

    if finished:
        return max(finished, key=lambda h: _normalized(h.score, len(h.tokens), penalty))
    prefix, score = alive[0]
    return Hypothesis(tuple(prefix[1:]), score, finished=False)


# ---------------------------------------------------------------------------
# training and distillation
# ---------------------------------------------------------------------------

def sequence_loss(model: TeacherModel, chunk: Sequence[SentencePair], label_smoothing: float = 0.0) -> torch.Tensor:
    """Label-smoothed cross-entropy per target token (eos included, padding ignored)."""
    batch = Batch.from_pairs(chunk)
    tgt_in, tgt_out, tgt_mask = _teacher_inputs([p.target for p in chunk])
    memory = model.encode(batch.src, batch.src_mask)
    logits = model.decode_logits(tgt_in, memory, batch.src_mask, tgt_mask)
    loss = F.cross_entropy(logits.transpose(1, 2), tgt_out, ignore_index=PAD,
                           label_smoothing=label_smoothing, reduction="sum")
    return loss / int(tgt_mask.sum())


def train_teacher(
    pairs: Sequence[SentencePair],
    vocab_size: int,
    config: TeacherConfig,
    seed: int = 0,
    metrics_path: Path | None = None,
    show_progress: bool = False,
) -> TeacherModel:
    """Train with label-smoothed cross-entropy; deterministic given ``seed``.

    Raises
    ------
    TrainingDivergedError
        If the loss becomes NaN or infinite.
    """
    if not pairs:
        raise ValueError("empty corpus")
    model = build_teacher(vocab_size, config, seed)
    if config.max_steps == 0:
        model.eval()
        return model

    model.train()
    optimizer, scheduler = make_optimizer(model, config.hidden, config.warmup, config.lr_factor)
    batches = iterate_batches(pairs, config.batch_size, seed)
    records = []
    progress = tqdm(range(config.max_steps), desc="train-teacher", disable=not show_progress)
    for step in progress:
        per_token = sequence_loss(model, next(batches), config.label_smoothing)
        if not torch.isfinite(per_token):
            raise TrainingDivergedError(
                f"teacher loss became {float(per_token)} at step {step} "
                f"(lr={scheduler.get_last_lr()[0]:.3e})"
            )

        optimizer.zero_grad(set_to_none=True)
        per_token.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        optimizer.step()
        scheduler.step()

        if step % config.log_every == 0 or step == config.max_steps - 1:
            records.append({"step": step, "loss": float(per_token), "lr": scheduler.get_last_lr()[0]})
            progress.set_postfix(loss=f"{float(per_token):.3f}")
            logger.info("step %5d | teacher loss/tok %.4f", step, float(per_token))

    write_metrics(records, metrics_path)
    model.eval()
    return model


def distill_corpus(
    model: TeacherModel,
    pairs: Sequence[SentencePair],
    beam_size: int,
    show_progress: bool = False,
) -> tuple[list[SentencePair], int]:
    """Replace every target with the teacher's beam decode of its source.

    Returns the distilled pairs and the number of pairs dropped because the
    teacher produced an empty target.
    """
    distilled, dropped = [], 0
    for pair in tqdm(pairs, desc="distill", disable=not show_progress):
        hyp = beam_decode(model, pair.source, beam_size)
        if not hyp.tokens:
            dropped += 1
            continue
        distilled.append(SentencePair(pair.source, hyp.tokens))
    if dropped:
        logger.warning("dropped %d pairs with empty teacher output", dropped)
    return distilled, dropped
