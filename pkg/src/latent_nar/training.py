"""Optimization loop for the latent-variable model and shared schedule helpers.

The learning rate follows the inverse-square-root warmup schedule used for
Transformer baselines; the KL budget is annealed from 1 to 0 over the second
half of training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import pandas as pd
import torch
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from .batching import Batch, iterate_batches
from .corpus import SentencePair
from .errors import NonFiniteLossError, TrainingDivergedError
from .model import LatentNAR, LatentNARConfig, build_model
from .objective import TrainSchedule, elbo_loss, monte_carlo_elbo

logger = logging.getLogger(__name__)


@dataclass
class ScheduleConfig:
    """Optimization settings; ``max_steps`` is the M of the budget schedule."""

    max_steps: int = 6000
    warmup: int = 400
    lr_factor: float = 1.0
    batch_size: int = 64
    log_every: int = 100
    eval_every: int = 1000
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 2:
            raise ValueError("max_steps (M) must be at least 2")
        if self.warmup < 1:
            raise ValueError("warmup must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr_factor <= 0:
            raise ValueError("lr_factor must be positive")


def learning_rate(step: int, model_size: int, warmup: int, factor: float) -> float:
    step = max(step, 1)
    return factor * model_size ** (-0.5) * min(step ** (-0.5), step * warmup ** (-1.5))


def make_optimizer(model: torch.nn.Module, model_size: int, warmup: int, factor: float):
    optimizer = torch.optim.Adam(model.parameters(), lr=1.0, betas=(0.9, 0.98), eps=1e-9)
    scheduler = LambdaLR(optimizer, lambda s: learning_rate(s + 1, model_size, warmup, factor))
    return optimizer, scheduler


def write_metrics(records: list[dict], path: Path | None) -> pd.DataFrame:
    frame = pd.DataFrame(records)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_json(path, orient="records", lines=True)
    return frame


def validation_elbo(model: LatentNAR, pairs: Sequence[SentencePair], samples: int, seed: int) -> float:
    """Per-token Monte Carlo ELBO over a validation set."""
    was_training = model.training
    model.eval()
    total, tokens = 0.0, 0
    for i, pair in enumerate(pairs):
        total += monte_carlo_elbo(model, pair, samples, seed + i)
        tokens += len(pair.target)
    model.train(was_training)
    return total / max(tokens, 1)


def train_nar(
    pairs: Sequence[SentencePair],
    vocab_size: int,
    config: LatentNARConfig,
    schedule: ScheduleConfig,
    seed: int = 0,
    metrics_path: Path | None = None,
    valid_pairs: Sequence[SentencePair] | None = None,
    show_progress: bool = False,
) -> LatentNAR:
    """Train the four components jointly on id-encoded pairs.

    Parameters
    ----------
    pairs : sequence of SentencePair
        Training pairs (distilled or raw targets), id-encoded.
    vocab_size : int
        Size of the joint vocabulary.
    config, schedule
        Model shape and optimization settings.
    seed : int
        Seeds parameter initialization, batch order and reparameterization
        noise; equal seeds give equal models.
    metrics_path : Path, optional
        JSON-lines file receiving one record per logging step.
    valid_pairs : sequence of SentencePair, optional
        If given, the validation ELBO is computed every ``eval_every`` steps
        and the parameters with the best value are returned.

    Returns
    -------
    LatentNAR
        The trained model, in eval mode.
    """
    if not pairs:
        raise ValueError("empty corpus")
    model = build_model(vocab_size, config, seed)
    model.train()
    optimizer, scheduler = make_optimizer(model, config.hidden, schedule.warmup, schedule.lr_factor)
    noise_gen = torch.Generator().manual_seed(seed)
    batches = iterate_batches(pairs, schedule.batch_size, seed)

    records: list[dict] = []
    best_state, best_elbo = None, -math.inf
    progress = tqdm(range(schedule.max_steps), desc="train-nar", disable=not show_progress)
    for step in progress:
        batch = Batch.from_pairs(next(batches))
        # steps count from 1 so the last update runs at b = 0
        train_schedule = TrainSchedule(step + 1, schedule.max_steps)
        try:
            breakdown = elbo_loss(model, batch, train_schedule, generator=noise_gen)
        except NonFiniteLossError as exc:
            raise TrainingDivergedError(
                f"step {step}: {exc} (lr={scheduler.get_last_lr()[0]:.3e})"
            ) from exc

        optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.clip_norm)
        optimizer.step()
        scheduler.step()

        if step % schedule.log_every == 0 or step == schedule.max_steps - 1:
            record = {"step": step, **breakdown.as_dict(), "lr": scheduler.get_last_lr()[0]}
            records.append(record)
            progress.set_postfix(loss=f"{record['loss']:.3f}", kl=f"{record['kl_raw']:.3f}")
            logger.info(
                "step %5d | loss/tok %.4f | recon %.2f | len %.2f | kl %.3f (budgeted %.3f, b=%.3f)",
                step, record["loss"], record["recon"], record["length_lp"],
                record["kl_raw"], record["kl_budgeted"], record["b"],
            )

        last = step == schedule.max_steps - 1
        if valid_pairs and ((step + 1) % schedule.eval_every == 0 or last):
            elbo = validation_elbo(model, valid_pairs, samples=1, seed=seed)
            logger.info("step %5d | validation ELBO/tok %.4f", step, elbo)
            if elbo > best_elbo:
                best_elbo = elbo
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    write_metrics(records, metrics_path)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model
