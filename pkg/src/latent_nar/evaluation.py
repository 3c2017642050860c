"""Translation quality and speed measurements.

BLEU is the tokenized corpus-level score over 1- to 4-grams with add-one
smoothing applied only to zero higher-order precisions. Hypotheses pass
through :func:`remove_repetitions` before they are scored.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .config import EvalConfig, InferenceConfig
from .corpus import SentencePair, Vocab
from .inference import deterministic_inference, latent_search, translate_batch
from .model import LatentNAR
from .objective import monte_carlo_elbo
from .teacher import TeacherModel, beam_decode, greedy_decode

logger = logging.getLogger(__name__)

MAX_ORDER = 4


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def remove_repetitions(tokens: Sequence) -> list:
    """Collapse runs of identical adjacent tokens to one token."""
    out = []
    for tok in tokens:
        if not out or out[-1] != tok:
            out.append(tok)
    return out


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus BLEU in percent.

    Parameters
    ----------
    hypotheses, references : sequences of token sequences
        One reference per hypothesis.

    Returns
    -------
    float
        ``100 · BP · exp(mean_n log p_n)``. A zero precision for ``n >= 2``
        is replaced by ``1 / (total_n + 1)``; a zero unigram precision gives 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")

    correct = np.zeros(MAX_ORDER)
    total = np.zeros(MAX_ORDER)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts, ref_counts = _ngrams(hyp, n), _ngrams(ref, n)
            correct[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)

    if hyp_len == 0 or correct[0] == 0:
        return 0.0
    log_precisions = []
    for n in range(MAX_ORDER):
        if correct[n] == 0:
            log_precisions.append(math.log(1.0 / (total[n] + 1.0)))
        else:
            log_precisions.append(math.log(correct[n] / total[n]))
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(sum(log_precisions) / MAX_ORDER)


def translation_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """BLEU of system outputs: repetitions are removed from every hypothesis first."""
    return corpus_bleu([remove_repetitions(h) for h in hypotheses], references)


def exact_match(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Percentage of hypotheses identical to their reference."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    hits = sum(tuple(h) == tuple(r) for h, r in zip(hypotheses, references))
    return 100.0 * hits / len(hypotheses)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    std_ms: float
    count: int


def latency_bench(
    procedure: Callable,
    inputs: Sequence,
    warmup: int = 5,
    repeats: int = 1,
    num_threads: int = 1,
) -> LatencyStats:
    """Per-input wall-clock time of ``procedure(x)`` at batch size 1.

    ``warmup`` untimed calls run first (cycling through ``inputs``). Each
    input is then timed ``repeats`` times and its mean is one sample; the
    result is the mean and population std over inputs. Torch runs on
    ``num_threads`` threads for the duration.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    if not inputs:
        raise ValueError("no inputs to benchmark")
    previous_threads = torch.get_num_threads()
    torch.set_num_threads(num_threads)
    try:
        for i in range(warmup):
            procedure(inputs[i % len(inputs)])
        samples = []
        for x in inputs:
            elapsed = 0.0
            for _ in range(repeats):
                start = time.perf_counter()
                procedure(x)
                elapsed += time.perf_counter() - start
            samples.append(1000.0 * elapsed / repeats)
    finally:
        torch.set_num_threads(previous_threads)
    samples = np.asarray(samples)
    return LatencyStats(float(samples.mean()), float(samples.std(ddof=0)), len(samples))


def speedup(candidate, baseline) -> float:
    """``baseline / candidate`` mean latency (accepts floats or :class:`LatencyStats`)."""
    a = candidate.mean_ms if isinstance(candidate, LatencyStats) else float(candidate)
    b = baseline.mean_ms if isinstance(baseline, LatencyStats) else float(baseline)
    if a <= 0:
        raise ValueError("candidate latency must be positive")
    return b / a


def throughput_bench(
    procedure: Callable[[Sequence], object],
    inputs: Sequence,
    batch_size: int = 64,
    num_threads: int = 1,
) -> float:
    """Sentences per second when ``procedure`` is fed batches of ``batch_size``."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if not inputs:
        raise ValueError("no inputs to benchmark")
    previous_threads = torch.get_num_threads()
    torch.set_num_threads(num_threads)
    try:
        start = time.perf_counter()
        for i in range(0, len(inputs), batch_size):
            procedure(inputs[i : i + batch_size])
        elapsed = time.perf_counter() - start
    finally:
        torch.set_num_threads(previous_threads)
    return len(inputs) / max(elapsed, 1e-9)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class SystemResult:
    name: str
    bleu: float
    exact_match: float
    latency_mean_ms: float
    latency_std_ms: float
    speedup: float = 1.0


@dataclass
class EvalReport:
    """Headline numbers of the refined model plus the baseline rows.

    ``per_step`` and ``tradeoff`` hold the tables of :func:`per_step_report`
    and :func:`tradeoff_report` as lists of row dicts when they were run.
    """

    bleu: float
    exact_match: float
    latency_mean_ms: float
    latency_std_ms: float
    systems: list[SystemResult] = field(default_factory=list)
    per_step: list[dict] = field(default_factory=list)
    tradeoff: list[dict] = field(default_factory=list)
    throughput: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.bleu <= 100.0:
            raise ValueError(f"BLEU {self.bleu} outside [0, 100]")
        if self.latency_std_ms < 0:
            raise ValueError("latency std must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def systems_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(s) for s in self.systems])

    def save(self, out_dir: Path) -> dict[str, Path]:
        """Write ``eval_report.json`` plus CSV tables; returns the paths written."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = {"report": out_dir / "eval_report.json", "systems": out_dir / "systems.csv"}
        written["report"].write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        self.systems_frame().to_csv(written["systems"], index=False)
        if self.per_step:
            written["per_step"] = out_dir / "per_step.csv"
            pd.DataFrame(self.per_step).to_csv(written["per_step"], index=False)
        if self.tradeoff:
            written["tradeoff"] = out_dir / "tradeoff.csv"
            pd.DataFrame(self.tradeoff).to_csv(written["tradeoff"], index=False)
        return written


def _as_tokens(ids: Sequence[int], vocab: Vocab | None) -> list[str]:
    return list(vocab.decode(ids)) if vocab is not None else [str(i) for i in ids]


def _score_system(
    name: str,
    outputs: Sequence[Sequence[int]],
    pairs: Sequence[SentencePair],
    latency: LatencyStats,
    vocab: Vocab | None,
) -> SystemResult:
    hyps = [_as_tokens(y, vocab) for y in outputs]
    refs = [_as_tokens(p.target, vocab) for p in pairs]
    return SystemResult(
        name=name,
        bleu=translation_bleu(hyps, refs),
        exact_match=exact_match([tuple(y) for y in outputs], [tuple(p.target) for p in pairs]),
        latency_mean_ms=latency.mean_ms,
        latency_std_ms=latency.std_ms,
    )


def _latency_inputs(pairs: Sequence[SentencePair], limit: int) -> list:
    sources = [p.source for p in pairs]
    return sources if limit == 0 else sources[:limit]


def evaluate(
    model: LatentNAR,
    teacher: TeacherModel | None,
    pairs: Sequence[SentencePair],
    vocab: Vocab | None = None,
    inference: InferenceConfig | None = None,
    config: EvalConfig | None = None,
    show_progress: bool = False,
) -> EvalReport:
    """Score the refined model and the reproducible baselines on ``pairs``.

    Systems: the teacher with beam search and greedily (when ``teacher`` is
    given), the model without refinement (T=0), with ``inference.steps``
    refinement steps, and with latent search over ``inference.candidates``
    samples. Speedups are relative to the teacher's beam search, or to the
    unrefined model when there is no teacher.
    """
    inference = inference or InferenceConfig()
    config = config or EvalConfig()
    if not pairs:
        raise ValueError("empty evaluation set")
    sources = [p.source for p in pairs]
    bench = _latency_inputs(pairs, config.latency_sentences)
    T = inference.steps

    def timed(name, decode_one):
        outputs = [decode_one(x) for x in tqdm(sources, desc=name, disable=not show_progress)]
        latency = latency_bench(decode_one, bench, config.latency_warmup, config.latency_repeats)
        logger.info("%s: %.2f ms/sentence", name, latency.mean_ms)
        return _score_system(name, outputs, pairs, latency, vocab)

    systems = []
    if teacher is not None:
        beam = inference.beam_size
        systems.append(timed(f"teacher-beam{beam}", lambda x: beam_decode(teacher, x, beam).tokens))
        systems.append(timed("teacher-greedy", lambda x: greedy_decode(teacher, x).tokens))
    systems.append(timed("nar-T0", lambda x: deterministic_inference(model, x, 0)[0]))
    refined = timed(f"nar-T{T}", lambda x: deterministic_inference(model, x, T)[0])
    systems.append(refined)
    if teacher is not None:
        N = inference.candidates
        systems.append(timed(
            f"nar-search-N{N}",
            lambda x: latent_search(model, teacher, x, N, inference.temperature, T, inference.seed),
        ))

    reference = systems[0]
    for s in systems:
        s.speedup = speedup(s.latency_mean_ms, reference.latency_mean_ms)

    throughput = throughput_bench(lambda batch: translate_batch(model, batch, T), sources)
    return EvalReport(
        bleu=refined.bleu,
        exact_match=refined.exact_match,
        latency_mean_ms=refined.latency_mean_ms,
        latency_std_ms=refined.latency_std_ms,
        systems=systems,
        throughput=throughput,
    )


def per_step_report(
    model: LatentNAR,
    pairs: Sequence[SentencePair],
    T: int,
    K: int = 20,
    seed: int = 0,
    vocab: Vocab | None = None,
    show_progress: bool = False,
) -> pd.DataFrame:
    """ELBO and quality of the step-t prediction for t = 0..T.

    A sentence that converged before step t keeps its last output. Columns:
    ``step, elbo, bleu, exact_match, converged`` where ``converged`` is the
    percentage of sentences whose output had stopped changing by step t.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    if not pairs:
        raise ValueError("empty evaluation set")
    per_step_outputs = [[] for _ in range(T + 1)]
    per_step_elbo = np.zeros((T + 1, len(pairs)))
    converged_at = []
    for j, pair in enumerate(tqdm(pairs, desc="per-step", disable=not show_progress)):
        _, trace = deterministic_inference(model, pair.source, T)
        converged_at.append(trace.steps if trace.converged else None)
        cache: dict[tuple, float] = {}
        for t in range(T + 1):
            y = trace.records[min(t, len(trace.records) - 1)].tokens
            if y not in cache:
                cache[y] = monte_carlo_elbo(model, SentencePair(tuple(pair.source), y), K, seed + j)
            per_step_outputs[t].append(y)
            per_step_elbo[t, j] = cache[y]

    refs_ids = [tuple(p.target) for p in pairs]
    refs = [_as_tokens(r, vocab) for r in refs_ids]
    rows = []
    for t in range(T + 1):
        outputs = per_step_outputs[t]
        done = sum(c is not None and c <= t for c in converged_at)
        rows.append({
            "step": t,
            "elbo": float(per_step_elbo[t].mean()),
            "bleu": translation_bleu([_as_tokens(y, vocab) for y in outputs], refs),
            "exact_match": exact_match(outputs, refs_ids),
            "converged": 100.0 * done / len(pairs),
        })
    return pd.DataFrame(rows)


def tradeoff_report(
    model: LatentNAR,
    teacher: TeacherModel,
    pairs: Sequence[SentencePair],
    candidate_counts: Sequence[int],
    T: int,
    seed: int = 0,
    temperature: float = 0.5,
    beam_size: int = 3,
    vocab: Vocab | None = None,
    config: EvalConfig | None = None,
    show_progress: bool = False,
) -> pd.DataFrame:
    """BLEU and speedup of latent search for each candidate count.

    Two series: ``refined`` runs ``T`` refinement steps per candidate and
    ``no-refinement`` runs none. Speedup is relative to the teacher's beam
    search latency on the same sentences.
    """
    config = config or EvalConfig()
    if not pairs:
        raise ValueError("empty evaluation set")
    bench = _latency_inputs(pairs, config.latency_sentences)
    baseline = latency_bench(lambda x: beam_decode(teacher, x, beam_size), bench,
                             config.latency_warmup, config.latency_repeats)
    refs = [_as_tokens(p.target, vocab) for p in pairs]

    rows = []
    for series, steps in (("refined", T), ("no-refinement", 0)):
        for N in candidate_counts:
            def search(x, N=N, steps=steps):
                return latent_search(model, teacher, x, N, temperature, steps, seed)

            outputs = [search(p.source) for p in tqdm(pairs, desc=f"{series} N={N}", disable=not show_progress)]
            latency = latency_bench(search, bench, config.latency_warmup, config.latency_repeats)
            rows.append({
                "series": series,
                "N": int(N),
                "T": steps,
                "bleu": translation_bleu([_as_tokens(y, vocab) for y in outputs], refs),
                "latency_ms": latency.mean_ms,
                "speedup": speedup(latency, baseline),
            })
            logger.info("%s N=%d: BLEU %.2f, speedup %.2fx", series, N, rows[-1]["bleu"], rows[-1]["speedup"])
    return pd.DataFrame(rows)


def length_adaptation_report(
    model: LatentNAR,
    pairs: Sequence[SentencePair],
    T: int,
    show_progress: bool = False,
) -> pd.DataFrame:
    """Sentences whose step-0 length is wrong, and whether refinement fixed it.

    One row per such sentence with columns ``sentence, reference_length,
    initial_length, final_length, corrected``. The fraction corrected is
    ``frame["corrected"].mean()``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    rows = []
    for i, pair in enumerate(tqdm(pairs, desc="length", disable=not show_progress)):
        _, trace = deterministic_inference(model, pair.source, T)
        initial, final = trace.records[0].length, trace.records[-1].length
        if initial == len(pair.target):
            continue
        rows.append({
            "sentence": i,
            "reference_length": len(pair.target),
            "initial_length": initial,
            "final_length": final,
            "corrected": final == len(pair.target),
        })
    frame = pd.DataFrame(rows, columns=["sentence", "reference_length", "initial_length", "final_length", "corrected"])
    if len(frame):
        logger.info("%d of %d wrong initial lengths corrected after %d steps",
                    int(frame["corrected"].sum()), len(frame), T)
    return frame
