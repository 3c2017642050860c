"""Tests for BLEU, exact match, latency measurement and the reports."""

from pathlib import Path
import json
import math
import sys
import time

import numpy as np
import pytest
import sacrebleu
import torch

root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(root / "src"))

from latent_nar import evaluation as ev  # noqa: E402
from latent_nar.config import EvalConfig, InferenceConfig  # noqa: E402
from latent_nar.inference import translate_batch  # noqa: E402


# ---------------------------------------------------------------------------
# repetition removal and BLEU
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("tokens, expected", [
    (["a", "a", "b", "a"], ["a", "b", "a"]),
    ([], []),
    (["the", "the", "the", "cat"], ["the", "cat"]),
])
def test_remove_repetitions(tokens, expected):
    assert ev.remove_repetitions(tokens) == expected
    assert ev.remove_repetitions(ev.remove_repetitions(tokens)) == expected


def test_bleu_identical_is_100():
    refs = [["a", "b", "c", "d", "e"], ["f", "g", "h", "i"]]
    assert ev.corpus_bleu(refs, refs) == pytest.approx(100.0)


def test_bleu_brevity_penalty_example():
    score = ev.corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
    assert score == pytest.approx(100 * math.exp(1 - 5 / 4), abs=1e-6)
    assert score == pytest.approx(77.88, abs=0.01)


def test_bleu_smooths_only_zero_higher_order_precisions():
    # unigram 2/3, bigram 1/2, trigram 0/1 -> 1/2, no 4-grams -> 1/1
    score = ev.corpus_bleu([["a", "b", "x"]], [["a", "b", "c"]])
    hyp_unigram_only = ev.corpus_bleu([["x", "y", "z"]], [["a", "b", "c"]])
    assert hyp_unigram_only == 0.0
    expected = 100 * math.exp((math.log(2 / 3) + math.log(1 / 2) + math.log(1 / 2) + math.log(1.0)) / 4)
    assert score == pytest.approx(expected)


def test_bleu_argument_checks():
    with pytest.raises(ValueError, match="empty corpus"):
        ev.corpus_bleu([], [])
    with pytest.raises(ValueError):
        ev.corpus_bleu([["a"]], [["a"], ["b"]])


def _random_corpus(n, seed):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(20)]
    hyps, refs = [], []
    for _ in range(n):
        ref = [words[i] for i in rng.integers(0, len(words), size=int(rng.integers(4, 13)))]
        hyp = [words[int(rng.integers(0, len(words)))] if rng.random() < 0.2 else tok for tok in ref]
        if rng.random() < 0.3:
            hyp = hyp[:-1]
        refs.append(ref)
        hyps.append(hyp)
    return hyps, refs


def test_bleu_agrees_with_sacrebleu():
    hyps, refs = _random_corpus(200, seed=0)
    ours = ev.corpus_bleu(hyps, refs)
    theirs = sacrebleu.corpus_bleu(
        [" ".join(h) for h in hyps], [[" ".join(r) for r in refs]],
        smooth_method="none", tokenize="none",
    ).score
    assert abs(ours - theirs) < 0.1


def test_bleu_is_permutation_invariant():
    hyps, refs = _random_corpus(50, seed=1)
    order = np.random.default_rng(2).permutation(50)
    shuffled = ev.corpus_bleu([hyps[i] for i in order], [refs[i] for i in order])
    assert shuffled == pytest.approx(ev.corpus_bleu(hyps, refs))


def test_repetitions_removed_before_scoring():
    hyps = [["a", "a", "b", "c", "d"]]
    refs = [["a", "b", "c", "d"]]
    assert ev.corpus_bleu(hyps, refs) < 100.0
    assert ev.translation_bleu(hyps, refs) == pytest.approx(100.0)


def test_exact_match():
    assert ev.exact_match([(1, 2), (3,)], [(1, 2), (4,)]) == 50.0
    with pytest.raises(ValueError):
        ev.exact_match([], [])


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def test_latency_of_sleeping_stub():
    stats = ev.latency_bench(lambda x: time.sleep(0.01), list(range(20)), warmup=2, repeats=1)
    assert stats.count == 20
    assert 10.0 <= stats.mean_ms < 30.0
    assert stats.std_ms >= 0.0


def test_latency_of_constant_stub_has_small_std():
    stats = ev.latency_bench(lambda x: None, list(range(50)), warmup=0, repeats=3)
    assert stats.std_ms < 2.0


def test_latency_warmup_and_repeats_and_threads():
    calls = []
    before = torch.get_num_threads()
    seen_threads = []

    def procedure(x):
        calls.append(x)
        seen_threads.append(torch.get_num_threads())

    ev.latency_bench(procedure, [1, 2, 3], warmup=4, repeats=2)
    assert calls == [1, 2, 3, 1] + [1, 1, 2, 2, 3, 3]
    assert set(seen_threads) == {1}
    assert torch.get_num_threads() == before
    with pytest.raises(ValueError):
        ev.latency_bench(procedure, [1], repeats=0)


def test_speedup():
    a = ev.LatencyStats(5.0, 0.1, 10)
    assert ev.speedup(a, a) == 1.0
    assert ev.speedup(a, ev.LatencyStats(10.0, 0.1, 10)) == 2.0
    assert ev.speedup(2.0, 3.0) == 1.5


def test_throughput_bench_batches_inputs():
    sizes = []
    rate = ev.throughput_bench(lambda batch: sizes.append(len(batch)), list(range(10)), batch_size=4)
    assert sizes == [4, 4, 2]
    assert rate > 0


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def test_eval_report_validation_and_save(tmp_path):
    with pytest.raises(ValueError):
        ev.EvalReport(bleu=101.0, exact_match=0.0, latency_mean_ms=1.0, latency_std_ms=0.0)
    with pytest.raises(ValueError):
        ev.EvalReport(bleu=10.0, exact_match=0.0, latency_mean_ms=1.0, latency_std_ms=-1.0)

    report = ev.EvalReport(
        bleu=50.0, exact_match=40.0, latency_mean_ms=2.0, latency_std_ms=0.5,
        systems=[ev.SystemResult("nar-T1", 50.0, 40.0, 2.0, 0.5)],
        per_step=[{"step": 0, "elbo": -3.0, "bleu": 45.0}],
    )
    written = report.save(tmp_path)
    assert set(written) == {"report", "systems", "per_step"}
    loaded = json.loads(written["report"].read_text(encoding="utf-8"))
    assert loaded["bleu"] == 50.0
    assert loaded["systems"][0]["name"] == "nar-T1"


def _small_pairs(digit_data, n=6):
    return digit_data[2][:n]


def test_per_step_report_rows(tiny_model, digit_data):
    pairs = _small_pairs(digit_data)
    table = ev.per_step_report(tiny_model, pairs, T=2, K=2, seed=0)
    assert list(table["step"]) == [0, 1, 2]
    assert list(table.columns) == ["step", "elbo", "bleu", "exact_match", "converged"]
    single_pass = translate_batch(tiny_model, [p.source for p in pairs], T=0)
    refs = [[str(i) for i in p.target] for p in pairs]
    expected = ev.translation_bleu([[str(i) for i in y] for y in single_pass], refs)
    assert table.loc[0, "bleu"] == pytest.approx(expected)
    assert table.loc[0, "converged"] == 0.0
    assert (table["converged"].diff().dropna() >= 0).all()


def test_length_adaptation_rows_are_consistent(tiny_model, digit_data):
    pairs = _small_pairs(digit_data, 8)
    table = ev.length_adaptation_report(tiny_model, pairs, T=2)
    assert list(table.columns) == ["sentence", "reference_length", "initial_length", "final_length", "corrected"]
    for row in table.itertuples(index=False):
        assert row.initial_length != row.reference_length
        assert row.corrected == (row.final_length == row.reference_length)
        assert row.initial_length == len(translate_batch(tiny_model, [pairs[row.sentence].source], T=0)[0])
    with pytest.raises(ValueError):
        ev.length_adaptation_report(tiny_model, pairs, T=0)


def test_tradeoff_report_series(tiny_model, tiny_teacher, digit_data):
    pairs = _small_pairs(digit_data, 4)
    config = EvalConfig(latency_warmup=0, latency_sentences=2)
    table = ev.tradeoff_report(tiny_model, tiny_teacher, pairs, [1, 3], T=1, config=config)
    assert list(table["series"]) == ["refined", "refined", "no-refinement", "no-refinement"]
    assert list(table["N"]) == [1, 3, 1, 3]
    assert list(table["T"]) == [1, 1, 0, 0]
    assert (table["speedup"] > 0).all()


def test_evaluate_lists_baselines(tiny_model, tiny_teacher, digit_data):
    pairs = _small_pairs(digit_data, 4)
    report = ev.evaluate(
        tiny_model, tiny_teacher, pairs,
        inference=InferenceConfig(steps=1, candidates=2),
        config=EvalConfig(latency_warmup=0, latency_sentences=2),
    )
    names = [s.name for s in report.systems]
    assert names == ["teacher-beam3", "teacher-greedy", "nar-T0", "nar-T1", "nar-search-N2"]
    refined = report.systems[3]
    assert report.bleu == refined.bleu
    assert report.systems[0].speedup == 1.0
    assert 0.0 <= report.exact_match <= 100.0
    assert report.throughput > 0


def test_evaluate_without_teacher(tiny_model, digit_data):
    report = ev.evaluate(tiny_model, None, _small_pairs(digit_data, 3),
                         config=EvalConfig(latency_warmup=0, latency_sentences=1))
    assert [s.name for s in report.systems] == ["nar-T0", "nar-T1"]


@pytest.mark.slow
def test_refinement_does_not_lower_elbo(trained_models, digit_data):
    _, model = trained_models
    vocab, _, test = digit_data
    table = ev.per_step_report(model, test[:50], T=2, K=20, seed=0, vocab=vocab)
    assert table.loc[1, "elbo"] >= table.loc[0, "elbo"] - 1e-6
    assert table.loc[1, "bleu"] >= table.loc[0, "bleu"] - 1.0

