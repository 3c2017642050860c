"""Tests for the KL term, the budget schedule and the ELBO loss."""

from pathlib import Path
import math
import sys

import numpy as np
import pytest
import torch
from torch.distributions import Normal, kl_divergence

root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(root / "src"))

from latent_nar import objective as ob  # noqa: E402
from latent_nar.batching import Batch  # noqa: E402
from latent_nar.corpus import SentencePair, SyntheticTaskSpec, build_vocab, generate_synthetic, raw_pairs  # noqa: E402
from latent_nar.errors import NonFiniteLossError  # noqa: E402
from latent_nar.model import GaussianSequence, LatentNARConfig, build_model  # noqa: E402
from latent_nar.training import ScheduleConfig, train_nar  # noqa: E402


def _gauss(mean, std):
    return GaussianSequence(torch.tensor([[mean]], dtype=torch.float64),
                            torch.tensor([[std]], dtype=torch.float64))


@pytest.mark.parametrize("q, p, expected", [
    ((0.0, 1.0), (0.0, 1.0), 0.0),
    ((1.0, 1.0), (0.0, 1.0), 0.5),
    ((0.0, 2.0), (0.0, 1.0), 1.5 - math.log(2.0)),
])
def test_gaussian_kl_closed_form(q, p, expected):
    kl = ob.gaussian_kl(_gauss(*q), _gauss(*p))
    assert kl.shape == (1,)
    assert float(kl) == pytest.approx(expected, abs=1e-6)


def test_gaussian_kl_matches_torch_distributions():
    torch.manual_seed(0)
    shape = (2, 5, 3)
    q = GaussianSequence(torch.randn(shape), torch.rand(shape) + 0.1)
    p = GaussianSequence(torch.randn(shape), torch.rand(shape) + 0.1)
    expected = kl_divergence(Normal(q.means, q.stds), Normal(p.means, p.stds)).sum(-1)
    assert torch.allclose(ob.gaussian_kl(q, p), expected, atol=1e-5)


def test_gaussian_kl_rejects_non_positive_std():
    with pytest.raises(ValueError, match="strictly positive"):
        ob.gaussian_kl(_gauss(0.0, 0.0), _gauss(0.0, 1.0))


def test_budget_schedule_piecewise():
    assert ob.budget_schedule(0, 100) == 1.0
    assert ob.budget_schedule(49, 100) == 1.0
    assert ob.budget_schedule(50, 100) == 1.0
    assert ob.budget_schedule(75, 100) == 0.5
    assert ob.budget_schedule(100, 100) == 0.0
    assert ob.TrainSchedule(80, 100).budget == pytest.approx(0.4)
    with pytest.raises(ValueError):
        ob.budget_schedule(101, 100)
    with pytest.raises(ValueError):
        ob.TrainSchedule(0, 1)


def test_budgeted_kl_stops_gradient_below_budget():
    kl = torch.tensor([[0.2, 1.5, 3.0]], requires_grad=True)
    mask = torch.tensor([[True, True, False]])
    total = ob.budgeted_kl(kl, 1.0, mask)
    assert float(total) == pytest.approx(2.5)
    total.backward()
    assert kl.grad.tolist() == [[0.0, 1.0, 0.0]]
    assert float(ob.budgeted_kl(torch.tensor([0.2, 1.5]), 0.0)) == pytest.approx(1.7)


def _pairs():
    return [SentencePair((4, 5, 6), (7, 8)), SentencePair((9,), (10, 11, 12)), SentencePair((5, 6), (7, 8))]


def test_elbo_loss_terms_add_up(tiny_model):
    batch = Batch.from_pairs(_pairs())
    out = ob.elbo_loss(tiny_model, batch, ob.TrainSchedule(10, 10), generator=torch.Generator().manual_seed(0))
    expected = -(out.reconstruction + out.length_log_prob) + out.kl_budgeted
    assert torch.allclose(out.total, expected)
    # zero budget at the last step
    assert float(out.kl_budgeted) == pytest.approx(float(out.kl_raw), rel=1e-6)
    assert float(out.reconstruction) <= 0 and float(out.length_log_prob) <= 0
    assert out.num_tokens == 7

    logged = out.as_dict()
    assert set(logged) == {"loss", "recon", "length_lp", "kl_raw", "kl_budgeted", "b"}
    assert logged["loss"] == pytest.approx(float(out.total) / 7)


def test_budget_raises_loss_early_in_training(tiny_model):
    batch = Batch.from_pairs(_pairs())
    noise = torch.zeros(3, 3, tiny_model.config.latent_dim)
    early = ob.elbo_loss(tiny_model, batch, ob.TrainSchedule(0, 10), noise=noise)
    late = ob.elbo_loss(tiny_model, batch, ob.TrainSchedule(10, 10), noise=noise)
    assert early.budget == 1.0 and late.budget == 0.0
    assert float(early.kl_budgeted) >= float(late.kl_budgeted)
    assert float(early.kl_budgeted) >= 1.0 * 6 - 1e-6


def test_fixed_noise_is_deterministic(tiny_model):
    batch = Batch.from_pairs(_pairs())
    noise = torch.randn(3, 3, tiny_model.config.latent_dim, generator=torch.Generator().manual_seed(3))
    a = ob.elbo_loss(tiny_model, batch, ob.TrainSchedule(5, 10), noise=noise)
    b = ob.elbo_loss(tiny_model, batch, ob.TrainSchedule(5, 10), noise=noise)
    assert torch.equal(a.total, b.total)


def test_non_finite_terms_are_named(tiny_model, monkeypatch):
    batch = Batch.from_pairs(_pairs())
    original = tiny_model.decode_tokens

    def broken(*args):
        return original(*args) * float("nan")

    monkeypatch.setattr(tiny_model, "decode_tokens", broken)
    with pytest.raises(NonFiniteLossError, match="reconstruction") as info:
        ob.elbo_loss(tiny_model, batch, ob.TrainSchedule(0, 10))
    assert info.value.component == "reconstruction"


def test_monte_carlo_elbo_is_seeded_and_bounded(tiny_model):
    pair = SentencePair((4, 5, 6), (7, 8, 9))
    a = ob.monte_carlo_elbo(tiny_model, pair, samples=8, seed=1)
    b = ob.monte_carlo_elbo(tiny_model, pair, samples=8, seed=1)
    assert a == b
    assert a <= 0.0
    with pytest.raises(ValueError):
        ob.monte_carlo_elbo(tiny_model, pair, samples=0)


def test_elbo_gradients_match_finite_differences(digit_data):
    config = LatentNARConfig(latent_dim=4, hidden=8, ff=16, prior_layers=1, decoder_layers=1,
                             posterior_layers=1, heads=2, dropout=0.0)
    model = build_model(len(digit_data[0]), config, seed=0).double()
    batch = Batch.from_pairs(_pairs())
    noise = torch.randn(3, 3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    schedule = ob.TrainSchedule(10, 10)

    def loss():
        return ob.elbo_loss(model, batch, schedule, noise=noise).total

    model.zero_grad()
    loss().backward()
    entries = [
        (p, idx)
        for p in model.parameters()
        for idx in torch.nonzero(p.grad.abs() > 1e-3).tolist()
    ]
    g = torch.Generator().manual_seed(1)
    chosen = [entries[int(i)] for i in torch.randperm(len(entries), generator=g)[:60]]
    assert len(chosen) >= 50

    eps = 1e-6
    with torch.no_grad():
        for p, idx in chosen:
            idx = tuple(idx)
            analytic = float(p.grad[idx])
            original = float(p[idx])
            p[idx] = original + eps
            plus = float(loss())
            p[idx] = original - eps
            minus = float(loss())
            p[idx] = original
            numeric = (plus - minus) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
            assert rel <= 1e-4, (idx, analytic, numeric)


def test_uniform_outputs_give_counting_arithmetic(tiny_model):
    with torch.no_grad():
        for layer in (tiny_model.decoder.generator, tiny_model.length.proj):
            layer.weight.zero_()
            layer.bias.zero_()
    batch = Batch.from_pairs(_pairs())
    out = ob.elbo_loss(tiny_model, batch, ob.TrainSchedule(10, 10), generator=torch.Generator().manual_seed(0))
    V = tiny_model.vocab_size
    # 2 + 3 + 2 target tokens, one length term per sentence
    assert float(out.reconstruction) == pytest.approx(7 * math.log(1 / V), abs=1e-4)
    assert float(out.length_log_prob) == pytest.approx(3 * math.log(1 / 101), abs=1e-4)
    assert float(out.total) == pytest.approx(-(7 * math.log(1 / V) + 3 * math.log(1 / 101)) + float(out.kl_raw),
                                             abs=1e-3)


def test_monte_carlo_variance_shrinks_with_samples(tiny_model):
    pair = SentencePair((4, 5, 6), (7, 8, 9))
    single = [ob.monte_carlo_elbo(tiny_model, pair, samples=1, seed=s) for s in range(30)]
    averaged = [ob.monte_carlo_elbo(tiny_model, pair, samples=20, seed=s) for s in range(30)]
    assert np.var(single) > 0
    assert np.var(averaged) < 0.25 * np.var(single)


def _mean_kl(model, pairs):
    batch = Batch.from_pairs(pairs)
    with torch.no_grad():
        prior, _ = model.prior_encode(batch.src, batch.src_mask)
        posterior = model.posterior_encode(batch.src, batch.src_mask, batch.tgt, batch.tgt_mask)
        kl = ob.gaussian_kl(posterior, prior).masked_fill(~batch.src_mask, 0.0)
    return float(kl.sum() / batch.src_mask.sum())


def _elbo_per_token(model, pairs):
    total = sum(ob.monte_carlo_elbo(model, p, samples=20, seed=i) for i, p in enumerate(pairs))
    return total / sum(len(p.target) for p in pairs)


@pytest.mark.slow
def test_training_shrinks_kl_and_raises_elbo():
    spec = SyntheticTaskSpec(kind="identity-copy", min_len=2, max_len=8, seed=21)
    train = generate_synthetic(spec, 1000)
    held_out = generate_synthetic(SyntheticTaskSpec(kind="identity-copy", min_len=2, max_len=8, seed=22), 50)
    vocab = build_vocab(raw_pairs(train + held_out))
    train, held_out = vocab.encode_pairs(train), vocab.encode_pairs(held_out)

    config = LatentNARConfig()
    schedule = ScheduleConfig(max_steps=800, warmup=200, lr_factor=0.5, batch_size=32,
                              log_every=1000, eval_every=10_000)
    initial = build_model(len(vocab), config, seed=0).eval()
    trained = train_nar(train, len(vocab), config, schedule, seed=0)

    assert _mean_kl(trained, held_out) < _mean_kl(initial, held_out)
    assert _elbo_per_token(trained, held_out) > _elbo_per_token(initial, held_out)
