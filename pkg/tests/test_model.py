"""Tests for the model components and the length transform."""

from pathlib import Path
import itertools
import logging
import math
import sys

import numpy as np
import pytest
import torch
from scipy.special import softmax
from scipy.stats import norm

root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(root / "src"))

from latent_nar import model as mm  # noqa: E402
from latent_nar.layers import causal_mask, padding_mask  # noqa: E402


# ---------------------------------------------------------------------------
# masks and Gaussians
# ---------------------------------------------------------------------------

def test_masks():
    mask = padding_mask(torch.tensor([1, 3]), 4)
    assert mask.tolist() == [[True, False, False, False], [True, True, True, False]]
    causal = causal_mask(3)
    assert causal.shape == (1, 3, 3)
    assert causal[0].tolist() == [[True, False, False], [True, True, False], [True, True, True]]


def test_gaussian_log_density_matches_scipy():
    torch.manual_seed(0)
    means, stds = torch.randn(3, 2, dtype=torch.float64), torch.rand(3, 2, dtype=torch.float64) + 0.5
    z = torch.randn(3, 2, dtype=torch.float64)
    expected = norm.logpdf(z.numpy(), means.numpy(), stds.numpy()).sum()
    got = mm.GaussianSequence(means, stds).log_density(z)
    assert float(got) == pytest.approx(expected, abs=1e-10)


def test_gaussian_shapes_must_agree():
    with pytest.raises(ValueError):
        mm.GaussianSequence(torch.zeros(3, 2), torch.ones(3, 4))


def test_reparameterize_is_differentiable():
    means = torch.zeros(2, 3, requires_grad=True)
    stds = torch.ones(2, 3, requires_grad=True)
    noise = torch.full((2, 3), 0.5)
    z = mm.reparameterize(mm.GaussianSequence(means, stds), noise)
    z.sum().backward()
    assert torch.equal(means.grad, torch.ones(2, 3))
    assert torch.equal(stds.grad, noise)
    with pytest.raises(ValueError, match="noise shape"):
        mm.reparameterize(mm.GaussianSequence(means, stds), torch.zeros(3, 3))


# ---------------------------------------------------------------------------
# length transform
# ---------------------------------------------------------------------------

def test_length_transform_two_by_two():
    z = torch.eye(2, dtype=torch.float64)
    out, weights = mm.length_transform(z, 2, 1.0, return_weights=True)
    assert weights[0].tolist() == pytest.approx([0.6225, 0.3775], abs=1e-4)
    assert weights[1].tolist() == pytest.approx([0.3775, 0.6225], abs=1e-4)
    assert torch.allclose(out, weights)


def test_length_transform_matches_softmax_oracle():
    n, length, sigma = 5, 7, 0.8
    z = torch.randn(n, 3, dtype=torch.float64)
    _, weights = mm.length_transform(z, length, sigma, return_weights=True)
    k = np.arange(1, n + 1)
    for j in range(1, length + 1):
        logits = -((k - j * n / length) ** 2) / (2 * sigma ** 2)
        assert weights[j - 1].numpy() == pytest.approx(softmax(logits), abs=1e-10)


def test_length_transform_small_sigma_is_identity():
    torch.manual_seed(1)
    z = torch.randn(6, 4)
    out = mm.length_transform(z, 6, 0.01)
    assert torch.allclose(out, z, atol=1e-6)


def test_length_transform_properties_sweep():
    for n, length, sigma in itertools.product(range(1, 13), range(1, 13), (0.25, 1.0, 4.0)):
        z = torch.randn(n, 3, dtype=torch.float64)
        z2 = torch.randn(n, 3, dtype=torch.float64)
        out, weights = mm.length_transform(z, length, sigma, return_weights=True)
        assert out.shape == (length, 3)
        assert torch.allclose(weights.sum(-1), torch.ones(length, dtype=torch.float64), atol=1e-6)
        assert bool((weights >= 0).all())
        peaks = weights.argmax(-1)
        assert bool((peaks[1:] >= peaks[:-1]).all()), (n, length, sigma)
        combined = mm.length_transform(2.0 * z - 3.0 * z2, length, sigma)
        expected = 2.0 * out - 3.0 * mm.length_transform(z2, length, sigma)
        assert torch.allclose(combined, expected, atol=1e-6)


def test_length_transform_rejects_bad_lengths():
    z = torch.zeros(3, 2)
    with pytest.raises(ValueError, match="at least 1"):
        mm.length_transform(z, 0, 1.0)
    with pytest.raises(ValueError, match="exceeds"):
        mm.length_transform(z, 3 + 51, 1.0)
    assert mm.length_transform(z, 53, 1.0, max_offset=None).shape == (53, 2)


def test_length_transform_ignores_padding():
    torch.manual_seed(2)
    short, long_ = torch.randn(2, 3), torch.randn(4, 3)
    batch = torch.zeros(2, 4, 3)
    batch[0, :2], batch[1] = short, long_
    out = mm.length_transform(batch, torch.tensor([3, 5]), 1.0, src_lengths=torch.tensor([2, 4]))
    assert out.shape == (2, 5, 3)
    assert torch.allclose(out[0, :3], mm.length_transform(short, 3, 1.0), atol=1e-6)
    assert torch.allclose(out[1], mm.length_transform(long_, 5, 1.0), atol=1e-6)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

def _batch(lengths, vocab_size, seed=0):
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(4, vocab_size, (len(lengths), max(lengths)), generator=g)
    lengths = torch.tensor(lengths)
    mask = padding_mask(lengths, ids.size(1))
    return ids.masked_fill(~mask, 0), lengths, mask


def test_component_shapes(tiny_model):
    V, D = tiny_model.vocab_size, tiny_model.config.latent_dim
    src, src_len, src_mask = _batch([3, 5], V)
    tgt, tgt_len, tgt_mask = _batch([4, 2], V, seed=1)
    prior, enc = tiny_model.prior_encode(src, src_mask)
    posterior = tiny_model.posterior_encode(src, src_mask, tgt, tgt_mask)
    assert prior.means.shape == posterior.means.shape == (2, 5, D)
    assert enc.shape == (2, 5, tiny_model.config.hidden)
    assert bool((prior.stds >= 1e-3).all()) and bool((posterior.stds >= 1e-3).all())

    length_lp = tiny_model.predict_length(prior.means, src_mask)
    assert length_lp.shape == (2, 101)
    assert torch.allclose(length_lp.exp().sum(-1), torch.ones(2), atol=1e-5)

    z_bar = tiny_model.stretch(posterior.means, tgt_len, src_len)
    token_lp = tiny_model.decode_tokens(z_bar, enc, src_mask, tgt_mask)
    assert token_lp.shape == (2, 4, V)


def test_posterior_depends_on_target(tiny_model):
    V = tiny_model.vocab_size
    src, _, src_mask = _batch([4], V)
    a = torch.tensor([[5, 6, 7]])
    b = torch.tensor([[8, 6, 7]])
    mask = torch.ones(1, 3, dtype=torch.bool)
    qa = tiny_model.posterior_encode(src, src_mask, a, mask)
    qb = tiny_model.posterior_encode(src, src_mask, b, mask)
    assert not torch.allclose(qa.means, qb.means)


def test_offset_classes_clamp_with_warning(tiny_model, caplog):
    with caplog.at_level(logging.WARNING, logger="latent_nar.model"):
        classes = tiny_model.offset_classes(torch.tensor([3, 2]), torch.tensor([3, 70]))
    assert classes.tolist() == [50, 100]
    assert "clamping 1 length offsets" in caplog.text


def test_lengths_from_classes_floor_at_one(tiny_model):
    lengths = tiny_model.lengths_from_classes(torch.tensor([0, 50, 53]), torch.tensor([4, 4, 4]))
    assert lengths.tolist() == [1, 4, 7]


def test_sigma_is_trainable_and_positive(tiny_model):
    assert tiny_model.sigma == pytest.approx(1.0)
    names = dict(tiny_model.named_parameters())
    assert "length_transform.sigma" in names
    with torch.no_grad():
        names["length_transform.sigma"].fill_(-2.0)
    assert tiny_model.sigma == pytest.approx(2.0)


def test_max_pooling_variant(digit_data):
    config = mm.LatentNARConfig(latent_dim=4, hidden=16, ff=32, prior_layers=1, decoder_layers=1,
                                posterior_layers=1, heads=2, dropout=0.0, length_pooling="max")
    model = mm.build_model(len(digit_data[0]), config, seed=0).eval()
    z = torch.zeros(1, 3, 4)
    z[0, 1] = 1.0
    mask = torch.tensor([[True, True, False]])
    shifted = z.clone()
    shifted[0, 2] = 100.0
    assert torch.allclose(model.predict_length(z, mask), model.predict_length(shifted, mask))


def test_config_validation_and_profiles():
    with pytest.raises(ValueError, match="divisible"):
        mm.LatentNARConfig(hidden=10, heads=4)
    with pytest.raises(ValueError, match="length_pooling"):
        mm.LatentNARConfig(length_pooling="sum")
    full = mm.LatentNARConfig.full()
    assert (full.hidden, full.ff, full.prior_layers, full.posterior_layers) == (512, 2048, 6, 3)
    assert full.latent_dim == 8 and full.num_offsets == 101


def test_build_model_is_seeded(digit_data):
    config = mm.LatentNARConfig(hidden=16, ff=32, heads=2)
    a = mm.build_model(len(digit_data[0]), config, seed=4)
    b = mm.build_model(len(digit_data[0]), config, seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert math.isclose(a.sigma, 1.0)


def test_reparameterized_samples_match_the_gaussian():
    n = 200_000
    mu, sigma = torch.tensor([0.5, -2.0, 3.0]), torch.tensor([1.0, 0.25, 2.0])
    g = mm.GaussianSequence(mu.expand(n, 3), sigma.expand(n, 3))
    noise = torch.randn(n, 3, generator=torch.Generator().manual_seed(0))
    z = mm.reparameterize(g, noise)
    assert torch.allclose(z.mean(0), mu, atol=0.02)
    assert torch.allclose(z.std(0), sigma, rtol=0.02)


def test_token_decoder_sees_every_position(tiny_model):
    V, D = tiny_model.vocab_size, tiny_model.config.latent_dim
    src, _, src_mask = _batch([4], V)
    _, enc = tiny_model.prior_encode(src, src_mask)
    z_bar = torch.randn(1, 5, D, generator=torch.Generator().manual_seed(0))
    tgt_mask = torch.ones(1, 5, dtype=torch.bool)
    with torch.no_grad():
        reference = tiny_model.decode_tokens(z_bar, enc, src_mask, tgt_mask)
        for j in (0, 2, 4):
            changed = z_bar.clone()
            changed[0, j] += 3.0
            out = tiny_model.decode_tokens(changed, enc, src_mask, tgt_mask)
            for i in range(5):
                if i != j:
                    assert not torch.allclose(out[0, i], reference[0, i], atol=1e-6), (i, j)


def test_prior_depends_on_source_order(tiny_model):
    src = torch.tensor([[5, 6, 7, 8]])
    swapped = torch.tensor([[6, 5, 7, 8]])
    mask = torch.ones(1, 4, dtype=torch.bool)
    with torch.no_grad():
        a, _ = tiny_model.prior_encode(src, mask)
        b, _ = tiny_model.prior_encode(swapped, mask)
    assert not torch.allclose(a.means, b.means)
    assert not torch.allclose(b.means[0, [1, 0, 2, 3]], a.means[0])


def test_zero_length_weights_give_uniform_offsets(tiny_model):
    with torch.no_grad():
        tiny_model.length.proj.weight.zero_()
        tiny_model.length.proj.bias.zero_()
        z = torch.randn(2, 3, tiny_model.config.latent_dim)
        probs = tiny_model.predict_length(z, torch.ones(2, 3, dtype=torch.bool)).exp()
    assert torch.allclose(probs, torch.full((2, 101), 1 / 101), atol=1e-7)
