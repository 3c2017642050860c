"""Shared fixtures: a digit-to-word corpus, an untrained tiny model and
session-wide trained models (used by tests marked ``slow``)."""

from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace
import sys

import pytest

root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(root / "src"))

from latent_nar.config import load_config  # noqa: E402
from latent_nar.corpus import SyntheticTaskSpec, build_vocab, generate_synthetic, raw_pairs  # noqa: E402
from latent_nar.model import LatentNARConfig, build_model  # noqa: E402
from latent_nar.teacher import TeacherConfig, build_teacher, distill_corpus, train_teacher  # noqa: E402
from latent_nar.training import ScheduleConfig, train_nar  # noqa: E402


TINY = LatentNARConfig(latent_dim=4, hidden=16, ff=32, prior_layers=1, decoder_layers=1,
                       posterior_layers=1, heads=2, dropout=0.0)
TINY_TEACHER = TeacherConfig(hidden=16, ff=32, encoder_layers=1, decoder_layers=1, heads=2,
                             dropout=0.0, max_steps=0)


@pytest.fixture(scope="session")
def digit_data():
    """(vocab, encoded train pairs, encoded test pairs) for digit-to-word."""
    spec = SyntheticTaskSpec(kind="digit-to-word", min_len=1, max_len=6, seed=11)
    train = generate_synthetic(spec, 2000)
    test = generate_synthetic(replace(spec, seed=12), 100)
    vocab = build_vocab(raw_pairs(train))
    return vocab, vocab.encode_pairs(train), vocab.encode_pairs(test)


@pytest.fixture
def tiny_model(digit_data):
    vocab = digit_data[0]
    return build_model(len(vocab), TINY, seed=0).eval()


@pytest.fixture
def tiny_teacher(digit_data):
    vocab = digit_data[0]
    return build_teacher(len(vocab), TINY_TEACHER, seed=0).eval()


@pytest.fixture(scope="session")
def trained_models(digit_data):
    """A teacher and a latent-variable model trained on digit-to-word."""
    vocab, train, _ = digit_data
    teacher = train_teacher(
        train, len(vocab),
        TeacherConfig(max_steps=1500, warmup=200, lr_factor=0.5, log_every=500),
        seed=0,
    )
    model = train_nar(
        train, len(vocab), LatentNARConfig(),
        ScheduleConfig(max_steps=2500, warmup=200, lr_factor=0.5, log_every=500, eval_every=5000),
        seed=0,
    )
    return teacher, model


@pytest.fixture(scope="session")
def expand_contract():
    """Desk-profile run on expand-contract: the teacher, the model trained on
    distilled targets (``model``) and the one trained on raw targets (``raw``)."""
    config = load_config()
    data, seed = config.data, config.schedule.seed
    splits = [generate_synthetic(data.task_spec(i), size)
              for i, size in enumerate((data.train_size, data.valid_size, data.test_size))]
    vocab = build_vocab(raw_pairs(splits[0]), min_count=data.min_count)
    train, valid, test = (vocab.encode_pairs(split) for split in splits)

    teacher = train_teacher(train, len(vocab), config.teacher, seed=seed)
    distilled, _ = distill_corpus(teacher, train, config.inference.beam_size)
    model = train_nar(distilled, len(vocab), config.model, config.schedule, seed=seed, valid_pairs=valid)
    raw = train_nar(train, len(vocab), config.model, config.schedule, seed=seed, valid_pairs=valid)
    return SimpleNamespace(config=config, vocab=vocab, train=train, test=test,
                           teacher=teacher, model=model, raw=raw)
