import pytest
import torch

from storyviz.captioner import VideoCaptioner
from storyviz.config import load_config
from storyviz.data import generate_shape_stories, split_dataset

# Small enough that a full train/eval cycle runs in seconds on a CPU.
TINY = [
    "data.num_stories=24",
    "data.story_length=3",
    "data.image_size=16",
    "data.val_fraction=0.25",
    "data.test_fraction=0.25",
    "text.word_dim=8",
    "text.sentence_dim=12",
    "text.cond_dim=10",
    "mart.hidden_size=16",
    "mart.num_layers=1",
    "mart.num_heads=2",
    "mart.num_memory_cells=2",
    "mart.dropout=0.0",
    "context.gist_channels=8",
    "context.gist_signal_dim=6",
    "context.gru_dim=8",
    "generator.base_channels=8",
    "generator.feature_grid=2",
    "discriminator.base_channels=8",
    "captioner.region_dim=16",
    "captioner.max_epochs=1",
    "captioner.batch_size=8",
    "classifier.feature_dim=16",
    "classifier.epochs=1",
    "classifier.batch_size=16",
    "damsm.embed_dim=16",
    "damsm.epochs=1",
    "damsm.batch_size=4",
    "train.image_batch_size=4",
    "train.story_batch_size=2",
    "train.epochs=2",
    "train.steps_per_epoch=2",
    "train.checkpoint_every=1",
    "eval.num_negatives=2",
    "eval.r_precision_runs=2",
    "eval.r_precision_mismatches=3",
]


def tiny_config(output_dir, *extra):
    return load_config(overrides=TINY + list(extra), output_dir=str(output_dir))


@pytest.fixture
def cfg(tmp_path):
    return tiny_config(tmp_path / "run")


@pytest.fixture(scope="session")
def session_cfg(tmp_path_factory):
    return tiny_config(tmp_path_factory.mktemp("session-run"))


@pytest.fixture(scope="session")
def corpus(session_cfg):
    return generate_shape_stories(session_cfg.data, seed=0)


@pytest.fixture(scope="session")
def splits(corpus, session_cfg):
    return split_dataset(corpus, session_cfg.data.val_fraction, session_cfg.data.test_fraction, seed=0)


@pytest.fixture(scope="session")
def train_ds(splits):
    return splits["train"]


@pytest.fixture(scope="session")
def val_ds(splits):
    return splits["val"]


@pytest.fixture
def frozen_captioner(session_cfg, corpus):
    """Untrained but frozen; enough for shape and gradient checks."""
    torch.manual_seed(0)
    model = VideoCaptioner(
        session_cfg.mart, session_cfg.captioner, len(corpus.vocab), session_cfg.data.image_size,
        corpus.max_caption_len, corpus.vocab.checksum(),
    )
    return model.freeze()
