import numpy as np
import pytest

from locsens.baselines import BaselineConfig, train_baseline
from locsens.data import SyntheticConfig, build_synthetic_dataset
from locsens.nn.precision import set_default_dtype
from locsens.ranker import TrainConfig, TrainStrategy, TripletEmbeddings, train_locsens


@pytest.fixture(autouse=True)
def reset_dtype():
    yield
    set_default_dtype("float64")


@pytest.fixture(scope="session")
def small_planted():
    """A small planted dataset with a trained MCC and its embedding table,
    shared across test modules (float32 for speed)."""
    set_default_dtype("float32")
    config = SyntheticConfig(
        n_images=900,
        n_tags=24,
        d_feat=96,
        frac_place=0.25,
        frac_conditioned=0.25,
        frac_invariant=0.5,
        word_dim=48,
        feature_noise=0.05,
        seed=11,
    )
    dataset = build_synthetic_dataset(config, val_size=60, test_size=220)
    mcc = train_baseline(
        "mcc",
        dataset.train_records,
        len(dataset.vocab),
        BaselineConfig(epochs=60, batch_size=128, lr=3e-3, embed_dim=64),
        seed=11,
    ).model
    embeddings = TripletEmbeddings.from_mcc(mcc, dataset.records)
    set_default_dtype("float64")
    return dataset, mcc, embeddings


@pytest.fixture(scope="session")
def small_raw_model(small_planted):
    """A location-using triplet ranker trained on the small planted dataset."""
    dataset, _, embeddings = small_planted
    set_default_dtype("float32")
    model, logs = train_locsens(
        dataset.train_records,
        embeddings,
        TrainStrategy.raw(),
        TrainConfig(epochs=6, batch_size=96, lr=1e-3, seed=5),
    )
    set_default_dtype("float64")
    return model, logs


def rng(seed=0):
    return np.random.default_rng(seed)
