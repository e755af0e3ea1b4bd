import numpy as np
import pytest

from conservgp import datasets, trainer


@pytest.fixture(scope="session")
def toy_dataset():
    return datasets.generate(
        datasets.GeneratorConfig(kind="toy_series", n_samples=10, seed=7)
    )


@pytest.fixture(scope="session")
def toy_model(toy_dataset):
    # Shared moderately-trained surrogate; the acceptance suite trains its own
    # full-budget model.
    cfg = trainer.TrainConfig(epochs=30_000, seed=3, convergence_tol=None)
    return trainer.train_dataset(toy_dataset, cfg)


def random_spd(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)
