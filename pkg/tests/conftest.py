import numpy as np
import pytest
import torch

from triseg.episodes import SyntheticDatasetSpec, generate_synthetic_dataset

# keep CPU math reproducible and cheap for the whole suite
torch.set_num_threads(2)


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticDatasetSpec(
        num_classes=4, image_size=48, samples_per_class=10, distractor_count=2,
        noise_level=0.02, seed=0,
    )
    return generate_synthetic_dataset(spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
