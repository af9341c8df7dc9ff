import numpy as np
import pytest

from anysat.data import DatasetSpec, MemoryDataset, ModalitySpec, SyntheticConfig, registry_from, validate_dataset_spec
from anysat.model import AnySat, ModelConfig

TINY = ModelConfig(E=16, heads=2, encoder_blocks=1, combiner_blocks=1, predictor_blocks=1, ltae_heads=2, ltae_dk=4)


def two_modality_registry():
    return registry_from(
        [
            ModalitySpec("ts", 10.0, (3, 5), 4, 1),
            ModalitySpec("img", 2.5, (1, 1), 3, 2, has_dates=False),
        ]
    )


def tiny_dataset(num_tiles=6, S=20.0, P_d=(10.0,), B=2, seed=0, **synth):
    reg = two_modality_registry()
    spec = DatasetSpec("tiny", S, ["ts", "img"], B, list(P_d), num_tiles)
    info = validate_dataset_spec(spec, reg)
    cfg = SyntheticConfig(seed=seed, K=3, **synth)
    return MemoryDataset.generate(info, cfg)


@pytest.fixture
def registry():
    return two_modality_registry()


@pytest.fixture
def tiny_ds():
    return tiny_dataset()


@pytest.fixture
def tiny_model(registry):
    return AnySat(registry, TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
