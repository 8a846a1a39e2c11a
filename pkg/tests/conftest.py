import numpy as np
import pytest

from ghostspec.fingerprint import extract_fingerprint
from ghostspec.transforms import SyntheticFamilySpec, base_model


def fingerprint_of(model, variant="attention_invariant"):
    handle = model.checkpoint()
    return extract_fingerprint(handle, model.layout(), variant=variant, model_id=model.name)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticFamilySpec(d_model=64, num_layers=8, num_heads=4, head_dim=16, seed=0)


@pytest.fixture(scope="session")
def small_model(small_spec):
    return base_model(small_spec, name="base")


@pytest.fixture(scope="session")
def small_fp(small_model):
    return fingerprint_of(small_model)


@pytest.fixture(scope="session")
def deep_pair():
    """Two independently seeded 32-layer models and their fingerprints."""
    specs = [SyntheticFamilySpec(d_model=32, num_layers=32, num_heads=4, head_dim=8, seed=s) for s in (11, 12)]
    models = [base_model(s, name=f"seed-{s.seed}") for s in specs]
    return [fingerprint_of(m) for m in models]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
