import numpy as np
import pytest

from uwsplat import adapt, synth


@pytest.fixture(scope="session")
def small_bundle():
    """A 32x32, 25-primitive, 3-view clear-water scene shared across tests."""
    spec = synth.spec_for_class("clear", seed=0, n_gaussians=25,
                                width=32, height=32, n_views=3)
    return synth.generate_scene(spec)


@pytest.fixture(scope="session")
def classifier():
    return adapt.default_classifier()


@pytest.fixture
def rng():
    return np.random.default_rng(42)
