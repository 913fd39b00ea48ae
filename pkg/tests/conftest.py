import os

import hypothesis
import pytest
import torch

from wavegms.data import make_fixture_dataset
from wavegms.vae import FrozenVae

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture(scope="session")
def standin_vae():
    return FrozenVae.standin()


@pytest.fixture(scope="session")
def fixture_a(tmp_path_factory):
    return make_fixture_dataset(tmp_path_factory.mktemp("fx_a"), n_train=8, n_test=4, size=32, seed=0, style="a")


@pytest.fixture(scope="session")
def fixture_b(tmp_path_factory):
    return make_fixture_dataset(tmp_path_factory.mktemp("fx_b"), n_train=8, n_test=4, size=32, seed=1, style="b")


def real_vae_paths():
    enc = os.environ.get("WAVEGMS_VAE_WEIGHTS")
    dec = os.environ.get("WAVEGMS_VAE_DECODER_WEIGHTS")
    return enc, dec


@pytest.fixture(scope="session")
def real_vae():
    enc, dec = real_vae_paths()
    if not enc:
        pytest.skip("pretrained VAE weights not provided: set WAVEGMS_VAE_WEIGHTS "
                    "(and WAVEGMS_VAE_DECODER_WEIGHTS for the two-file release)")
    return FrozenVae.load_pretrained(enc, dec)


@pytest.fixture(scope="session")
def real_dataset():
    text = os.environ.get("WAVEGMS_REAL_DATA")
    if not text:
        pytest.skip("no real dataset provided: set WAVEGMS_REAL_DATA=NAME:ROOT (e.g. BUSI:/data/busi)")
    from wavegms.data import DatasetSpec, load_dataset

    return load_dataset(DatasetSpec.parse(text))
