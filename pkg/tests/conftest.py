import os
from pathlib import Path

import numpy as np
import pytest

from dualid.inference import ModelBundle
from dualid.pipeline import PipelineConfig, build_bundle

TINY = PipelineConfig(n_identities=10, heldout_fraction=0.2, encoder_images_per_identity=4, encoder_epochs=2,
                      attribute_epochs=1, base_images_per_identity=4, base_epochs=1,
                      portrait_images_per_identity=4, text_epochs=1, adapter_epochs=1, c1=8, c2=16)


@pytest.fixture(scope="session")
def tiny_bundle_dir(tmp_path_factory):
    """Directory of a fully wired but barely trained bundle: exercises every code path in seconds."""
    d = tmp_path_factory.mktemp("tiny_bundle")
    build_bundle(d, TINY, log=lambda *_: None)
    return d


@pytest.fixture(scope="session")
def tiny_bundle(tiny_bundle_dir):
    return build_bundle(tiny_bundle_dir, TINY, log=lambda *_: None)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ROOT = Path(__file__).resolve().parent.parent
ARTIFACTS = Path(os.environ.get("DUALID_ARTIFACTS", ROOT / "artifacts"))
# the acceptance bundle uses the pipeline defaults; building it from scratch takes about an hour on one core
TRAINED_CFG = PipelineConfig()


@pytest.fixture(scope="session")
def trained_bundle_dir():
    d = ARTIFACTS / "bundle"
    build_bundle(d, TRAINED_CFG, log=lambda msg: print(msg, flush=True))
    return d


@pytest.fixture(scope="session")
def trained_bundle(trained_bundle_dir):
    return ModelBundle.load(trained_bundle_dir)
