import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crossview.data import SynthSpec, generate_synthetic, load_all


@pytest.fixture(scope="session")
def synth32(tmp_path_factory):
    """Small deterministic dataset for fast trainer tests."""
    out = tmp_path_factory.mktemp("synth32")
    manifest, placements = generate_synthetic(
        SynthSpec(seed=11, n_samples=6, image_size=32, n_classes=3), str(out))
    return load_all(manifest), manifest, placements


@pytest.fixture(scope="session")
def synth64(tmp_path_factory):
    """The reference desk-scale dataset: seed 7, 8 samples, 64x64."""
    out = tmp_path_factory.mktemp("synth64")
    manifest, placements = generate_synthetic(
        SynthSpec(seed=7, n_samples=8, image_size=64, n_classes=4), str(out))
    return load_all(manifest), manifest, placements
