import os
import sys
from pathlib import Path

# pin BLAS/OpenMP pools before numpy loads so runs are single-threaded and reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

sys.path.insert(0, str(Path(__file__).parent))

from eldetect.backbone import BackboneConfig  # noqa: E402
from eldetect.detector import DetectorConfig  # noqa: E402
from eldetect.synth import emit_dataset  # noqa: E402
from eldetect.train import load_dataset  # noqa: E402


def tiny_detector_config(variant: str = "bidirectional+cosine", **kw) -> DetectorConfig:
    """A detector small enough to train a few iterations in well under a second."""
    from eldetect.bafpn import Variant

    return DetectorConfig(
        backbone=BackboneConfig(stem_channels=4, widths=(4, 6, 8, 8), blocks_per_stage=1, input_size=64),
        d=8,
        hidden=16,
        pre_nms_per_level=32,
        post_nms=16,
        roi_batch=16,
        variant=Variant.parse(variant),
        **kw,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = emit_dataset(6, "train", root / "train", seed=3)
    test_manifest = emit_dataset(3, "test", root / "test", seed=3)
    return manifest, test_manifest


@pytest.fixture(scope="session")
def tiny_data(tiny_corpus):
    return load_dataset(tiny_corpus[0], size=64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
