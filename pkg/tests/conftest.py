import sys
from os import getenv

import numpy as np
import pytest

from mm_align.data import SplitDataset, split_dataset, synth_generate
from mm_align.model import MMAlignModel
from tests.utils_for_tests import tiny_model_config


class TeeCapSysWrapper:
    def __init__(self, capsys):
        self.capsys = capsys

    def readouterr(self, *args, **kwargs):
        readout = self.capsys.readouterr(*args, **kwargs)
        sys.stdout.write(readout.out)
        sys.stderr.write(readout.err)
        return readout

    def disabled(self, *args, **kwargs):
        return self.capsys.disabled(*args, **kwargs)


@pytest.fixture
def tee_capsys(capsys):
    return TeeCapSysWrapper(capsys)


def pytest_collection_modifyitems(config, items):
    if getenv("MMALIGN_RUN_SLOW"):
        return
    skip_slow = pytest.mark.skip(reason="set MMALIGN_RUN_SLOW to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model(rng):
    return MMAlignModel(tiny_model_config(), 1, rng)


@pytest.fixture
def tiny_split() -> SplitDataset:
    samples = synth_generate(40, 6, 3, shift_range=(0, 1), seed=3)
    return split_dataset(samples, (0.6, 0.2, 0.2), seed=3)
