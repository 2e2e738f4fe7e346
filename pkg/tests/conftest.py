import warnings

import pytest

from hypsep import nn, scene, train
from hypsep.optim import OptimConfig

TINY_ENCODER = nn.EncoderConfig(hidden=(8, 8), backbone="bin-stats")


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Half-second scenes: enough to exercise every code path quickly."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = scene.DatasetConfig(list(nn.TABLE1_DENSITIES[2]),
                              {"train": [2, 1, 1, 1, 1], "val": [1, 1, 0, 0, 1], "test": [1, 1, 1, 1, 1]},
                              chunk_seconds=0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scene.ClippingWarning)
        mans = scene.build_dataset(cfg, root, seed=0)
    return root, mans


@pytest.fixture(scope="session")
def tiny_probes(tmp_path_factory):
    root = tmp_path_factory.mktemp("probes")
    eq = scene.probe_equidistant([0.0, 0.6, 1.2], rooms=1, chunk_seconds=0.5, out_dir=root)
    mic = scene.probe_mic_distance([0.2, 0.5, 0.8], rooms=1, chunk_seconds=0.5, out_dir=root)
    return eq, mic


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_data, tmp_path_factory):
    _, mans = tiny_data
    cfg = nn.ModelConfig(encoder=TINY_ENCODER, c=-1.0, levels="two-level")
    out = tmp_path_factory.mktemp("ckpt")
    res = train.train_run(cfg, mans["train"], out, mans["val"], train.TrainConfig(batch_size=2, epochs=2),
                          OptimConfig(lr=1e-2))
    return res


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one summary line per acceptance criterion; printed at the end of the run."""
    def record(n: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE[n])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
