import pytest

from kquant.datasets import encode_levels, make_toy_dataset
from kquant.model import build_resnet_small, build_small_conv
from kquant.quantize import QuantConfig
from kquant.train import TrainConfig, calibrate


@pytest.fixture(scope="session")
def toy_levels():
    x, y, xt, yt = make_toy_dataset(seed=1, n_train=256, n_test=64)
    return encode_levels(x, 4), y, encode_levels(xt, 4), yt


def _calibrated(model, x):
    return calibrate(model, x, TrainConfig(batch_size=64, quant=model.quant), batches=2)


@pytest.fixture
def small_q(toy_levels):
    """Fully quantized (untrained, calibrated) small conv net."""
    return _calibrated(build_small_conv(quant=QuantConfig(4, 4), widths=(4, 6, 8), seed=3), toy_levels[0])


@pytest.fixture
def resnet_q(toy_levels):
    """Fully quantized two-block residual net (identity and projection shortcuts)."""
    return _calibrated(build_resnet_small(quant=QuantConfig(4, 4), widths=(4, 8), seed=5), toy_levels[0])


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
