import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow training criteria as well")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow training run; enable with --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
