import pytest

from carnmpc import kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # Pay JIT compilation once, outside any timed assertions.
    kernels.warmup()
