import pytest
from hypothesis import HealthCheck, settings

from mpksim.kernel import Kernel
from mpksim.manager import mpk_init

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def kernel():
    return Kernel()


@pytest.fixture
def threads(kernel):
    return [kernel.thread(t) for t in (1, 2, 3)]


@pytest.fixture
def mgr(kernel, threads):
    return mpk_init(kernel, 1.0, threads[0])
