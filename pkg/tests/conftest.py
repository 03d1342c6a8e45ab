import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bridgekit.oracle import GaussianDomain, OracleField
from bridgekit.schedule import Schedule

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def linear():
    return Schedule.linear(0.1)


@pytest.fixture
def gauss1d():
    return GaussianDomain([0.0], [1.0])


@pytest.fixture
def oracle1d(linear, gauss1d):
    return OracleField(gauss1d, linear)


ALL_SCHEDULES = [Schedule.linear(0.1), Schedule.linear(0.5), Schedule.snr(0.1, 20.0), Schedule.snr(0.5, 5.0),
                 Schedule.rectified()]


# -- shared trained nets and the acceptance summary ------------------------------

ACCEPTANCE_RESULTS = {}


def gaussian_1d_pairs(rng, n):
    return rng.standard_normal((n, 1)), rng.standard_normal((n, 1))


def velocity_rmse(net, domain, schedule):
    """RMSE against the oracle on a (t, z) grid away from the clip zones, z within 2 sd of the marginal."""
    from bridgekit.oracle import oracle_field
    errs = []
    for zT in (-1.0, 0.0, 1.0):
        zT = np.array([zT])
        for t in np.linspace(0.05, 0.95, 19):
            mean, var = domain.marginal(t, zT, schedule)
            z = (mean + np.sqrt(var) * np.linspace(-2, 2, 9))[:, None]
            errs.append(net(t, z, zT) - oracle_field(domain, z, zT, t, schedule).velocity)
    e = np.concatenate(errs)
    return float(np.sqrt(np.mean(e ** 2)))


@pytest.fixture(scope="session")
def trained_1d():
    """Velocity- and posterior-mean-parameterized nets trained on the 1D Gaussian domain."""
    import time
    from bridgekit.model import TrainConfig, VelocityNet, train

    sched = Schedule.linear(0.1)
    cfg = TrainConfig(batch=512, steps=6000, eval_every=10)
    out = {}
    for param in ("velocity", "posterior_mean"):
        start = time.perf_counter()
        net, trace = train(VelocityNet(1, sched, parameterization=param), gaussian_1d_pairs, sched, cfg)
        out[param] = (net, trace, time.perf_counter() - start)
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {name}: {detail}")
