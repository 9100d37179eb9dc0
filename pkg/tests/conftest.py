import numpy as np
import pytest

from cachecast.arrivals import independent_product, per_user_zipf_arrivals
from cachecast.model import SystemConfig


def uniform(caps, *, K=1, cached=(), c=3.0, p=2.0, wf=1.0, wp=1.0):
    return SystemConfig.uniform(caps, cached=cached, fetch_base=c, power=p, num_users=K,
                                weight_fetch=wf, weight_power=wp)


def nonuniform(caps, *, cached=(), c=3.0, p=(2.0, 4.0), wf=1.0, wp=1.0, M=2):
    caps = np.broadcast_to(np.asarray(caps), (M, len(p)))
    power = np.broadcast_to(np.asarray(p, dtype=float), (M, len(p)))
    return SystemConfig.nonuniform(caps, cached=cached, fetch_base=c, power=power,
                                   weight_fetch=wf, weight_power=wp)


def bernoulli(p):
    return {0: 1 - p, 1: p}


def reference_m2():
    cfg = uniform((10, 10), K=2, cached=(1,))
    return cfg, per_user_zipf_arrivals(cfg, 0.75)


def silent_pair():
    """Two contents, two users, user 2 never requests content 2."""
    cfg = nonuniform(4, cached=(1,))
    arr = independent_product([bernoulli(0.4), bernoulli(0.3), bernoulli(0.5), {0: 1.0}],
                              (2, 2))
    return cfg, arr


def uniform_suite():
    out = []
    cfg, arr = reference_m2()
    out.append(("m2-k2-n10", cfg, arr))
    cfg = uniform((5, 7), c=(3.0, 5.0), p=(1.0, 3.0), wf=2.0, wp=0.5)
    out.append(("m2-asym", cfg, per_user_zipf_arrivals(cfg, 0.5)))
    cfg = uniform((4, 4, 4), K=2, cached=(1, 2))
    out.append(("m3-cached2", cfg, per_user_zipf_arrivals(cfg, 0.75)))
    cfg = uniform((3, 5, 2), K=3, cached=(2,), p=(1.0, 2.0, 3.0), wp=2.0)
    out.append(("m3-k3", cfg, per_user_zipf_arrivals(cfg, 1.0)))
    cfg = uniform((6, 6), cached=(2,))
    out.append(("m2-indep", cfg, independent_product(
        [{0: 0.5, 1: 0.3, 2: 0.2}, bernoulli(0.3)])))
    cfg = uniform((6, 6, 6), K=2)
    out.append(("m3-flat", cfg, per_user_zipf_arrivals(cfg, 0.0)))
    return out


def nonuniform_suite():
    out = []
    cfg, arr = silent_pair()
    out.append(("silent_pair", cfg, arr))
    cfg = nonuniform(3, cached=(1,))
    out.append(("nu-zipf", cfg, per_user_zipf_arrivals(cfg, 0.75)))
    cfg = SystemConfig.nonuniform([[2, 3], [4, 2]], fetch_base=3.0,
                                  power=[[1.0, 2.0], [2.0, 5.0]])
    out.append(("nu-caps", cfg, per_user_zipf_arrivals(cfg, 1.0)))
    cfg = nonuniform(2, cached=(2,), p=(1.0, 3.0), wf=2.0)
    out.append(("nu-indep", cfg, independent_product(
        [bernoulli(0.5), bernoulli(0.2), bernoulli(0.3), bernoulli(0.6)], (2, 2))))
    cfg = nonuniform(4, p=(1.0, 1.5), wp=2.0)
    out.append(("nu-cap4", cfg, per_user_zipf_arrivals(cfg, 0.25)))
    return out


SUITE = uniform_suite() + nonuniform_suite()
# the silent pair freezes Q_{2,2} under the all-ones initial policy of
# policy iteration, so the policy-iteration suites leave it out
PIA_SUITE = [entry for entry in SUITE if entry[0] != "silent_pair"]


@pytest.fixture(params=SUITE, ids=[name for name, *_ in SUITE])
def instance(request):
    _, cfg, arr = request.param
    return cfg, arr


@pytest.fixture(params=PIA_SUITE, ids=[name for name, *_ in PIA_SUITE])
def pia_instance(request):
    _, cfg, arr = request.param
    return cfg, arr


# Acceptance reporting: tests marked criterion(n) roll up into one PASS/FAIL
# line per criterion in the terminal summary.
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown" and report.passed:
        return
    n = marker.args[0]
    ok = _criteria.get(n, True)
    if report.when == "call" or report.failed:
        ok = ok and report.passed
    _criteria[n] = ok


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if _criteria[n] else 'FAIL'}")
