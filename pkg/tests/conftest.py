from __future__ import annotations

import pytest

from myodecode.config import BssConfig, DecodeConfig, RunConfig, SimConfig
from myodecode.sim import build_scene

_CRITERIA = pytest.StashKey[dict]()
ACCEPTANCE_COUNT = 9


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        if n not in store:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
            continue
        title, passed, detail = store[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {title}  [{detail}]")


@pytest.fixture
def report_criterion(request):
    """Record one acceptance line; printed in the terminal summary."""
    store = request.config.stash[_CRITERIA]

    def report(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  [{detail}]"
        print(line)
        store[number] = (title, bool(passed), detail)

    return report


def small_config(n_dof: int = 1, seed: int = 3) -> RunConfig:
    """A scene small enough to simulate and decompose in about a second."""
    labels = ["EF", "WP", "WF"][:n_dof]
    return RunConfig(
        seed=seed,
        sim=SimConfig(channels=16, neurons_per_dof=4, dof_labels=labels, ramp_up_s=1.0,
                      ramp_down_s=1.0, rest_s=0.5, stagger_s=0.5),
        bss=BssConfig(max_sources=8),
        decode=DecodeConfig(components=4),
    )


@pytest.fixture(scope="session")
def small_scene():
    cfg = small_config()
    return cfg, build_scene(cfg.sim, cfg.seed)


@pytest.fixture(scope="session")
def truth_scene():
    """3-DoF mirror protocol with few electrodes; used for ground-truth decoding."""
    sim = SimConfig(channels=4, dof_labels=["EF", "WP", "WF"], neurons_per_dof=8, rest_s=1.0)
    return build_scene(sim, 0)
