import sys
import time
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def gen_config():
    from cddmsl.synthdomains import GeneratorConfig
    return GeneratorConfig()


@pytest.fixture
def styles():
    from cddmsl.synthdomains import default_styles
    return default_styles()


@pytest.fixture
def tiny_experiment():
    """A config small enough to train in a few seconds."""
    from cddmsl.config import from_dict
    return from_dict({
        "dataset": {"counts": {"labeled": 24, "unlabeled": 8, "target": 6}},
        "train": {"burnup_steps": 6, "joint_steps": 6, "batch_size": 4, "lr": 0.01},
    })


DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"

RUNS = {
    "source_only": {"method": "source_only"},
    "dva": {"method": "dva"},
    "cddmsl": {},
    "no_dist": {"train": {"use_dist": False}},
}


class DefaultRuns:
    """Lazily trained default-config runs, shared across the session.

    One burn-up per seed feeds every joint-stage variant in ``RUNS``.
    """

    def __init__(self):
        self._cfg, self._data, self._burnup, self._runs = {}, {}, {}, {}
        self.seconds = {}  # ("burnup", seed) or (seed, name) -> training + eval wall time

    def config(self, seed, name="cddmsl"):
        from cddmsl.config import load_config, with_overrides
        key = (seed, name)
        if key not in self._cfg:
            base = with_overrides(load_config(DEFAULT_CONFIG), {"train": {"seed": seed}})
            self._cfg[key] = with_overrides(base, RUNS[name])
        return self._cfg[key]

    def data(self, seed):
        from cddmsl.experiment import memory_data
        if seed not in self._data:
            self._data[seed] = memory_data(self.config(seed))
        return self._data[seed]

    def burnup(self, seed):
        from cddmsl.training import burn_up
        if seed not in self._burnup:
            t0 = time.perf_counter()
            self._burnup[seed] = burn_up(self.config(seed).train, self.data(seed).train)
            self.seconds["burnup", seed] = time.perf_counter() - t0
        return self._burnup[seed]

    def _run(self, seed, name):
        from cddmsl.experiment import evaluate
        from cddmsl.training import TrainLog, joint_train, with_method
        if (seed, name) not in self._runs:
            cfg, data, start = self.config(seed, name), self.data(seed), self.burnup(seed)
            t0 = time.perf_counter()
            tlog = TrainLog()
            state = joint_train(with_method(start, cfg.train), cfg.train, data.train, tlog)
            self._runs[seed, name] = (tlog.rows, evaluate(cfg, state, data), state)
            self.seconds[seed, name] = time.perf_counter() - t0
        return self._runs[seed, name]

    def log(self, seed, name):
        return self._run(seed, name)[0]

    def report(self, seed, name):
        return self._run(seed, name)[1]

    def state(self, seed, name):
        return self._run(seed, name)[2]


@pytest.fixture(scope="session")
def default_runs():
    return DefaultRuns()


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one ``criterion N: PASS|FAIL ...`` line; all lines are echoed in the terminal summary."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
