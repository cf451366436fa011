import numpy as np
import pytest

from sepsis_rl.cohort import (
    DEFAULT_INVARIANT,
    DEFAULT_VARIANT,
    N_ACTIONS,
    Cohort,
    FeatureSchema,
    SyntheticConfig,
    Trajectory,
    generate_synthetic,
)


def random_trajectory(rng, T, tid="p0", schema=None, reward=None):
    schema = schema or FeatureSchema()
    ni, nv = len(schema.invariant_names), len(schema.variant_names)
    return Trajectory(
        tid,
        rng.normal(size=ni),
        rng.normal(size=(T, nv)),
        rng.integers(0, N_ACTIONS, size=T),
        int(reward if reward is not None else rng.choice([-1, 1])),
    )


def random_cohort(rng, n, lengths=(2, 20), deaths=None):
    trajs = []
    for i in range(n):
        T = int(rng.integers(lengths[0], lengths[1] + 1))
        r = -1 if deaths is not None and i < deaths else (1 if deaths is not None else None)
        trajs.append(random_trajectory(rng, T, f"p{i:04d}", reward=r))
    return Cohort(FeatureSchema(), tuple(trajs))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(SyntheticConfig(n_traj=300), seed=7)


@pytest.fixture
def schema():
    return FeatureSchema(DEFAULT_INVARIANT, DEFAULT_VARIANT)


# acceptance verdicts, echoed again in the terminal summary
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
