import numpy as np
import pytest

from careloop import cohort, outcome


@pytest.fixture(scope="session")
def small_cohort():
    """Shared 160-patient cohort for module tests (fast)."""
    transitions, manifest = cohort.generate_cohort(160, seed=11)
    train, val = cohort.split_transitions(transitions, manifest)
    return {"transitions": transitions, "manifest": manifest,
            "train": train, "val": val}


@pytest.fixture(scope="session")
def small_stats(small_cohort):
    return outcome.compute_reward_stats(small_cohort["train"],
                                        small_cohort["manifest"])


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
