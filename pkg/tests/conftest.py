import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from flowq.training import train_default_run

TRAIN_SEEDS = (0, 1, 2)


def _train_all(base_dir):
    """Train the default curriculum for each seed; parallel across processes
    when the machine has the cores for it."""
    jobs = [(seed, os.path.join(base_dir, f"seed{seed}")) for seed in TRAIN_SEEDS]
    cpus = os.cpu_count() or 1
    if cpus >= 2:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(len(jobs), cpus)) as pool:
            return list(pool.map(_train_one, jobs))
    return [_train_one(job) for job in jobs]


def _train_one(job):
    seed, out_dir = job
    return train_default_run(seed, out_dir)


@pytest.fixture(scope="session")
def trained_runs(tmp_path_factory):
    """Full default-curriculum training artifacts for three seeds.

    This is the expensive fixture behind the curriculum-level acceptance
    criteria; budget roughly 15-25 minutes on a single core.
    """
    base = tmp_path_factory.mktemp("curriculum_runs")
    return _train_all(str(base))
