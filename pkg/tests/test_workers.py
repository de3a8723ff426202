"""
Worker pool ordering, error propagation and worker limits
"""
import time

import pytest
import trio

from fcnn import open_worker_pool, run_in_workers, set_deterministic
from fcnn._state import current_stage, worker_limit
from fcnn.testing import fcnn_test


def slow_square(x):
    # later jobs finish first
    time.sleep(0.01 * (5 - x))
    return x * x


@pytest.mark.trio
async def test_pool_results_in_submission_order():
    async with open_worker_pool(4) as pool:
        assert pool.limit == 4
        slots = [pool.start_soon(slow_square, x) for x in range(5)]
    assert slots == list(range(5))
    assert pool.results() == [0, 1, 4, 9, 16]


@pytest.mark.trio
async def test_first_error_by_index_is_raised():
    def job(x):
        if x in (1, 3):
            time.sleep(0.02 if x == 1 else 0)
            raise ValueError(f"job {x}")
        return x

    async with open_worker_pool(3) as pool:
        for x in range(4):
            pool.start_soon(job, x)
    with pytest.raises(ValueError, match='job 1'):
        pool.results()


def test_run_in_workers_matches_map():
    items = list(range(5))
    assert run_in_workers(slow_square, items, limit=3) == \
        [slow_square(x) for x in items]
    assert run_in_workers(slow_square, []) == []


def test_thread_limit_from_env(monkeypatch):
    monkeypatch.setenv('FCNN_THREADS', '3')
    assert worker_limit() == 3
    monkeypatch.setenv('FCNN_THREADS', 'many')
    with pytest.raises(RuntimeError):
        worker_limit()


def test_deterministic_pins_one_worker(monkeypatch):
    monkeypatch.setenv('FCNN_THREADS', '8')
    set_deterministic(True)
    try:
        assert worker_limit() == 1
    finally:
        set_deterministic(False)
    assert worker_limit() == 8


@fcnn_test
def test_fcnn_test_runs_deterministically():
    assert worker_limit() == 1
    assert current_stage() == 'test_fcnn_test_runs_deterministically'

    async def main():
        async with open_worker_pool() as pool:
            assert pool.limit == 1
            pool.start_soon(sum, [1, 2])
        return pool.results()

    assert trio.run(main) == [3]
