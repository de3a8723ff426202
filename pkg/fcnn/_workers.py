"""
``trio`` inspired worker pool for embarrassingly parallel jobs.

Jobs are plain synchronous callables run in worker threads; results
come back in submission order no matter how the scheduler interleaved
them.
"""
from functools import partial
from typing import Any, Callable, Iterable, List, Optional, Tuple
import typing

import trio
from async_generator import asynccontextmanager

from .log import get_logger
from ._state import worker_limit


log = get_logger('workers')


class WorkerPool:
    """Run sync jobs on a bounded set of worker threads.
    """
    def __init__(
        self,
        nursery: trio.Nursery,
        limit: int,
    ) -> None:
        self._nursery = nursery
        self._limiter = trio.CapacityLimiter(limit)
        self._results: List[Any] = []
        self._errors: List[Tuple[int, BaseException]] = []

    @property
    def limit(self) -> int:
        return int(self._limiter.total_tokens)

    def start_soon(
        self,
        fn: typing.Callable,
        *args,
        **kwargs,
    ) -> int:
        """Schedule ``fn(*args, **kwargs)`` and return its result slot.
        """
        index = len(self._results)
        self._results.append(None)
        self._nursery.start_soon(
            self._run_job, index, partial(fn, *args, **kwargs),
            name=f'job-{index}',
        )
        return index

    async def _run_job(self, index: int, job: Callable[[], Any]) -> None:
        try:
            self._results[index] = await trio.to_thread.run_sync(
                job, limiter=self._limiter)
        except Exception as err:
            # collect and reraise in the parent once all jobs are done
            log.warning(f"Job {index} errored with {err!r}")
            self._errors.append((index, err))

    def results(self) -> List[Any]:
        """Results in submission order; the first (by index) error is
        raised if any job failed.
        """
        if self._errors:
            index, err = min(self._errors, key=lambda item: item[0])
            raise err
        return list(self._results)


@asynccontextmanager
async def open_worker_pool(
    limit: Optional[int] = None,
) -> typing.AsyncGenerator[WorkerPool, None]:
    """Create and yield a new ``WorkerPool``; exiting waits on all jobs.
    """
    limit = limit or worker_limit()
    async with trio.open_nursery() as nursery:
        pool = WorkerPool(nursery, limit)
        log.debug(f"Opened worker pool with {limit} workers")
        yield pool
    log.debug("Worker pool teardown complete")


def run_in_workers(
    fn: typing.Callable,
    items: Iterable[Any],
    limit: Optional[int] = None,
) -> List[Any]:
    """Map ``fn`` over ``items`` in worker threads, preserving order.
    """
    items = list(items)

    async def main() -> List[Any]:
        async with open_worker_pool(limit) as pool:
            for item in items:
                pool.start_soon(fn, item)
        return pool.results()

    if not items:
        return []
    return trio.run(main)
