"""
Per process state
"""
import os
from collections.abc import Mapping
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterator, Optional

import trio

_current_stage: ContextVar[Optional[str]] = ContextVar(
    '_current_stage', default=None)

# forces single worker paths everywhere when set
_deterministic: bool = False


def current_stage() -> str:
    """Get the name of the training stage running in this context.
    """
    stage = _current_stage.get()
    if stage is None:
        raise RuntimeError("No training stage is active")
    return stage


@contextmanager
def stage_context(name: str) -> Iterator[str]:
    token = _current_stage.set(name)
    try:
        yield name
    finally:
        _current_stage.reset(token)


def set_deterministic(flag: bool) -> None:
    global _deterministic
    _deterministic = bool(flag)


def is_deterministic() -> bool:
    return _deterministic


def worker_limit() -> int:
    """Maximum number of concurrent workers.

    ``FCNN_THREADS`` caps the count; deterministic mode pins it to one.
    """
    if _deterministic:
        return 1
    env = os.environ.get('FCNN_THREADS')
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise RuntimeError(f"FCNN_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


class RunContextInfo(Mapping):
    "Dynamic lookup for training stage and task names"
    _context_keys = ('task', 'stage')

    def __len__(self):
        return len(self._context_keys)

    def __iter__(self):
        return iter(self._context_keys)

    def __getitem__(self, key: str):
        try:
            if key == 'task':
                return trio.lowlevel.current_task().name
            return current_stage()
        except RuntimeError:
            # no trio task or stage context initialized yet
            return f'no {key} context'
