import inspect
from functools import wraps

from ..log import get_console_log
from .._state import is_deterministic, set_deterministic, stage_context


__all__ = ['fcnn_test']


def fcnn_test(fn):
    """
    Use:

    @fcnn_test
    def test_whatever(rng):
        ...

    The test body runs on single worker paths inside a stage named after
    the test. If a ``loglevel`` fixture is defined in the `pytest`
    fixture space it is injected to tests declaring it and turns on
    console logging.
    """
    @wraps(fn)
    def wrapper(
        *args,
        loglevel=None,
        **kwargs
    ):
        if 'loglevel' in inspect.signature(fn).parameters:
            kwargs['loglevel'] = loglevel
        get_console_log(loglevel)
        previous = is_deterministic()
        set_deterministic(True)
        try:
            with stage_context(fn.__name__):
                return fn(*args, **kwargs)
        finally:
            set_deterministic(previous)

    return wrapper
