"""
Logging helpers and error rendering
"""
import logging

import pytest

from fcnn import SpecError
from fcnn._exceptions import format_error
from fcnn._state import RunContextInfo, stage_context
from fcnn.log import get_logger, profiled


def test_format_error_is_one_line():
    err = SpecError("Malformed layer 'Conv(4,3)'\nsecond line")
    assert format_error(err) == "SpecError: Malformed layer 'Conv(4,3)'"
    assert format_error(ValueError()) == 'ValueError: no details'


def test_run_context_lookup():
    info = RunContextInfo()
    assert dict(info) == {'task': 'no task context',
                          'stage': 'no stage context'}
    with stage_context('appearance-2'):
        assert info['stage'] == 'appearance-2'


def test_custom_levels():
    log = get_logger('scenedata')
    assert log.logger.name == 'fcnn.scenedata'
    assert logging.getLevelName(15) == 'PROFILE'
    assert callable(log.profile)


def test_profiled_reports_duration(caplog):
    @profiled
    def work(x):
        return x + 1

    with caplog.at_level(1, logger='fcnn'):
        assert work(1) == 2
    assert any('work took' in r.getMessage() for r in caplog.records)


def test_profiled_still_raises():
    @profiled
    def broken():
        raise SpecError("nope")

    with pytest.raises(SpecError):
        broken()
