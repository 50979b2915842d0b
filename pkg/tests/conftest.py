#!/usr/bin/env python3
"""
Shared pytest configuration: the slow marker and the --run-slow option.
"""

import pytest


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False,
                     help='Run the long acceptance checks marked as slow')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running statistical acceptance check')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)
