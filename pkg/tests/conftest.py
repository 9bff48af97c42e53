"""Pytest configuration for respbin tests."""

# Fixtures (protocol_factory, keyed_scan_factory, synthetic_scan,
# respbin_process_factory) come from respbin.pytest_plugin through the
# pytest11 entry point; the ones below only serve this test suite.

import pytest

from respbin.scan_model import save_protocol, save_slices


@pytest.fixture
def scan_files(tmp_path, keyed_scan_factory):
    """
    Write a small metadata-only scan (slices.csv + protocol.json) to tmp_path.

    Two slice positions at one b-value, navigator values laid out so that
    two bins split the keys cleanly.
    """
    scan = keyed_scan_factory(
        [0.1, 0.2, 0.3, 0.4, 1.1, 1.2, 1.3, 1.4],
        [(50, 0), (50, 1), (50, 0), (50, 1), (50, 1), (50, 0), (50, 1), (50, 0)],
    )
    slices = tmp_path / "slices.csv"
    save_slices(scan, slices)
    save_protocol(scan.protocol, tmp_path / "protocol.json")
    return slices
