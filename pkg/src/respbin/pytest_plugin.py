"""
Pytest plugin for respbin.

Provides fixtures for building scans and for driving the respbin CLI as a
real process.

Usage:
    Install respbin and fixtures are automatically available:

    def test_two_bins(keyed_scan_factory):
        scan = keyed_scan_factory([0.1, 0.2, 0.9, 1.0], [(50, 0), (50, 1), (50, 0), (50, 1)])
        assert bin_scan(scan, 2).total_cost == 0

    def test_cli_help(respbin_process_factory):
        proc = respbin_process_factory(["--help"])
        proc.expect("usage")
"""

import sys
from typing import Optional, Sequence, Tuple

import numpy as np
import pytest

from .scan_model import Scan, ScanProtocol, SliceRecord
from .sim_phantom import SimulatedAcquisition, simulate_preset


@pytest.fixture
def protocol_factory():
    """
    Factory for ScanProtocol instances with small defaults.

    Example:
        def test_geometry(protocol_factory):
            protocol = protocol_factory(S=3, b_values=(50, 800))
            assert protocol.combos == 6
    """

    def _create(S: int = 2, b_values: Sequence[float] = (50.0,), **kwargs) -> ScanProtocol:
        kwargs.setdefault("averages_per_b", (1,) * len(b_values))
        return ScanProtocol(S=S, b_values=tuple(b_values), **kwargs)

    return _create


@pytest.fixture
def keyed_scan_factory(protocol_factory):
    """
    Factory for metadata-only scans from navigator values and (b, s) keys.

    acq_index is the position in the lists. Without an explicit protocol,
    one is derived from the keys (S = max s + 1, b-values in sorted order).
    Pass ``pixels`` (one rows x cols array per slice) to attach images.

    Example:
        def test_gap(keyed_scan_factory):
            scan = keyed_scan_factory([0.0, 1.0], [(50, 0), (50, 1)])
            assert scan.N == 2
    """

    def _create(
        t_values: Sequence[float],
        keys: Sequence[Tuple[float, int]],
        protocol: Optional[ScanProtocol] = None,
        pixels: Optional[Sequence[np.ndarray]] = None,
    ) -> Scan:
        if len(t_values) != len(keys):
            raise ValueError(f"{len(t_values)} navigator values for {len(keys)} keys")
        if protocol is None:
            b_values = sorted({float(b) for b, _ in keys}) or [50.0]
            S = max((int(s) for _, s in keys), default=0) + 1
            protocol = protocol_factory(S=S, b_values=b_values)
        records = [
            SliceRecord(
                acq_index=i,
                t=t,
                b=b,
                s=s,
                pixels=None if pixels is None else pixels[i],
            )
            for i, (t, (b, s)) in enumerate(zip(t_values, keys))
        ]
        return Scan(protocol, tuple(records))

    return _create


@pytest.fixture(scope="session")
def synthetic_scan():
    """
    Factory for simulated acquisitions, cached per (preset, seed) for the session.

    Example:
        def test_sync(synthetic_scan):
            sim = synthetic_scan("synchronized", seed=42)
            assert sim.scan.has_pixels
    """
    cache = {}

    def _create(preset: str = "calm", seed: int = 42) -> SimulatedAcquisition:
        key = (preset, seed)
        if key not in cache:
            cache[key] = simulate_preset(preset, seed)
        return cache[key]

    return _create


@pytest.fixture
def respbin_process_factory():
    """
    Factory spawning ``python -m respbin ...`` under a pty via pexpect.

    Processes still alive at teardown are terminated.

    Example:
        def test_version(respbin_process_factory):
            proc = respbin_process_factory(["--version"])
            proc.expect("respbin")
            proc.expect(pexpect.EOF)
    """
    pexpect = pytest.importorskip("pexpect")
    processes = []

    def _spawn(args: Sequence[str], timeout: float = 60, **kwargs):
        proc = pexpect.spawn(
            sys.executable,
            ["-m", "respbin", *args],
            timeout=timeout,
            encoding="utf-8",
            **kwargs,
        )
        processes.append(proc)
        return proc

    yield _spawn

    for proc in processes:
        if proc.isalive():
            proc.terminate(force=True)
        proc.close()


def pytest_configure(config):
    """Configure pytest with respbin markers."""
    config.addinivalue_line(
        "markers",
        "e2e: marks end-to-end tests that run the CLI as a process"
    )
    config.addinivalue_line(
        "markers",
        "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line(
        "markers",
        "acceptance: marks benchmark-level checks on simulated scans"
    )
