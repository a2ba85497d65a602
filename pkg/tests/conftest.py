"""Shared fixtures. The EDF writer here exists only to build test inputs."""
from __future__ import annotations

import numpy as np
import pytest
import torch


def _field(value, width: int) -> bytes:
    text = str(value).encode("ascii")
    assert len(text) <= width, (value, width)
    return text.ljust(width, b" ")


def edf_bytes(signals, record_duration=1.0, n_records=None, version="0", header_bytes=None,
              declared_records=None, labels=None, phys=(-200.0, 200.0), dig=(-32768, 32767)) -> bytes:
    """Serialize digital int16 signals (list of 1-D arrays, one per signal) to EDF.

    Each signal's length must be a multiple of its samples per record; the
    per-record sample count is ``len / n_records``.
    """
    ns = len(signals)
    n_records = n_records or 1
    spr = [len(s) // n_records for s in signals]
    labels = labels or [f"EEG{i}" for i in range(ns)]
    head = b"".join([
        _field(version, 8), _field("X X X X", 80), _field("Startdate X X X X", 80),
        _field("01.01.01", 8), _field("00.00.00", 8),
        _field(header_bytes if header_bytes is not None else 256 * (ns + 1), 8),
        _field("", 44), _field(declared_records if declared_records is not None else n_records, 8),
        _field(record_duration, 8), _field(ns, 4),
    ])
    cols = [
        [_field(lab, 16) for lab in labels],
        [_field("AgAgCl", 80)] * ns,
        [_field("uV", 8)] * ns,
        [_field(phys[0], 8)] * ns,
        [_field(phys[1], 8)] * ns,
        [_field(dig[0], 8)] * ns,
        [_field(dig[1], 8)] * ns,
        [_field("HP:0.1Hz", 80)] * ns,
        [_field(n, 8) for n in spr],
        [_field("", 32)] * ns,
    ]
    head += b"".join(b"".join(c) for c in cols)
    blocks = [np.asarray(s, dtype="<i2").reshape(n_records, n) for s, n in zip(signals, spr)]
    return head + np.concatenate(blocks, axis=1).astype("<i2").tobytes()


@pytest.fixture
def write_edf(tmp_path):
    counter = iter(range(10_000))

    def _write(*args, **kwargs) -> "Path":
        path = tmp_path / f"rec{next(counter)}.edf"
        path.write_bytes(edf_bytes(*args, **kwargs))
        return path

    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


ACCEPTANCE_IDS = [f"AC-{i}" for i in range(1, 11)]
_acceptance_key = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_acceptance_key] = {}


@pytest.fixture
def acceptance(request):
    """Record one criterion's outcome; the summary prints a line per criterion."""
    results = request.config.stash[_acceptance_key]

    def record(ac_id: str, ok: bool, detail: str) -> bool:
        results[ac_id] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_acceptance_key, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for ac_id in ACCEPTANCE_IDS:
        if ac_id in results:
            ok, detail = results[ac_id]
            terminalreporter.write_line(f"{ac_id} {'PASS' if ok else 'FAIL'}: {detail}")
        elif any(name.startswith(f"test_{ac_id.lower().replace('-', '')}_") for name in _selected(terminalreporter)):
            terminalreporter.write_line(f"{ac_id} FAIL: did not complete")


def _selected(terminalreporter):
    names = []
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" in nodeid:
                names.append(nodeid.split("::")[-1])
    return names
