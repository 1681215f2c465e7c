import struct

import pytest

from funcbound.pe import parse_pe
from funcbound.synth import CorpusSpec, build_pe, generate

SECTION_ALIGN = 0x1000


def rdata_rva_for(text_len):
    """Where build_pe places .rdata for a .text of ``text_len`` bytes."""
    return SECTION_ALIGN + ((max(text_len, 1) + SECTION_ALIGN - 1) // SECTION_ALIGN) * SECTION_ALIGN


def make_sample(seed=0, **kw):
    kw.setdefault("function_count", 12)
    return generate(CorpusSpec(seed=seed, **kw))


def as_pair(sample):
    return parse_pe(sample.pe_bytes), sample.ground_truth


@pytest.fixture
def sample():
    return make_sample(seed=1, duplicate_fraction=0.1, immediate_variant_fraction=0.2, unreferenced_fraction=0.2)


@pytest.fixture
def image(sample):
    return parse_pe(sample.pe_bytes)


@pytest.fixture
def x86_sample():
    return make_sample(seed=2, machine="x86")


def patch_u32(data, off, value):
    buf = bytearray(data)
    struct.pack_into("<I", buf, off, value)
    return bytes(buf)


@pytest.fixture
def tiny_pe():
    """One 32-byte .text of int3 on x64, no .pdata."""
    data, rva = build_pe("x64", b"\xcc" * 32)
    return data, rva


# --- acceptance reporting -----------------------------------------------------

_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if call.when == "setup" and call.excinfo is not None and call.excinfo.errisinstance(pytest.skip.Exception):
        _CRITERIA[n] = (title, "SKIP")
    elif call.when == "call":
        if call.excinfo is None:
            status = "PASS"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            status = "SKIP"
        else:
            status = "FAIL"
        _CRITERIA[n] = (title, f"{status} ({call.duration:.2f}s)")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status:<16} {title}")
