import pytest

from asch import isa
from asch.image import MemoryImage, Perm, Segment

BASE = 0x40_0000


def code_image(*instrs, base=BASE, source="/t/prog", entry=None):
    """Executable image from a list of Instr (or raw words)."""
    words = [i if isinstance(i, int) else isa.encode(i) for i in instrs]
    data = bytearray(b"".join(w.to_bytes(4, "little") for w in words))
    return MemoryImage([Segment(base, data, Perm.R | Perm.X, source)],
                       base if entry is None else entry)


@pytest.fixture
def make_image():
    return code_image


# --- acceptance report ------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a criterion's outcome; the line is printed in the terminal summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, ok, detail):
        results[number] = ("PASS" if ok else "FAIL", detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_runtest_makereport(item, call):
    # a criterion test that errors before recording still gets a FAIL line
    if call.when == "call" and call.excinfo is not None:
        number = getattr(item.function, "criterion", None)
        results = item.config.stash.setdefault(ACCEPTANCE, {})
        if number is not None and number not in results:
            kind = "SKIP" if call.excinfo.errisinstance(pytest.skip.Exception) else "FAIL"
            results[number] = (kind, str(call.excinfo.value).splitlines()[0])


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, detail = results[number]
        terminalreporter.write_line(f"{status} criterion {number}: {detail}")
