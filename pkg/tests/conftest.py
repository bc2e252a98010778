import pytest

ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    """Store a one-line verdict for the acceptance summary."""
    def record(number, passed, detail):
        ACCEPTANCE[number] = (passed, detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    """One full CLI pipeline run on the standard synthetic benchmark.

    Returns ``(out_dir, wall_seconds)``.
    """
    import time

    from sua.harness.cli import main

    out = tmp_path_factory.mktemp("benchmark")
    start = time.perf_counter()
    code = main(["pipeline", "--seed", "0", "--out", str(out)])
    assert code == 0
    return out, time.perf_counter() - start
