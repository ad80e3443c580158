import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
CORPUS = ROOT / "data" / "shakespeare.txt"


@pytest.fixture(scope="session")
def corpus_path():
    if not CORPUS.exists():
        pytest.skip("data/shakespeare.txt missing; run tools/build_corpus.py")
    return CORPUS


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory, corpus_path):
    """The first 200k characters, enough for fast end-to-end runs."""
    path = tmp_path_factory.mktemp("corpus") / "small.txt"
    path.write_text(corpus_path.read_text(encoding="utf-8")[:200_000], encoding="utf-8")
    return path


# Acceptance criteria report one line each; the lines are repeated in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(capsys):
    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
