import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "closed-form loss oracles",
    3: "mechanism invariants",
    4: "ablation ordering",
    5: "occlusion robustness",
    6: "reproducibility",
    7: "chance-level sanity",
}

_results: dict = {}


@pytest.fixture
def criterion():
    """Record one sub-check of an acceptance criterion: ``criterion(n, label, passed, detail)``."""

    def record(n, label, passed, detail=""):
        _results.setdefault(n, []).append((label, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        checks = _results.get(n)
        if not checks:
            tr.write_line(f"criterion {n} ({name}): NOT RUN")
            continue
        ok = all(p for _, p, _ in checks)
        shown = [c for c in checks if not c[1]] or checks
        summary = "; ".join(f"{label} ({detail})" if detail else label for label, _, detail in shown)
        tr.write_line(f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'}  {summary}")
