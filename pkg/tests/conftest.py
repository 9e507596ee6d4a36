"""Collects the acceptance verdicts and prints them after the run."""

ACCEPTANCE: list[str] = []


def record(key: str, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append(f"criterion {key:<3} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: (int(s.split()[1].rstrip("ab")), s)):
            terminalreporter.write_line(line)
