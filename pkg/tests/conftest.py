import time

import pytest

_LINES = pytest.StashKey[list]()


class Criterion:
    """Collects named checks for one acceptance criterion and reports one line."""

    def __init__(self, number: int, title: str, budget_s: float, config, capsys):
        self.number, self.title, self.budget = number, title, budget_s
        self.checks = {}
        self.notes = []
        self._config, self._capsys = config, capsys
        self._t0 = time.perf_counter()

    def check(self, name: str, ok, note: str = "") -> None:
        self.checks[name] = bool(ok)
        if note:
            self.notes.append(f"{name}: {note}")

    def finish(self) -> None:
        elapsed = time.perf_counter() - self._t0
        self.check("runtime", elapsed < self.budget, f"{elapsed:.1f}s < {self.budget:g}s")
        failed = [k for k, ok in self.checks.items() if not ok]
        status = "PASS" if not failed else "FAIL"
        line = f"criterion {self.number:2d} {status}  {self.title}; " + "; ".join(self.notes)
        self._config.stash.setdefault(_LINES, []).append(line)
        with self._capsys.disabled():
            print("\n" + line)
        assert not failed, f"criterion {self.number} failed checks: {', '.join(failed)}"


@pytest.fixture
def criterion(request, capsys):
    def make(number: int, title: str, budget_s: float) -> Criterion:
        return Criterion(number, title, budget_s, request.config, capsys)

    return make


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
