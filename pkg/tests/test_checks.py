import pytest

import checks
from checks import CheckResult, relative_error, run_checks
from lib import SingularError


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert relative_error(1.0, 1.0 + 1e-6) == pytest.approx(5e-7, rel=1e-3)


def test_all_checks_pass():
    results = run_checks(seed=0)
    assert len(results) == len(checks.CHECKS)
    failed = [f"{r.name}: {r.detail}" for r in results if not r.passed]
    assert not failed


def test_errors_become_failed_checks(monkeypatch):
    def broken(seed):
        raise SingularError("no inverse")

    monkeypatch.setattr(checks, "CHECKS", [broken, lambda seed: CheckResult("fine", True, "")])
    results = run_checks()
    assert [(r.name, r.passed) for r in results] == [("broken", False), ("fine", True)]
    assert "no inverse" in results[0].detail
