import subprocess
import sys
import time

import pytest

from fedharness import verify


@pytest.fixture(scope="module")
def clean_run():
    t0 = time.perf_counter()
    results = verify.run_suite()
    return results, time.perf_counter() - t0


def test_all_properties_pass(clean_run):
    results, _ = clean_run
    failed = [(r.name, r.detail) for r in results if not r.passed]
    assert failed == []
    assert [r.name for r in results] == [name for name, _ in verify.CHECKS]


def test_suite_within_budget(clean_run):
    assert clean_run[1] <= 300


def test_gradient_fault_is_caught():
    bad = {r.name: r.passed for r in verify.run_suite(gradient_fault=1e-3) if r.name.startswith("gradient")}
    assert bad == {"gradient_logistic": False, "gradient_mlp": False}


def test_crashing_check_counts_as_failure(monkeypatch):
    def boom(fault):
        raise RuntimeError("kaput")

    monkeypatch.setattr(verify, "CHECKS", (("exploding", boom),))
    (res,) = verify.run_suite()
    assert not res.passed and "kaput" in res.detail


def test_references_agree_with_library_on_known_cases():
    import numpy as np

    V = np.array([[0.0], [1.0], [2.0], [100.0]])
    assert verify.ref_krum_select(V, 0, 1) == [1]
    assert np.array_equal(verify.ref_trimmed_mean(V, 0.25), [1.5])
    assert np.allclose(verify.ref_simplex(np.array([2.0, 0.0])), [1.0, 0.0])


@pytest.mark.parametrize("fault,code", [(None, 0), ("0.001", 1)])
def test_cli_exit_codes(fault, code):
    argv = [sys.executable, "-m", "fedharness.cli", "verify"]
    if fault:
        argv += ["--inject-gradient-fault", fault]
    proc = subprocess.run(argv, capture_output=True, text=True, timeout=300)
    assert proc.returncode == code
    assert ("FAIL  gradient_logistic" in proc.stdout) == (code == 1)
