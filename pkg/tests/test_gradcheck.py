"""The finite-difference verification suite itself."""

import numpy as np

from moce.gradcheck import (CheckResult, all_passed, format_results, run_all,
                            sampled_check)
from moce.autodiff import FdReport, Tensor
from moce import autodiff as ad


class TestSuite:
    def test_every_family_passes_at_default_tolerance(self):
        results = run_all(seed=0)
        failed = [r.name for r in results if not r.report.passed]
        assert failed == []
        assert all_passed(results)

    def test_expected_families_present(self):
        names = {r.name for r in run_all(seed=1)}
        for required in ("relu", "matmul", "softmax", "masked-softmax",
                         "routing", "sag-projection", "encoder", "full-model",
                         "attention-loss", "balance-losses", "bce"):
            assert required in names

    def test_impossible_tolerance_fails(self):
        results = run_all(seed=0, rel_tol=1e-18)
        assert not all_passed(results)
        assert "FAILED" in format_results(results)

    def test_summary_counts_checks(self):
        results = run_all(seed=0)
        assert f"all {len(results)} checks passed" in format_results(results)

    def test_result_line_format(self):
        report = FdReport(passed=True, max_rel_error=3e-7,
                          coordinates_checked=12)
        line = CheckResult("demo", report, 0.5).line()
        assert line.startswith("PASS")
        assert "demo" in line
        assert "12" in line


class TestSampledCheck:
    def test_agrees_with_correct_gradient(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, size=(4, 5)), requires_grad=True)

        def f():
            return ad.reduce_sum(ad.mul(ad.tanh(x), ad.tanh(x)))

        report = sampled_check(f, [x], rng, per_tensor=6)
        assert report.passed
        assert report.coordinates_checked == 6

    def test_catches_a_missing_gradient_path(self):
        # part of the loss reads x.data as a plain constant: the tape never
        # sees that path, finite differences do, so the check must fail
        rng = np.random.default_rng(4)
        x = Tensor(rng.uniform(0.5, 1.0, size=(6,)), requires_grad=True)

        def f():
            tracked = ad.reduce_sum(ad.mul(x, x))
            leaked = Tensor(np.asarray(x.data.sum()))
            return ad.add(tracked, leaked)

        report = sampled_check(f, [x], rng, per_tensor=6)
        assert not report.passed
        assert report.failures

    def test_samples_at_most_tensor_size(self):
        rng = np.random.default_rng(5)
        x = Tensor(np.array([0.3, 0.7]), requires_grad=True)
        report = sampled_check(lambda: ad.reduce_sum(ad.mul(x, x)),
                               [x], rng, per_tensor=50)
        assert report.coordinates_checked == 2
