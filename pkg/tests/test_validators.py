import numpy as np
import pytest

import criss_cross
from validators import GROUPS, CheckResult, PropertyValidator, VerificationReport


def naive_softmax(scores):
    e = np.exp(scores.data)
    return criss_cross.AttentionMap(e / e.sum(axis=0, keepdims=True))


class TestVerificationReport:
    def test_empty_report(self):
        report = VerificationReport()
        assert report.passed and report.score == 1.0

    def test_failures_and_render(self):
        report = VerificationReport([CheckResult('paths', 'a', True), CheckResult('cost', 'b', False, 'off')])
        assert not report.passed
        assert report.score == 0.5
        assert [f.name for f in report.failures] == ['b']
        text = report.render()
        assert '[FAIL] cost/b: off' in text and '1/2 checks passed' in text


class TestPropertyValidator:
    def test_quick_groups_pass(self):
        report = PropertyValidator(seed=0).run(only=['paths', 'softmax', 'cost'])
        assert report.passed, report.render()
        assert {r.group for r in report.results} == {'paths', 'softmax', 'cost'}

    def test_oracle_and_sparsity_pass(self):
        report = PropertyValidator(seed=3, oracle_trials=20).run(only=['oracle', 'sparsity'])
        assert report.passed, report.render()
        assert {'single_position', 'self_mask'} <= {r.name for r in report.results}

    def test_unstable_softmax_is_caught(self, monkeypatch):
        monkeypatch.setattr(criss_cross, 'softmax_over_path', naive_softmax)
        report = PropertyValidator(seed=0).run(only=['softmax'])
        failed = {r.name for r in report.failures}
        assert {'normalization', 'large_inputs'} <= failed
        assert not report.passed

    def test_unknown_group(self):
        with pytest.raises(ValueError):
            PropertyValidator().run(only=['paths', 'bogus'])

    def test_exception_becomes_failure(self, monkeypatch):
        validator = PropertyValidator()

        def broken():
            raise RuntimeError('boom')
        monkeypatch.setattr(validator, 'validate_path_table', broken)
        report = validator.run(only=['paths'])
        failure, = report.failures
        assert failure.name == 'path_table'
        assert 'RuntimeError: boom' in failure.detail

    def test_threads_do_not_change_results(self):
        single = PropertyValidator(seed=7, threads=1, oracle_trials=6).run(only=['oracle'])
        pooled = PropertyValidator(seed=7, threads=2, oracle_trials=6).run(only=['oracle'])
        assert [(r.name, r.passed, r.detail) for r in single.results] == \
            [(r.name, r.passed, r.detail) for r in pooled.results]

    @pytest.mark.slow
    def test_full_suite(self):
        report = PropertyValidator(seed=0, threads=2).run()
        assert report.passed, report.render()
        assert {r.group for r in report.results} == set(GROUPS)
