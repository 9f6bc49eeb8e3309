from fractions import Fraction

import pytest

from cost_model import (
    DIVERGES,
    FAIL,
    MACS_AS_FLOPS,
    PASS,
    STAGE_GEOMETRIES,
    StageGeometry,
    attention_macs,
    cca_module_cost,
    get_geometry,
    nonlocal_cost,
    nonlocal_pairwise_macs,
    rcca_total_cost,
    render_cells,
    render_reports,
    reproduce_tables,
    stage_sweep_cost,
)

CONV3 = STAGE_GEOMETRIES['conv3_3']


class TestModuleCost:
    def test_conv3_delta_params(self):
        report = cca_module_cost(CONV3, '1/4', 'a')
        assert report.params == 393_216
        assert report.params / 1e6 == pytest.approx(0.39, abs=0.005)

    def test_conv3_per_module_flops(self):
        report = cca_module_cost(CONV3, Fraction(1, 4), 'a')
        assert report.macs == 2_715_123_712
        assert report.flops == 2 * report.macs
        assert report.flops / 1e9 == pytest.approx(5.4, abs=0.1)

    def test_hand_count(self):
        report = cca_module_cost(StageGeometry('unit', 1, 1, 1, 1), 1, 'a')
        assert report.macs == 5
        assert report.params == 3

    def test_variant_c_counts_restore_projection(self):
        report = cca_module_cost(CONV3, '1/4', 'c')
        assert report.params == 4 * 512 * 128
        assert report.macs < cca_module_cost(CONV3, '1/4', 'a').macs

    def test_non_integral_inner_channels(self):
        with pytest.raises(ValueError):
            cca_module_cost(StageGeometry('odd', 6, 1, 2, 2), '1/4')

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            cca_module_cost(CONV3, '1/4', 'x')

    def test_geometry_validation(self):
        with pytest.raises(ValueError):
            StageGeometry('empty', 4, 0, 2, 2)
        with pytest.raises(ValueError):
            get_geometry('conv9_9')


class TestRccaTotalCost:
    @pytest.mark.parametrize('recurrence,total', [(1, 38.4), (2, 43.9), (3, 49.3), (4, 54.7)])
    def test_recurrence_table(self, recurrence, total):
        report = rcca_total_cost(CONV3, recurrence, '1/4')
        assert report.total_flops / 1e9 == pytest.approx(total, abs=0.1)
        assert report.total_params / 1e6 == pytest.approx(24.69, abs=0.01)

    @pytest.mark.parametrize('fraction,total,params', [
        ('1/2', 54.5, 24.83), ('1/4', 49.3, 24.69), ('1/8', 46.7, 24.63), ('1/16', 45.4, 24.60),
    ])
    def test_channel_fraction_table(self, fraction, total, params):
        report = rcca_total_cost(CONV3, 3, fraction)
        assert report.total_flops / 1e9 == pytest.approx(total, abs=0.1)
        assert report.total_params / 1e6 == pytest.approx(params, abs=0.01)

    def test_percentages(self):
        report = rcca_total_cost(CONV3, 3, '1/4')
        assert report.flops_percent == pytest.approx(149.4, abs=0.1)
        assert report.params_percent == pytest.approx(101.6, abs=0.1)

    @pytest.mark.parametrize('variant', ['a', 'b', 'c', 'd'])
    def test_linear_in_recurrence(self, variant):
        reports = [rcca_total_cost(CONV3, r, '1/4', variant) for r in range(1, 9)]
        assert {b.flops - a.flops for a, b in zip(reports, reports[1:])} == {reports[0].flops}
        assert len({r.params for r in reports}) == 1

    def test_zero_recurrence(self):
        with pytest.raises(ValueError):
            rcca_total_cost(CONV3, 0)


def test_stage_sweep():
    reports = stage_sweep_cost()
    assert [round(r.total_flops / 1e9, 1) for r in reports] == [49.3, 48.2, 47.9]
    assert [r.params for r in reports] == [393_216, 1_572_864, 6_291_456]
    assert [round(r.total_params / 1e6, 2) for r in reports] == [24.69, 25.87, 30.59]


def test_conv2_estimate():
    report = rcca_total_cost(STAGE_GEOMETRIES['conv2_x'], 3, '1/4')
    assert report.total_flops / 1e9 == pytest.approx(53.5, abs=0.1)


class TestNonLocalCost:
    def test_conv3(self):
        report = nonlocal_cost(CONV3)
        assert report.params == 524_288
        assert report.macs / 1e9 == pytest.approx(23.4, abs=0.05)
        assert report.table_convention == MACS_AS_FLOPS
        assert report.total_flops / 1e9 == pytest.approx(56.4, abs=0.1)
        assert report.total_params / 1e6 == pytest.approx(24.83, abs=0.01)

    def test_savings_ratios(self):
        rcca = rcca_total_cost(CONV3, 3, '1/4')
        nl = nonlocal_cost(CONV3)
        assert rcca.params / nl.params == pytest.approx(0.74, abs=0.02)
        assert rcca.delta_flops / nl.delta_flops == pytest.approx(0.70, abs=0.02)


def test_asymptotics_when_doubling_frames():
    big = StageGeometry('big', 256, 16, 56, 56)
    doubled = big.with_frames(32)
    expected = 2 * doubled.path_length / big.path_length
    assert attention_macs(doubled, '1/4') / attention_macs(big, '1/4') == pytest.approx(expected, rel=0.05)
    assert nonlocal_pairwise_macs(doubled) / nonlocal_pairwise_macs(big) == pytest.approx(4, rel=0.05)


class TestTableReproduction:
    def test_no_failures(self):
        cells = reproduce_tables()
        assert [c for c in cells if c.status == FAIL] == []
        assert sum(c.status == PASS for c in cells) >= 40

    def test_structure_c_reported_as_divergent(self):
        divergent = [c for c in reproduce_tables() if c.status == DIVERGES]
        assert {c.row for c in divergent} == {'structure c'}
        assert any(c.quantity == 'total FLOPs (G)' for c in divergent)

    def test_rendering(self):
        cells = reproduce_tables()
        text = render_cells(cells)
        assert 'non-local block' in text and DIVERGES in text
        csv_text = render_cells(cells, 'csv')
        assert csv_text.splitlines()[0] == 'table,row,quantity,expected,actual,tolerance,status,note'
        assert len(csv_text.splitlines()) == len(cells) + 1
        with pytest.raises(ValueError):
            render_cells(cells, 'xml')

    def test_report_rendering(self):
        text = render_reports([rcca_total_cost(CONV3, 3, '1/4'), nonlocal_cost(CONV3)])
        assert '49.3' in text and '24.69' in text and '0.39' in text
        assert '0.52' in text and '56.4' in text
