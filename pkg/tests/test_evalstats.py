import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from oracles import anova_ss, brute_max_matching
from zstack_mitosis.evalstats import ComparisonRow, MetricSample, Report, ReportError, \
    bootstrap_mean, build_report, delta_pct, f_sf, format_delta, format_p, match_detections, \
    one_way_anova, pool_matches, precision, q_critical, read_samples_csv, sensitivity, \
    studentized_range_cdf, tukey_hsd, write_samples_csv


# ---------------------------------------------------------------- matching

def pts(prefix, xy):
    return [(f"{prefix}{i}", float(x), float(y)) for i, (x, y) in enumerate(xy)]


def test_cutoff_is_inclusive():
    m = match_detections(pts("d", [(7.5, 0)]), pts("g", [(0, 0)]), 7.5)
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)
    m = match_detections(pts("d", [(7.5001, 0)]), pts("g", [(0, 0)]), 7.5)
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_maximum_cardinality_beats_greedy_nearest():
    # greedy would pair d0 with the nearer g0 and leave g1 unmatched
    dets = pts("d", [(0, 0), (-7, 0)])
    gts = pts("g", [(-1, 0), (6, 0)])
    m = match_detections(dets, gts, 7.5)
    assert m.tp == 2
    assert {(d, g) for d, g, _ in m.pairs} == {("d0", "g1"), ("d1", "g0")}


def test_minimum_distance_among_maximum_matchings():
    dets = pts("d", [(0, 0), (10, 0)])
    gts = pts("g", [(1, 0), (9, 0)])
    m = match_detections(dets, gts, 20.0)
    assert {(d, g) for d, g, _ in m.pairs} == {("d0", "g0"), ("d1", "g1")}
    assert sum(p[2] for p in m.pairs) == pytest.approx(2.0)


def test_empty_inputs():
    assert match_detections([], pts("g", [(0, 0)])).fn == 1
    assert match_detections(pts("d", [(0, 0)]), []).fp == 1
    with pytest.raises(ValueError):
        match_detections([], [], 0.0)


@given(st.integers(0, 100_000))
def test_matching_against_exhaustive(seed):
    rng = np.random.default_rng(seed)
    nd, ng = rng.integers(0, 7, 2)
    d = rng.uniform(0, 25, (nd, 2))
    g = rng.uniform(0, 25, (ng, 2))
    m = match_detections(pts("d", d), pts("g", g), 7.5)
    assert m.tp == brute_max_matching([tuple(p) for p in d], [tuple(p) for p in g], 7.5)
    assert m.tp + m.fp == nd and m.tp + m.fn == ng
    assert len({p[0] for p in m.pairs}) == len({p[1] for p in m.pairs}) == m.tp
    assert all(p[2] <= 7.5 for p in m.pairs)


def test_metric_arithmetic():
    from zstack_mitosis.evalstats import MatchResult
    m = MatchResult(3, 1, 2, (), 7.5)
    assert (sensitivity(m), precision(m)) == (0.6, 0.75)
    assert (sensitivity(MatchResult(4, 0, 0, (), 7.5)), precision(MatchResult(4, 0, 0, (), 7.5))) \
        == (1.0, 1.0)
    assert sensitivity(MatchResult(0, 2, 5, (), 7.5)) == 0.0
    m = match_detections([], pts("g", [(0, 0), (20, 0), (40, 0), (60, 0), (80, 0)]))
    assert (m.tp, m.fn, m.fp) == (0, 5, 0)
    assert match_detections(pts("d", [(3, 0)]), pts("g", [(0, 0)])).tp == 1


def test_metrics_and_pooling():
    a = match_detections(pts("d", [(0, 0), (50, 50)]), pts("g", [(1, 0)]))
    b = match_detections(pts("d", []), pts("g", [(0, 0), (3, 3)]))
    pooled = pool_matches([a, b])
    assert (pooled.tp, pooled.fp, pooled.fn) == (1, 1, 2)
    assert sensitivity(pooled) == pytest.approx(1 / 3)
    assert precision(pooled) == pytest.approx(1 / 2)
    with pytest.warns(RuntimeWarning):
        assert math.isnan(precision(b))
    with pytest.warns(RuntimeWarning):
        assert math.isnan(sensitivity(match_detections(pts("d", [(0, 0)]), [])))


# ---------------------------------------------------------------- ANOVA / Tukey

def test_anova_hand_fixture():
    # means 2, 5, 8: SSB = 3*(9+0+9) = 54, SSW = 6, F = (54/2) / (6/6) = 27
    groups = [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
    r = one_way_anova(groups)
    assert abs(r.F - 27.0) <= 1e-9
    assert abs(r.F - anova_ss(groups)) <= 1e-9
    assert (r.df_between, r.df_within) == (2, 6)
    assert r.p == pytest.approx(stats.f.sf(27.0, 2, 6), rel=1e-10)


def test_anova_textbook_fixture():
    # means 5, 9, 10, grand 8: SSB = 6*(9+1+4) = 84, SSW = 16+24+28 = 68
    groups = [[6, 8, 4, 5, 3, 4], [8, 12, 9, 11, 6, 8], [13, 9, 11, 8, 7, 12]]
    r = one_way_anova(groups)
    assert abs(r.F - (84 / 2) / (68 / 15)) <= 1e-9
    assert abs(r.F - anova_ss(groups)) <= 1e-9
    assert round(r.F, 1) == 9.3


def test_anova_identical_groups():
    r = one_way_anova([[1.0, 2.0, 3.0]] * 3)
    assert r.F == 0.0 and r.p == 1.0


@given(st.integers(0, 100_000), st.floats(-100, 100), st.floats(0.01, 100))
def test_anova_affine_invariance(seed, shift, scale):
    rng = np.random.default_rng(seed)
    groups = [rng.normal(rng.normal(), 1.0, rng.integers(2, 10)) for _ in range(rng.integers(2, 5))]
    F = one_way_anova(groups).F
    assert abs(one_way_anova([g + shift for g in groups]).F - F) <= 1e-9 * max(1.0, F)
    assert abs(one_way_anova([g * scale for g in groups]).F - F) <= 1e-9 * max(1.0, F)


@given(st.integers(0, 100_000))
def test_anova_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    groups = [rng.normal(rng.normal(), 1.0, rng.integers(2, 12)) for _ in range(rng.integers(2, 6))]
    r = one_way_anova(groups)
    ref = stats.f_oneway(*groups)
    assert r.F == pytest.approx(ref.statistic, rel=1e-9)
    assert r.p == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-14)


@given(st.integers(0, 100_000))
def test_f_equals_t_squared(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 1, rng.integers(2, 15)), rng.normal(0.5, 2, rng.integers(2, 15))
    t = stats.ttest_ind(a, b, equal_var=True).statistic
    assert abs(one_way_anova([a, b]).F - t * t) <= 1e-9 * max(1.0, t * t)


def test_anova_degenerate_groups():
    assert one_way_anova([[1, 1], [1, 1]]).p == 1.0
    assert one_way_anova([[1, 1], [2, 2]]).p == 0.0
    with pytest.raises(ValueError):
        one_way_anova([[1, 2]])
    with pytest.raises(ValueError):
        one_way_anova([[1, 2], [3]])
    assert f_sf(0.0, 2, 3) == 1.0 and f_sf(math.inf, 2, 3) == 0.0


@pytest.mark.parametrize("q,k,df", [(1.0, 2, 5), (3.0, 3, 12), (3.77, 3, 12), (4.5, 6, 30),
                                    (2.0, 10, 4), (5.0, 4, 1), (3.3, 3, 1e6)])
def test_studentized_range_cdf_matches_scipy(q, k, df):
    assert studentized_range_cdf(q, k, df) == pytest.approx(stats.studentized_range.cdf(q, k, df),
                                                            abs=1e-6)


@pytest.mark.parametrize("q", [0.1, 0.5, 1.0, 2.0, 2.77, 4.0, 6.0])
def test_studentized_range_k2_infinite_df_closed_form(q):
    # range of two iid normals is |Z1 - Z2| ~ sqrt(2) |N(0, 1)|
    closed = 2.0 * stats.norm.cdf(q / math.sqrt(2.0)) - 1.0
    assert abs(studentized_range_cdf(q, 2, math.inf) - closed) <= 1e-4


def test_q_critical_table_values():
    assert q_critical(0.05, 3, 12) == pytest.approx(3.773, abs=2e-3)
    assert q_critical(0.05, 2, math.inf) == pytest.approx(2.772, abs=2e-3)
    assert q_critical(0.01, 4, 20) == pytest.approx(5.018, abs=2e-3)


def test_studentized_range_argument_checks():
    with pytest.raises(ValueError):
        studentized_range_cdf(1.0, 1, 10)
    with pytest.raises(ValueError):
        studentized_range_cdf(-1.0, 3, 10)
    assert studentized_range_cdf(0.0, 3, 10) == 0.0


@given(st.integers(0, 100_000))
def test_tukey_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    groups = [rng.normal(0.3 * i, 1.0, rng.integers(3, 10)) for i in range(rng.integers(2, 5))]
    ref = stats.tukey_hsd(*groups)
    for tp in tukey_hsd(groups):
        assert tp.p == pytest.approx(ref.pvalue[tp.i, tp.j], abs=1e-5)
        assert tp.mean_diff == pytest.approx(np.mean(groups[tp.j]) - np.mean(groups[tp.i]))


def test_tukey_identical_pair():
    tp = tukey_hsd([[0.2, 0.4, 0.6], [0.2, 0.4, 0.6], [1.0, 1.1, 1.3]])[0]
    assert (tp.i, tp.j, tp.q, tp.p, tp.significant) == (0, 1, 0.0, 1.0, False)


@given(st.integers(0, 100_000))
def test_tukey_significance_monotone_in_gap(seed):
    # shifting one group leaves MS_within unchanged, so only the gap varies
    rng = np.random.default_rng(seed)
    resid = [rng.normal(0, 1, 6) for _ in range(3)]
    resid = [r - r.mean() for r in resid]
    qs, ps, flags = [], [], []
    for gap in np.linspace(0, 4, 21):
        tp = tukey_hsd([resid[0], resid[1] + gap, resid[2] - 1.0], pairs=[(0, 1)])[0]
        qs.append(tp.q), ps.append(tp.p), flags.append(tp.significant)
    assert all(a < b for a, b in zip(qs, qs[1:]))
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    assert flags == sorted(flags)


# ---------------------------------------------------------------- bootstrap

@given(st.integers(0, 100_000))
def test_bootstrap_mean_close_to_sample_mean(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0, 1, rng.integers(2, 30))
    r = bootstrap_mean(v, 2000, seed)
    tol = 3 * v.std() / math.sqrt(v.size * 2000)
    assert abs(r.mean - v.mean()) <= tol + 1e-12
    assert r.ci95_lo <= r.mean <= r.ci95_hi


def test_bootstrap_reproducible_and_seed_sensitive():
    v = np.linspace(0, 1, 17) ** 2
    a, b = bootstrap_mean(v, 5000, 7), bootstrap_mean(v, 5000, 7)
    assert a == b
    assert bootstrap_mean(v, 5000, 8) != a
    # chunking is an implementation detail
    assert bootstrap_mean(v, 5000, 7, chunk=333) == a


def test_bootstrap_degenerate_inputs():
    r = bootstrap_mean([0.7] * 20, 1000, 3)
    assert (r.mean, r.ci95_lo, r.ci95_hi) == pytest.approx((0.7, 0.7, 0.7), abs=1e-12)
    r = bootstrap_mean([0.42], 1000, 3)
    assert (r.mean, r.ci95_lo, r.ci95_hi) == pytest.approx((0.42, 0.42, 0.42), abs=1e-12)


def test_bootstrap_ignores_nan_and_rejects_empty():
    assert bootstrap_mean([0.5, math.nan, 0.5], 100).mean == pytest.approx(0.5)
    with pytest.raises(ValueError):
        bootstrap_mean([math.nan], 100)


# ---------------------------------------------------------------- report

def test_delta_formatting_average_rows():
    assert format_delta(delta_pct(0.601, 0.704)) == "+17.14%"
    assert format_delta(delta_pct(0.753, 0.757)) == "+0.53%"
    assert format_delta(delta_pct(0.5, 0.4)) == "-20.00%"
    assert format_delta(delta_pct(0.0, 0.4)) == "N/A"


def test_delta_of_rounded_table_means():
    # table rows print rounded means, while their deltas come from unrounded ones;
    # the printed delta must be reachable from means that round to the printed values
    for lo, hi, printed in [(0.681, 0.773, 13.52), (0.398, 0.554, 39.24)]:
        assert format_delta(delta_pct(lo, hi)) != f"+{printed:.2f}%"
        extremes = [delta_pct(a, b) for a in (lo - 5e-4, lo + 5e-4) for b in (hi - 5e-4, hi + 5e-4)]
        assert min(extremes) < printed < max(extremes)
    assert format_delta(delta_pct(0.681, 0.773)) == "+13.51%"
    assert format_delta(delta_pct(0.6805, 0.7725)) == "+13.52%"


def test_format_p():
    assert format_p(0.0004) == "<0.001"
    assert format_p(0.001) == "0.001"
    assert format_p(0.0456) == "0.046"
    assert format_p(None) == "N/A" and format_p(math.nan) == "N/A"


def _samples(means, n=5, metric="sensitivity"):
    out = []
    for (sc, pl, mode), mu in means.items():
        for r in range(1, n + 1):
            out.append(MetricSample(sc, pl, mode, r, metric, mu + 0.01 * ((r % 3) - 1)))
    return out


def test_build_report_structure():
    s = _samples({("A", "p", "single"): 0.5, ("A", "p", "zstack"): 0.7,
                  ("B", "p", "single"): 0.6, ("B", "p", "zstack"): 0.6})
    rep = build_report(s, "sensitivity", n_boot=500)
    assert [r.scanner for r in rep.rows] == ["A", "B"]
    assert rep.rows[0].p_value < 0.001 and rep.rows[1].p_value > 0.5
    assert rep.average.single_mean == pytest.approx((rep.rows[0].single_mean
                                                     + rep.rows[1].single_mean) / 2)
    csv_text = rep.to_csv()
    assert csv_text.startswith("# metric=sensitivity\n# match_cutoff_um=7.5\n# bootstrap_n=500\n")
    assert "Average" in rep.to_table()
    assert build_report(s, "sensitivity", n_boot=500).to_csv() == csv_text


def test_build_report_errors():
    s = _samples({("A", "p", "single"): 0.5})
    with pytest.raises(ReportError):
        build_report(s, "sensitivity", n_boot=10)
    with pytest.raises(ReportError):
        build_report(s, "f1", n_boot=10)
    with pytest.raises(ReportError):
        build_report(s, "precision", n_boot=10)


def test_single_run_omits_p_values():
    s = _samples({("A", "p", "single"): 0.5, ("A", "p", "zstack"): 0.7}, n=1)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        rep = build_report(s, "sensitivity", n_boot=10)
    assert rep.rows[0].p_value is None and any("p-values" in str(x.message) for x in w)


def test_samples_csv_roundtrip():
    s = _samples({("A", "p", "single"): 0.5, ("A", "p", "zstack"): 0.7}, metric="precision")
    assert read_samples_csv(write_samples_csv(s)) == s


def test_metric_sample_validation():
    with pytest.raises(ValueError):
        MetricSample("A", "p", "both", 1, "sensitivity", 0.5)
    with pytest.raises(ValueError):
        MetricSample("A", "p", "single", 0, "sensitivity", 0.5)
    with pytest.raises(ValueError):
        MetricSample("A", "p", "single", 1, "sensitivity", 1.5)


def test_injected_report_rows():
    avg = ComparisonRow("Average", "", 0.601, 0.704, delta_pct(0.601, 0.704), None)
    rep = Report("sensitivity", [], avg, 7.5, 10_000)
    assert "+17.14%" in rep.to_table() and "+17.14%" in rep.to_csv()


def test_bootstrap_unit_slides():
    pooled = _samples({("A", "p", "single"): 0.5, ("A", "p", "zstack"): 0.7})
    per_slide = [MetricSample("A", "p", mode, r, "sensitivity", v + 0.01 * r, sid)
                 for mode, base in (("single", 0.4), ("zstack", 0.6))
                 for sid, v in (("s1", base), ("s2", base + 0.2)) for r in range(1, 6)]
    by_runs = build_report(pooled + per_slide, "sensitivity", n_boot=400)
    assert by_runs.to_csv() == build_report(pooled, "sensitivity", n_boot=400).to_csv()
    assert "# bootstrap_unit=runs" in by_runs.to_csv()
    by_slides = build_report(pooled + per_slide, "sensitivity", n_boot=400, unit="slides")
    row = by_slides.rows[0]
    # slide means 0.43 and 0.63 (single): every resample mean lies between them
    assert 0.43 - 1e-12 <= row.single_ci[0] <= row.single_mean <= row.single_ci[1] <= 0.63 + 1e-12
    assert row.single_mean == pytest.approx(0.53, abs=0.02)
    assert row.p_value == by_runs.rows[0].p_value
    with pytest.raises(ReportError):
        build_report(pooled, "sensitivity", n_boot=10, unit="slides")
    with pytest.raises(ReportError):
        build_report(pooled, "sensitivity", n_boot=10, unit="cells")
    assert read_samples_csv(write_samples_csv(per_slide)) == per_slide
    legacy = "scanner,pipeline,layer_mode,run_index,metric,value\nA,p,single,1,precision,0.5\n"
    assert read_samples_csv(legacy)[0].slide_id == ""
