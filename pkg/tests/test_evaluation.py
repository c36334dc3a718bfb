import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from tldcrnn.evaluation import (CVBin, HistoricalAverage, NodeMetricTable, WilcoxonError, bin_mae_by_cv,
                                coefficient_of_variation, compare, node_metrics, persistence_forecast,
                                quartile_summary, select_models, signed_rank_statistic, target_timestamps,
                                wilcoxon_one_sided, write_cv_report)
from tldcrnn.timeseries import TimeSeriesFrame, make_windows


def test_metric_hand_examples():
    y = np.full((2, 1), 10.0)
    t = node_metrics(y, y)
    assert (t.mae[0], t.rmse[0], t.mape[0]) == (0, 0, 0)
    t = node_metrics(np.array([[11.0], [9.0]]), y)
    assert t.mae[0] == 1 and t.rmse[0] == 1 and t.mape[0] == pytest.approx(10.0)


def test_metrics_match_oracle_and_mask():
    rng = np.random.default_rng(0)
    f, y = rng.normal(50, 10, size=(7, 3, 5)), rng.normal(50, 10, size=(7, 3, 5))
    y[0, 0, 2] = 0.3  # below the MAPE floor
    mask = np.array([True, True, True, False, True])
    t = node_metrics(f, y, mask, node_ids=list("abcde"))
    assert t.node_ids == ("a", "b", "c", "e")
    for k, j in enumerate([0, 1, 2, 4]):
        mae, rmse, mape = oracles.metrics(f[..., j], y[..., j])
        assert (t.mae[k], t.rmse[k]) == pytest.approx((mae, rmse), abs=1e-12)
        assert t.mape[k] == pytest.approx(mape, abs=1e-10)
    assert t.mape_excluded.tolist() == [0, 0, 1, 0]


def test_zero_truth_node_has_no_mape():
    t = node_metrics(np.ones((4, 2)), np.array([[0.0, 5.0]] * 4))
    assert np.isnan(t.mape[0]) and t.mape[1] == pytest.approx(80.0)


def test_metrics_ignore_window_order():
    rng = np.random.default_rng(1)
    f, y = rng.normal(size=(9, 2, 3)), rng.normal(size=(9, 2, 3))
    perm = rng.permutation(9)
    a, b = node_metrics(f, y, mape_floor=0.0), node_metrics(f[perm], y[perm], mape_floor=0.0)
    assert np.allclose(a.mae, b.mae) and np.allclose(a.rmse, b.rmse) and np.allclose(a.mape, b.mape)


def test_metric_table_csv_roundtrip(tmp_path):
    t = node_metrics(np.array([[1.0, 2.0]]), np.array([[0.0, 4.0]]), node_ids=["x", "y"])
    t.to_csv(tmp_path / "m.csv")
    back = NodeMetricTable.from_csv(tmp_path / "m.csv")
    assert back.node_ids == t.node_ids
    assert np.array_equal(back.mae, t.mae)
    assert np.isnan(back.mape[0])


def test_wilcoxon_all_negative_ten():
    assert wilcoxon_one_sided(-np.arange(1, 11.0)) == pytest.approx(1 / 1024, abs=1e-15)


def test_wilcoxon_symmetric_no_evidence():
    p = wilcoxon_one_sided([-1, 1, -2, 2, -3, 3])
    assert 0.4 < p < 0.7


def test_wilcoxon_zeros_dropped_and_small_n():
    d = [-1, -2, -3, -4, -5, 0, 0]
    assert wilcoxon_one_sided(d) == pytest.approx(1 / 32)
    with pytest.raises(WilcoxonError, match="at least 5"):
        wilcoxon_one_sided([-1, -2, 0, 3, 0])
    with pytest.raises(WilcoxonError):
        wilcoxon_one_sided([np.nan] * 6)


@pytest.mark.parametrize("seed", range(5))
def test_wilcoxon_n8_matches_enumeration(seed):
    d = np.random.default_rng(seed).normal(-0.3, 1, size=8)
    assert wilcoxon_one_sided(d) == pytest.approx(oracles.wilcoxon_enumeration(d), abs=1e-12)


def test_wilcoxon_ties_match_enumeration():
    d = np.array([-1, -1, 2, -2, 3, -3, -3, 4, 0.5])
    assert wilcoxon_one_sided(d) == pytest.approx(oracles.wilcoxon_enumeration(d), abs=1e-12)
    assert signed_rank_statistic([1, -2, 3, -4, 5]) == 9


def test_exact_and_normal_agree_above_25():
    rng = np.random.default_rng(2)
    worst = 0.0
    for n in range(26, 41):
        for _ in range(5):
            d = rng.normal(rng.uniform(-0.5, 0.5), 1, size=n)
            worst = max(worst, abs(wilcoxon_one_sided(d, "exact") - wilcoxon_one_sided(d, "normal")))
    assert worst < 0.01


def test_compare_bookkeeping_and_reports(tmp_path):
    ids = [f"n{i}" for i in range(12)]
    m1 = {i: 1.0 for i in ids}
    m2 = {i: 1.0 + (0.1 * k if k < 10 else (-0.1 if k == 10 else 0.0)) for k, i in enumerate(ids)}
    r = compare(m1, m2, "TL", "SS", manifests={"TL": "abc", "SS": "def"})
    assert r.n_m1_better + r.n_m2_better + r.n_tied == 12
    assert (r.n_m1_better, r.n_m2_better, r.n_tied) == (9, 1, 2)
    assert r.significant == (r.p_value < 0.05)
    r.to_json(tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["manifests"] == {"TL": "abc", "SS": "def"} and doc["model_1"] == "TL"
    r.to_csv(tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "node_id,diff"
    with pytest.raises(ValueError):
        compare(m1, {**m2, "extra": 1.0})


def test_quartiles():
    q = quartile_summary([1, 2, 3, 4, 100])
    assert q["median"] == 3 and q["whisker_high"] == 4 and q["max"] == 100


def test_select_models_examples():
    y = np.zeros((2, 4))
    only = [np.ones((2, 4))]
    for mode in "SMB":
        sel = select_models(only, y, [0, 0, 1, 1], mode)
        assert np.array_equal(sel.combine(only), only[0])
    a, b = np.full((1, 2), 50.0), np.full((1, 2), 70.0)
    assert select_models([a, b], None, [0, 1], "B").combine([a, b]).tolist() == [[60.0, 60.0]]
    with pytest.raises(ValueError):
        select_models([], y, [0], "S")


def test_m_never_worse_than_s():
    rng = np.random.default_rng(3)
    y = rng.normal(size=(10, 6))
    groups = np.array([0, 0, 1, 1, 2, 2])
    fc = [y + rng.normal(scale=s, size=y.shape) for s in (0.5, 1.0, 1.5)]
    s = select_models(fc, y, groups, "S")
    m = select_models(fc, y, groups, "M")
    assert s.biased and m.biased and not select_models(fc, y, groups, "B").biased
    err = lambda sel: np.abs(sel.combine(fc) - y).sum()  # noqa: E731
    assert err(m) <= err(s) + 1e-12


def test_cv_examples(caplog):
    cv = coefficient_of_variation(np.array([[50.0, 3.0, 0.0], [70.0, 3.0, 0.0]]))
    assert cv[0] == pytest.approx(1 / 6, abs=1e-4) and cv[1] == 0.0 and np.isnan(cv[2])
    assert "excluded" in caplog.text


@given(st.lists(st.floats(0, 0.5), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_cv_bins_partition_nodes(cvs):
    bins = bin_mae_by_cv(np.zeros(len(cvs)), cvs, [0.0, 0.1, 0.2, 0.3, 1.0])
    assert sum(b.count for b in bins) == len(cvs)


def test_cv_bins_half_open(tmp_path):
    bins = bin_mae_by_cv([1.0, 2.0, 3.0], [0.1, 0.0999, 0.2], [0.0, 0.1, 0.2])
    assert [b.count for b in bins] == [1, 1]
    write_cv_report(tmp_path / "b.csv", bins)
    assert (tmp_path / "b.csv").exists()
    assert isinstance(bins[0], CVBin)


def test_baselines():
    ts = np.datetime64("2024-01-01T00:00", "ns") + np.arange(2016 * 2) * np.timedelta64(5, "m")
    speed = np.stack([np.arange(ts.size) % 2016, np.full(ts.size, 7.0)], axis=1).astype(float)
    f = TimeSeriesFrame.from_speed(speed, ts, ["a", "b"])
    w = make_windows(f.slice_time(0, 30), 3, 2)
    pf = persistence_forecast(w)
    assert pf.shape == (len(w), 2, 2) and np.array_equal(pf[0, :, 0], [2.0, 2.0])
    ha = HistoricalAverage().fit(f)
    stamps = target_timestamps(w, 3, 2)
    assert np.array_equal(stamps[0], ts[3:5])
    pred = ha.predict(stamps)
    assert pred.shape == (len(w), 2, 2)
    assert np.array_equal(pred[..., 0], (np.arange(len(w))[:, None] + np.arange(3, 5)[None]).astype(float))
