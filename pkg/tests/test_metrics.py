import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uqe.metrics import agreement_report, icc_2_1, mae, mape, pearson, r_squared


def anova_icc_oracle(a, b):
    """ICC(2,1) from explicit two-way ANOVA sums of squares (loops, no numpy reductions)."""
    rows = [[float(x), float(y)] for x, y in zip(a, b)]
    n, k = len(rows), 2
    grand = sum(sum(r) for r in rows) / (n * k)
    row_means = [sum(r) / k for r in rows]
    col_means = [sum(r[j] for r in rows) / n for j in range(k)]
    ssr = sum(k * (m - grand) ** 2 for m in row_means)
    ssc = sum(n * (m - grand) ** 2 for m in col_means)
    sse = 0.0
    for i in range(n):
        for j in range(k):
            sse += (rows[i][j] - row_means[i] - col_means[j] + grand) ** 2
    msr, msc, mse = ssr / (n - 1), ssc / (k - 1), sse / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


def test_mape_basic():
    assert mape([1.1], [1.0]) == pytest.approx(10.0)


def test_identity_metrics():
    y = np.array([1.0, 2.0, 4.0, 3.0])
    assert mae(y, y) == 0.0 and mape(y, y) == 0.0
    assert r_squared(y, y) == 1.0 and pearson(y, y) == pytest.approx(1.0)
    assert icc_2_1(y, y) == pytest.approx(1.0)


def test_mape_near_zero_exclusion():
    value, excluded = mape([2.0, 5.0], [1.0, 1e-12], return_excluded=True)
    assert value == 100.0 and excluded == 1


def test_mape_all_excluded():
    with pytest.raises(ValueError):
        mape([1.0], [0.0])


def test_r2_null_model_and_scaled():
    y = np.array([1.0, 2.0, 3.0])
    assert r_squared(np.full(3, 2.0), y) == 0.0
    assert r_squared(2 * y, y) == pytest.approx(-6.0)
    assert pearson(2 * y, y) == pytest.approx(1.0)


def test_zero_spread():
    with pytest.raises(ValueError):
        r_squared([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        pearson([1.0, 2.0], [3.0, 3.0])


def test_icc_offset_hand_case():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    assert icc_2_1(a, a + 1) == pytest.approx((10 / 3) / (10 / 3 + 1), abs=1e-12)
    assert icc_2_1(a, a + 1) == pytest.approx(0.76923, abs=1e-5)


def test_icc_against_anova_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = rng.normal(size=(50, 2)) + rng.normal(size=(50, 1)) * rng.uniform(0, 3)
        assert abs(icc_2_1(m[:, 0], m[:, 1]) - anova_icc_oracle(m[:, 0], m[:, 1])) < 1e-10


def test_icc_needs_three():
    with pytest.raises(ValueError):
        icc_2_1([1.0, 2.0], [1.0, 2.0])


def test_icc_degenerate():
    with pytest.raises(ValueError):
        icc_2_1([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(-100, 100))
def test_icc_symmetric_and_mae_translation(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=20), rng.normal(size=20)
    assert icc_2_1(a, b) == pytest.approx(icc_2_1(b, a), abs=1e-12)
    assert mae(a + c, b + c) == pytest.approx(mae(a, b), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(0.01, 10))
def test_offset_reduces_icc(seed, c):
    a = np.random.default_rng(seed).normal(size=15)
    assert icc_2_1(a + c, a) < icc_2_1(a, a)


def test_agreement_report_pairwise_deletion(tmp_path):
    rng = np.random.default_rng(1)
    refs = rng.uniform(1, 5, size=(30, 6))
    preds = refs + rng.normal(0, 0.1, size=refs.shape)
    refs[:5, 2] = np.nan
    refs[:, 4] = np.nan
    report = agreement_report(preds, refs, ["VAT", "SAT", "TAT", "TLT", "TTM", "LFF"])
    rows = {t.target: t for t in report.targets}
    assert "TTM" not in rows
    assert rows["TAT"].n == 25 and rows["TAT"].missing_refs == 5
    assert rows["VAT"].mae == pytest.approx(mae(preds[:, 0], refs[:, 0]))
    for t in report.targets:
        assert -1 <= t.icc <= 1 and t.r2 <= 1 and t.mae >= 0 and t.mape >= 0
    report.write_json(tmp_path / "a.json")
    report.write_csv(tmp_path / "a.csv")
    assert json.loads((tmp_path / "a.json").read_text())["targets"][0]["target"] == "VAT"
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "target,N,ICC,R2,MAE,MAPE,r"
