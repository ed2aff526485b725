import json
import math

import numpy as np
import pytest

from canopysr.metrics import (
    BIN_EDGES, EvalReport, MetricAccumulator, basic_metrics, bin_errors, box_stats, fap,
)
from canopysr.predict import bicubic_upsample, block_downsample


def literal_metrics(p, y):
    n = len(p)
    abs_sum = sq_sum = rel_sum = y_sum = 0.0
    for a, b in zip(p, y):
        abs_sum += abs(a - b)
        sq_sum += (a - b) ** 2
        rel_sum += abs(a - b) / b
        y_sum += b
    ybar = y_sum / n
    ss_tot = sum((b - ybar) ** 2 for b in y)
    return abs_sum / n, math.sqrt(sq_sum / n), 1 - sq_sum / ss_tot, rel_sum / n


def sort_quartiles(values):
    """Linear-interpolation quartiles from a sorted list."""
    s = sorted(values)

    def q(frac):
        pos = frac * (len(s) - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, len(s) - 1)
        return s[lo] + (pos - lo) * (s[hi] - s[lo])

    return q(0.25), q(0.5), q(0.75)


def gaussian_blur(img, sigma):
    n = img.shape[0]
    f = np.fft.fftfreq(n)
    kernel = np.exp(-2 * (np.pi * sigma) ** 2 * (f[:, None] ** 2 + f[None, :] ** 2))
    return np.real(np.fft.ifft2(np.fft.fft2(img) * kernel))


# ------------------------------------------------------------------ basic

def test_basic_perfect_and_mean_predictor(rng):
    y = rng.uniform(1.5, 40, 500)
    m = basic_metrics(y, y)
    assert (m.mae, m.rmse, m.r2, m.rmae) == (0.0, 0.0, 1.0, 0.0)
    assert basic_metrics(np.full_like(y, y.mean()), y).r2 == pytest.approx(0.0, abs=1e-12)


def test_basic_matches_literal_oracle():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        y = rng.uniform(1.5, 40, 10_000)
        p = y + rng.normal(0, 3, y.size)
        got = basic_metrics(p, y)
        want = literal_metrics(p.tolist(), y.tolist())
        assert np.allclose([got.mae, got.rmse, got.r2, got.rmae], want, rtol=0, atol=1e-9)
        assert got.mae <= got.rmse


def test_basic_masking_and_errors(rng):
    y = rng.uniform(2, 20, (10, 10))
    p = y + rng.normal(0, 1, y.shape)
    v = rng.uniform(size=y.shape) > 0.4
    p_bad = p.copy()
    p_bad[~v] = 1e9
    assert basic_metrics(p_bad, y, v) == basic_metrics(p[v], y[v])
    assert basic_metrics(np.arange(5.0), np.full(5, 7.0)).r2 is None
    with pytest.raises(ValueError):
        basic_metrics([1.0], [2.0])
    with pytest.raises(ValueError):
        basic_metrics(np.zeros(3), np.zeros(4))


# ------------------------------------------------------------------- bins

def test_bins_layout_and_single_bin():
    bins = bin_errors(np.full(20, 12.0), np.full(20, 11.0))
    assert [b.label for b in bins] == ["1.5-5", "5-10", "10-15", "15-20", "20-25", "25-30", ">30"]
    assert [b.fraction for b in bins] == [0, 0, 1, 0, 0, 0, 0]
    assert bins[2].median == 1.0
    assert all(b.median is None and b.count == 0 for i, b in enumerate(bins) if i != 2)


def test_symmetric_errors_median_zero():
    y = np.full(10, 17.0)
    p = y + np.array([1, -1] * 5)
    assert bin_errors(p, y)[3].median == 0.0


def test_bins_match_sort_oracle(rng):
    y = rng.uniform(1.5, 45, 10_000)
    p = y + rng.standard_t(3, y.size)
    bins = bin_errors(p, y)
    assert sum(b.fraction for b in bins) == pytest.approx(1.0, abs=1e-12)
    e = p - y
    for b in bins:
        sel = [float(err) for err, t in zip(e, y) if b.lo <= t < b.hi]
        assert b.count == len(sel)
        q1, med, q3 = sort_quartiles(sel)
        assert (b.q1, b.median, b.q3) == pytest.approx((q1, med, q3), abs=1e-9)
        iqr = q3 - q1
        inside = [x for x in sel if q1 - 1.5 * iqr <= x <= q3 + 1.5 * iqr]
        assert b.whisker_lo == min(inside) and b.whisker_hi == max(inside)


def test_targets_below_first_edge_are_ignored():
    bins = bin_errors([1.0, 3.0, 3.0], [1.0, 3.0, 3.5])
    assert bins[0].count == 2 and bins[0].fraction == 1.0


def test_box_stats_outliers_excluded_from_whiskers():
    s = box_stats(np.array([0.0, 1.0, 2.0, 3.0, 100.0]))
    assert s["whisker_hi"] == 3.0 and s["whisker_lo"] == 0.0


# -------------------------------------------------------------------- FAP

def test_fap_identical_and_anchor(rng):
    img = rng.standard_normal((32, 32))
    a, b = fap(img), fap(img.copy())
    assert np.array_equal(a.value, b.value)
    assert a.value[0] == 0.0
    assert len(a.value) == 16  # capped at side // 2
    assert len(fap(rng.standard_normal((128, 128))).value) == 32
    assert len(fap(img, n_bins=7).value) == 7
    assert np.all((a.frequency > 0) & (a.frequency < 1))


def test_fap_constant_offset_invariant(rng):
    img = rng.standard_normal((40, 40))
    assert np.allclose(fap(img).value, fap(img + 25.0).value, atol=1e-12)


def test_fap_matches_dft_oracle(rng):
    n, bins = 16, 4
    img = rng.standard_normal((n, n))
    mag = np.abs(np.fft.fft2(img))
    acc = [[] for _ in range(bins)]
    for u in range(n):
        for v in range(n):
            fu = u if u < n / 2 else u - n
            fv = v if v < n / 2 else v - n
            r = math.hypot(fu, fv) / (n / 2)
            if r == 0 or r > 1:
                continue
            acc[min(math.ceil(r * bins) - 1, bins - 1)].append(mag[u, v])
    means = [np.mean(a) for a in acc]
    want = np.log10(np.array(means) / means[0])
    assert np.allclose(fap(img, bins).value, want, atol=1e-12)


def test_blur_lowers_high_frequencies():
    rng = np.random.default_rng(7)
    noise = rng.standard_normal((64, 64))
    raw, blurred = fap(noise), fap(gaussian_blur(noise, 1.5))
    top = len(raw.value) * 3 // 4
    assert np.all(blurred.value[top:] < raw.value[top:])


@pytest.mark.parametrize("seed", range(5))
def test_downsample_then_bicubic_loses_high_frequencies(seed):
    rng = np.random.default_rng(seed)
    img = gaussian_blur(rng.standard_normal((64, 64)), 1.0) * 5 + rng.uniform(0, 30, (64, 64))
    orig = fap(img)
    coarse = fap(bicubic_upsample(block_downsample(img, 2), 2))
    sel = orig.frequency > 0.5
    assert np.all(coarse.value[sel] <= orig.value[sel] + 1e-12)


def test_fap_errors():
    with pytest.raises(ValueError, match="square"):
        fap(np.zeros((8, 10)))
    with pytest.raises(ValueError):
        fap(np.zeros((4, 4)))


# ----------------------------------------------------------- accumulation

def test_accumulator_matches_pooled_metrics(rng):
    parts = [(rng.uniform(2, 35, (12, 12)), rng.uniform(size=(12, 12)) > 0.3) for _ in range(5)]
    preds = [y + rng.normal(0, 2, y.shape) for y, _ in parts]
    acc = MetricAccumulator()
    for p, (y, v) in zip(preds, parts):
        acc.add(p, y, v)
    pooled_p = np.concatenate([p[v] for p, (_, v) in zip(preds, parts)])
    pooled_y = np.concatenate([y[v] for y, v in parts])
    ref = basic_metrics(pooled_p, pooled_y)
    rep = acc.report(2.5)
    for k in ("mae", "rmse", "r2", "rmae"):
        assert getattr(rep.metrics, k) == pytest.approx(getattr(ref, k), abs=1e-9)
    assert rep.metrics.n == ref.n


def test_accumulator_merge_order_free(rng):
    chunks = [(rng.uniform(2, 35, 50), rng.uniform(2, 35, 50)) for _ in range(4)]
    a, b, whole = MetricAccumulator(), MetricAccumulator(), MetricAccumulator()
    for i, (p, y) in enumerate(chunks):
        (a if i % 2 else b).add(p, y)
        whole.add(p, y)
    merged = b.merge(a).report().metrics
    assert merged.r2 == pytest.approx(whole.report().metrics.r2, abs=1e-12)
    assert merged.mae == pytest.approx(whole.report().metrics.mae, abs=1e-12)
    with pytest.raises(ValueError):
        MetricAccumulator().report()


def test_report_files(tmp_path, rng):
    y = rng.uniform(2, 40, 300)
    rep = MetricAccumulator().add(y + 1, y).report(5.0)
    rep.fap = [(0.25, 0.0), (0.75, -1.5)]
    out = rep.write(tmp_path / "r")
    data = json.loads((out / "metrics.json").read_text())
    assert data["mae"] == pytest.approx(1.0) and data["resolution"] == 5.0
    assert data["bins"][-1]["hi"] is None and len(data["bins"]) == len(BIN_EDGES) - 1
    assert data["fap"] == [[0.25, 0.0], [0.75, -1.5]]
    assert "MAE (m)     1.0000" in (out / "report.txt").read_text()
    assert (out / "bins.csv").read_text().splitlines()[0].startswith("range,count,fraction")
    assert isinstance(rep, EvalReport)
