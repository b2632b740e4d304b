"""Acceptance gate: one test and one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines print even without ``-s``).
"""

import json
import os
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from conftest import run_pipeline
from uqe.ensemble import (EnsembleConfig, PredictionTable, aggregate, jensen_violations,
                          run_cross_validation)
from uqe.loss import HALF_LOG_2PI, mse_loss, nll_loss
from uqe.metrics import icc_2_1, mae, pearson, r_squared
from uqe.net import NetConfig, backward, forward, init_params
from uqe.synthgen import SynthConfig, generate
from uqe.uncertainty import calibration_curve, fit_scaling_factor, oracle_curve, sparsification_curve
from uqe.volume import RawVolume, fat_fraction, mean_intensity_projection, quantize, read_raw3d, write_raw3d

pytestmark = pytest.mark.slow

# Desk-scale heteroscedastic setup shared by criteria 4, 7, 8 and 9.
COHORT = SynthConfig(n_subjects=2000, feature_dim=16, seed=1, noise_floor=0.05, noise_slope=0.08)
NET = NetConfig(input_dim=16, hidden=(64, 64), base_lr=1e-3, total_iters=6000, drop_at=5000)
ABLATION_SEEDS = (0, 100, 200, 300, 400)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="session")
def cohort():
    return generate(COHORT)


@pytest.fixture(scope="session")
def ablation_runs(cohort):
    """2-fold CV for M=5 and M=1 at each ablation seed, keyed by seed."""
    data, _ = cohort
    runs = {}
    for seed in ABLATION_SEEDS:
        net = NetConfig(**{**NET.to_dict(), "hidden": NET.hidden, "seed": seed})
        start = time.perf_counter()
        five = run_cross_validation(EnsembleConfig(net, members=5), data, k=2, seed=0).merged
        elapsed = time.perf_counter() - start
        one = run_cross_validation(EnsembleConfig(net, members=1, fold_withholding=False),
                                   data, k=2, seed=0).merged
        runs[seed] = {"M5": five, "M1": one, "seconds_M5": elapsed}
    return runs


# ---------------------------------------------------------------- criterion 1


def _loss(params, x, y, mask, head):
    out = forward(params, x, head)
    if head == "least_squares":
        return mse_loss(out.mean, y, mask).total
    return nll_loss(out.mean, out.variance, y, mask).total


def _fd_max_rel_error(params, x, y, mask, head, h=1e-5):
    _, grads = backward(params, x, y, mask, head)
    worst = 0.0
    for i in range(params.flat.size):
        plus, minus = params.copy(), params.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        fd = (_loss(plus, x, y, mask, head) - _loss(minus, x, y, mask, head)) / (2 * h)
        a = grads.flat[i]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    return worst


def test_criterion_01_gradient_fidelity(verdict):
    start = time.perf_counter()
    worst, cases = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d, t, b = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 7))
        hidden = tuple(int(w) for w in rng.integers(2, 6, size=rng.integers(1, 3)))
        for head in ("least_squares", "mean_variance"):
            params = init_params(NetConfig(input_dim=d, hidden=hidden, head=head, n_targets=t), rng)
            params.flat[...] += rng.normal(0, 0.1, size=params.flat.shape)
            x, y = rng.normal(size=(b, d)), rng.normal(size=(b, t))
            mask = rng.random((b, t)) < 0.8
            mask[0, 0] = True
            worst = max(worst, _fd_max_rel_error(params, x, y, mask, head))
            cases += 1
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-4 and elapsed < 30,
            f"{cases} networks, max relative error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)")


# ---------------------------------------------------------------- criterion 2


def test_criterion_02_loss_identity(verdict):
    worst = 0.0
    for seed in range(500):
        rng = np.random.default_rng(seed)
        b, t = int(rng.integers(1, 40)), int(rng.integers(1, 7))
        mu, y = rng.normal(size=(b, t)) * 3, rng.normal(size=(b, t)) * 3
        mask = rng.random((b, t)) < 0.7
        mask[0, 0] = True
        nll = nll_loss(mu, np.ones((b, t)), y, mask).total
        worst = max(worst, abs(nll - (0.5 * mse_loss(mu, y, mask).total + HALF_LOG_2PI)))
    verdict(2, worst < 1e-12, f"500 batches, max |nll - (mse/2 + log(2pi)/2)| = {worst:.1e} (< 1e-12)")


# ---------------------------------------------------------------- criterion 3


def _anova_icc(a, b):
    n = len(a)
    data = [[float(a[i]), float(b[i])] for i in range(n)]
    grand = sum(v for row in data for v in row) / (2 * n)
    rmean = [(row[0] + row[1]) / 2 for row in data]
    cmean = [sum(row[j] for row in data) / n for j in (0, 1)]
    msr = sum(2 * (m - grand) ** 2 for m in rmean) / (n - 1)
    msc = sum(n * (m - grand) ** 2 for m in cmean)
    mse = sum((data[i][j] - rmean[i] - cmean[j] + grand) ** 2 for i in range(n) for j in (0, 1)) / (n - 1)
    return (msr - mse) / (msr + mse + 2 * (msc - mse) / n)


def test_criterion_03_icc_oracle(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        m = rng.normal(size=(50, 2)) + rng.normal(size=(50, 1)) * rng.uniform(0, 3) + rng.normal(size=2)
        worst = max(worst, abs(icc_2_1(m[:, 0], m[:, 1]) - _anova_icc(m[:, 0], m[:, 1])))
    a = np.array([1.0, 2.0, 3.0, 4.0])
    hand = icc_2_1(a, a + 1)
    verdict(3, worst < 1e-10 and abs(hand - 0.76923) <= 1e-5,
            f"1000 matrices, max deviation {worst:.1e} (< 1e-10); hand case {hand:.6f} (0.76923 +- 1e-5)")


# ---------------------------------------------------------------- criterion 4


def test_criterion_04_mixture_aggregation(verdict, ablation_runs, tmp_path):
    mean, var = aggregate(np.array([[1.0], [3.0]]), np.array([[1.0], [1.0]]))
    hand = mean.tolist() == [2.0] and var.tolist() == [2.0]
    tables = [r[k] for r in ablation_runs.values() for k in ("M5", "M1")]
    pipeline = run_pipeline(tmp_path / "run")
    tables.append(PredictionTable.read_csv(pipeline["predictions"]))
    violations = sum(jensen_violations(t) for t in tables)
    verdict(4, hand and violations == 0,
            f"hand case -> ({mean[0]}, {var[0]}); Jensen violations {violations} across {len(tables)} runs")


# ---------------------------------------------------------------- criterion 5


def test_criterion_05_calibration_soundness(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    sigma = rng.uniform(0.1, 5.0, size=100_000)
    curve = calibration_curve(rng.normal(0.0, sigma), sigma)
    worst = float(np.max(np.abs(curve.y - curve.x)))
    elapsed = time.perf_counter() - start
    verdict(5, worst < 0.01 and curve.summary < 0.005 and elapsed < 10,
            f"max |y-p| {worst:.4f} (< 0.01), AUCE {curve.summary:.4f} (< 0.005), {elapsed:.2f}s (< 10s)")


# ---------------------------------------------------------------- criterion 6


def test_criterion_06_recalibration_recovery(verdict):
    rng = np.random.default_rng(6)
    sigma = rng.uniform(0.2, 3.0, size=10_000)
    r = rng.normal(0.0, sigma)
    ok, parts = True, []
    for corruption in (0.5, 2.0):
        s = fit_scaling_factor(r, corruption * sigma)
        after = calibration_curve(r, s * corruption * sigma).summary
        good = abs(s * corruption - 1.0) <= 0.1 and after <= 0.02
        ok &= good
        parts.append(f"x{corruption}: factor {s:.3f} (target {1 / corruption:.1f} +-10%), AUCE {after:.4f}")
    verdict(6, ok, "; ".join(parts) + " (AUCE <= 0.02)")


# ---------------------------------------------------------------- criterion 7


def test_criterion_07_heteroscedastic_recovery(verdict, cohort, ablation_runs):
    _, truth = cohort
    run = ablation_runs[0]
    table = run["M5"]
    rs = [pearson(table.variance[:, t], truth.true_var[:, t]) for t in range(6)]
    r2 = [r_squared(table.mean[:, t], truth.true_mean[:, t]) for t in range(6)]
    elapsed = run["seconds_M5"]
    verdict(7, min(rs) >= 0.8 and min(r2) >= 0.9 and elapsed < 300,
            f"min r(var) {min(rs):.3f} (>= 0.8), min R2 {min(r2):.3f} (>= 0.9), {elapsed:.0f}s (< 300s)")


# ---------------------------------------------------------------- criterion 8


def test_criterion_08_sparsification_sanity(verdict, ablation_runs):
    table = ablation_runs[0]["M5"]
    ok, notes = True, []
    for t, name in enumerate(table.target_names):
        keep = ~np.isnan(table.reference[:, t])
        err = np.abs(table.reference[keep, t] - table.mean[keep, t])
        oracle = oracle_curve(err)
        curve = sparsification_curve(err, table.variance[keep, t])
        at10 = float(curve.y[int(np.searchsorted(curve.x, 0.1 - 1e-12))])
        mono = bool(np.all(np.diff(oracle.y) <= 0))
        ok &= mono and at10 <= curve.y[0]
        notes.append(f"{name} {at10 / curve.y[0] - 1:+.1%}")
    verdict(8, ok, "oracle non-increasing; MAE change at 10% exclusion: " + ", ".join(notes))


# ---------------------------------------------------------------- criterion 9


def _normalized_mae(means, table, scale):
    return float(np.mean([mae(means[:, t], table.reference[:, t]) / scale[t] for t in range(6)]))


def test_criterion_09_ensemble_size_ablation(verdict, cohort, ablation_runs):
    data, _ = cohort
    scale = np.nanstd(data.targets, axis=0, ddof=1)
    jensen_ok, member_ok = True, True
    auce = {"M5": [], "M1": []}
    for run in ablation_runs.values():
        five = run["M5"]
        for t in range(6):
            ens = mae(five.mean[:, t], five.reference[:, t])
            members = [mae(five.member_means[m, :, t], five.reference[:, t]) for m in range(5)]
            jensen_ok &= ens <= float(np.mean(members))
        ens_all = _normalized_mae(five.mean, five, scale)
        member_ok &= all(ens_all <= _normalized_mae(five.member_means[m], five, scale) for m in range(5))
        for key in auce:
            tab = run[key]
            auce[key].append(np.mean([calibration_curve(tab.reference[:, t] - tab.mean[:, t],
                                                        tab.sigma[:, t]).summary for t in range(6)]))
    a5, a1 = float(np.mean(auce["M5"])), float(np.mean(auce["M1"]))
    verdict(9, jensen_ok and member_ok and a5 <= a1,
            f"{len(ablation_runs)} seeds: ensemble MAE <= mean member MAE per target {jensen_ok}, "
            f"<= every member (target-averaged) {member_ok}; mean AUCE M=5 {a5:.4f} <= M=1 {a1:.4f}")


# --------------------------------------------------------------- criterion 10


def test_criterion_10_volume_bit_exactness(verdict, tmp_path):
    ones = RawVolume(np.ones((2, 2, 2)), "water")
    proj = all(mean_intensity_projection(ones, a).tolist() == [[2.0, 2.0], [2.0, 2.0]]
               for a in ("coronal", "sagittal"))
    ff = fat_fraction(RawVolume(np.array([[[3.0, 0.0]]]), "water"),
                      RawVolume(np.array([[[1.0, 0.0]]]), "fat")).voxels.ravel().tolist()
    q = quantize(np.array([0.0, 0.5, 1.0])).tolist()
    vol = RawVolume(np.random.default_rng(10).uniform(0, 500, size=(7, 5, 9)).astype(np.float32), "fat")
    write_raw3d(vol, tmp_path / "a.raw")
    write_raw3d(read_raw3d(tmp_path / "a.raw", "fat"), tmp_path / "b.raw")
    same = (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
    verdict(10, proj and ff == [0.25, 0.0] and q == [0, 128, 255] and same,
            f"projection {proj}, fat fraction {ff}, quantize {q}, RAW3D byte-identical {same}")


# --------------------------------------------------------------- criterion 11


def test_criterion_11_end_to_end_determinism(verdict, tmp_path):
    a = run_pipeline(tmp_path / "a", seed=11)
    b = run_pipeline(tmp_path / "b", seed=11)
    diffs = [k for k in a if a[k].read_bytes() != b[k].read_bytes()]
    verdict(11, not diffs, f"compared {len(a)} outputs; differing: {diffs or 'none'}")


# --------------------------------------------------------------- criterion 12

_THROUGHPUT_SCRIPT = textwrap.dedent("""
    import json, time
    import numpy as np
    from uqe.datamodel import fit_standardizer
    from uqe.ensemble import EnsembleBundle, EnsembleConfig, predict
    from uqe.net import NetConfig, init_params
    from uqe.synthgen import SynthConfig, generate

    data, _ = generate(SynthConfig(n_subjects=60, feature_dim=16, seed=12))
    cfg = EnsembleConfig(NetConfig(input_dim=16), members=10)
    rng = np.random.default_rng(0)
    bundle = EnsembleBundle(cfg, [init_params(cfg.net, rng) for _ in range(10)],
                            fit_standardizer(data), np.ones(6))
    predict(bundle, data)
    times = []
    for _ in range(20):
        start = time.perf_counter()
        predict(bundle, data)
        times.append(time.perf_counter() - start)
    print(json.dumps({"seconds": float(np.median(times)), "n": len(data)}))
""")


def test_criterion_12_throughput(verdict):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    out = subprocess.run([sys.executable, "-c", _THROUGHPUT_SCRIPT], env=env, check=True,
                         capture_output=True, text=True)
    result = json.loads(out.stdout.strip().splitlines()[-1])
    rate = result["n"] / result["seconds"]
    verdict(12, rate >= 60, f"{result['n']} subjects, M=10, single BLAS thread: {rate:,.0f} subjects/s (>= 60)")
