from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import small_config
from myodecode import evaluation as ev
from myodecode.config import DecodeConfig
from myodecode.decode import BinnedActivity
from myodecode.errors import InvalidArgumentError, UndefinedMetricError
from myodecode.evaluation import (
    MuxSchedule,
    apply_mask,
    best_lag,
    format_mean_variance,
    format_r2_pair,
    match_trains,
    multivariate_r2,
    mux_mask,
    time_multiplex,
)
from myodecode.sim import KinematicsTrajectory, SpikeTrainSet, build_scene


# -- R2 -------------------------------------------------------------------------

def test_r2_perfect_and_mean():
    ref = np.random.default_rng(0).normal(size=(3, 50))
    assert multivariate_r2(ref, ref) == 1.0
    mean = np.repeat(ref.mean(axis=1, keepdims=True), 50, axis=1)
    assert multivariate_r2(mean, ref) == pytest.approx(0.0, abs=1e-12)
    assert multivariate_r2(-ref, ref) < 0


def test_r2_pools_over_dofs():
    ref = np.array([[0.0, 2.0, 4.0], [1.0, 1.0, 4.0]])
    est = np.array([[1.0, 2.0, 4.0], [1.0, 2.0, 4.0]])
    sst = 8.0 + 6.0
    assert multivariate_r2(est, ref) == pytest.approx(1 - 2.0 / sst, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 20), elements=st.floats(-100, 100)),
       arrays(np.float64, (2, 20), elements=st.floats(-100, 100)),
       st.floats(-50, 50), st.floats(-50, 50))
def test_r2_invariant_to_shared_offset(est, ref, c0, c1):
    if np.any(np.ptp(ref, axis=1) < 1e-3):
        return
    shift = np.array([[c0], [c1]])
    assert multivariate_r2(est + shift, ref + shift) == pytest.approx(multivariate_r2(est, ref), abs=1e-6)


def test_r2_errors():
    with pytest.raises(UndefinedMetricError):
        multivariate_r2(np.ones((1, 5)), np.ones((1, 5)))
    with pytest.raises(InvalidArgumentError):
        multivariate_r2(np.ones((1, 5)), np.ones((1, 6)))
    a = KinematicsTrajectory(np.arange(5.0)[None], ["EF"], 20.0)
    b = KinematicsTrajectory(np.arange(5.0)[None], ["WP"], 20.0)
    with pytest.raises(InvalidArgumentError):
        multivariate_r2(a, b)


def test_table_one_formatting():
    assert format_r2_pair(0.8712, 0.7349) == "train 0.87 / test 0.73"
    assert format_mean_variance([0.7236]) == "0.7236"
    assert format_mean_variance([1.0, 2.0, 3.0]) == "2.0000±1.0000"


# -- spike matching ---------------------------------------------------------------

def test_match_with_lag_and_jitter():
    rng = np.random.default_rng(1)
    truth = np.sort(rng.choice(np.arange(0, 100_000, 40), 500, replace=False))
    detected = truth + 17 + rng.integers(-2, 3, truth.size)
    detected = np.sort(np.concatenate([detected[:450], [5, 99_999]]))
    m = match_trains(detected, truth, tol=2, max_lag=64)
    assert m.lag == 17
    assert m.matched == 450
    assert m.rate_of_agreement == pytest.approx(450 / (452 + 500 - 450))
    assert m.recall == pytest.approx(0.9)


def test_best_lag_empty():
    assert best_lag(np.array([], dtype=int), np.array([1, 2]), 10) == 0


def test_matched_neurons_self(truth_scene):
    spikes = truth_scene.spikes
    assert ev.matched_neurons(spikes, spikes) == list(range(len(spikes)))
    assert ev.detection_recall(spikes, spikes) == 1.0


# -- reduced-set sweep ----------------------------------------------------------------

def extended_musts(spikes: SpikeTrainSet, delays: int) -> SpikeTrainSet:
    """Delayed replicas of every train, like the output of an extended decomposition."""
    trains, labels = [], []
    for lab, t in zip(spikes.source_labels, spikes.trains):
        for d in range(delays):
            shifted = t + d
            trains.append(shifted[shifted < spikes.n_samples])
            labels.append(f"{lab}_d{d}")
    return SpikeTrainSet(trains, spikes.sample_rate, labels, spikes.n_samples)


@pytest.fixture(scope="module")
def wide_musts(truth_scene):
    return extended_musts(truth_scene.spikes, 9), truth_scene.reference


@pytest.fixture(scope="module")
def paper_sweep(wide_musts):
    musts, ref = wide_musts
    return ev.reduced_set_sweep(musts, ref, [8, 16, 32, 48, 96, 192], 50, 0)


def test_sweep_shape(paper_sweep):
    size_entries = [e for e in paper_sweep.entries if e.key != "full"]
    assert [e.key for e in size_entries] == ["8", "16", "32", "48", "96", "192"]
    assert all(e.runs == 50 for e in size_entries)
    assert paper_sweep.run_count == 50
    assert len([r for r in paper_sweep.run_rows() if r["key"] != "full"]) == 300


def test_sweep_percentiles_consistent(paper_sweep):
    for row, e in zip(paper_sweep.summary_rows(), paper_sweep.entries):
        q = np.percentile(e.test, [25, 50, 75])
        assert (row["test_p25"], row["test_median"], row["test_p75"]) == tuple(q)
        assert row["test_p25"] <= row["test_median"] <= row["test_p75"]
        assert row["test_mean"] == pytest.approx(np.mean(e.test), abs=0)


def test_sweep_trend(paper_sweep):
    assert paper_sweep.entry(96).stats()["mean"] >= paper_sweep.entry(8).stats()["mean"]


def test_sweep_full_size_equals_plain_pipeline(wide_musts):
    musts, ref = wide_musts
    report = ev.reduced_set_sweep(musts, ref, [len(musts)], 1, 0, include_full=False)
    plain = ev.run_decode(musts, ref, DecodeConfig())
    assert report.entries[0].test == [plain.r2_test]
    assert report.entries[0].train == [plain.r2_train]


def test_sweep_skips_oversized(wide_musts, caplog):
    musts, ref = wide_musts
    with caplog.at_level(logging.WARNING):
        report = ev.reduced_set_sweep(musts, ref, [8, 10_000], 2, 0)
    assert [e.key for e in report.entries] == ["8", "full"]
    assert "10000" in caplog.text


def test_sweep_deterministic_and_extendable(wide_musts):
    musts, ref = wide_musts
    a = ev.reduced_set_sweep(musts, ref, [8, 16], 3, 5)
    b = ev.reduced_set_sweep(musts, ref, [8, 16], 3, 5)
    c = ev.reduced_set_sweep(musts, ref, [8, 16], 5, 5)
    assert a.run_rows() == b.run_rows()
    for key in ("8", "16"):
        assert c.entry(key).test[:3] == a.entry(key).test


def test_threads_do_not_change_results(wide_musts, monkeypatch):
    musts, ref = wide_musts
    monkeypatch.setenv("MYODECODE_THREADS", "1")
    serial = ev.reduced_set_sweep(musts, ref, [8], 6, 2)
    monkeypatch.setenv("MYODECODE_THREADS", "4")
    assert ev.worker_count() == 4
    parallel = ev.reduced_set_sweep(musts, ref, [8], 6, 2)
    assert serial.run_rows() == parallel.run_rows()


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("MYODECODE_THREADS", "3")
    assert ev.worker_count() == 3
    monkeypatch.setenv("MYODECODE_THREADS", "zero")
    assert ev.worker_count() >= 1


# -- time multiplexing -----------------------------------------------------------------

def replay_oracle(values, mask):
    """Value of each column at its most recent refresh time, zero before the first."""
    out = np.zeros_like(values)
    for t in range(values.shape[0]):
        for c in range(values.shape[1]):
            refreshed = np.flatnonzero(mask[: t + 1, c])
            out[t, c] = values[refreshed[-1], c] if refreshed.size else 0.0
    return out


def binned(n_bins=60, n_ch=12, seed=0):
    rng = np.random.default_rng(seed)
    return BinnedActivity(rng.poisson(2.0, (n_bins, n_ch)).astype(float), 50.0, [f"c{i}" for i in range(n_ch)])


def test_schedule_revisit_time():
    s = MuxSchedule(32, 100.0, 3, 96)
    assert s.revisit_ms == 300.0
    assert s.subset_size * s.switches >= s.scheduled


def test_schedule_validation():
    with pytest.raises(InvalidArgumentError):
        MuxSchedule(4, 100.0, 2, 9)
    with pytest.raises(InvalidArgumentError):
        MuxSchedule(4, 100.0, 2, 8, selection="sometimes")
    with pytest.raises(InvalidArgumentError):
        time_multiplex(binned(), MuxSchedule(4, 75.0, 3, 12))


def test_full_subset_is_identity_and_idempotent():
    b = binned()
    out = time_multiplex(b, MuxSchedule(12, 50.0, 1, 12))
    assert np.array_equal(out.values, b.values)
    again = time_multiplex(out, MuxSchedule(12, 50.0, 1, 12))
    assert np.array_equal(again.values, out.values)


@pytest.mark.parametrize("schedule", [
    MuxSchedule(4, 100.0, 3, 12, seed=1),
    MuxSchedule(4, 50.0, 3, 12, selection="periodic", seed=2),
    MuxSchedule(3, 200.0, 3, 8, seed=3),
    MuxSchedule(5, 100.0, 3, 12, seed=4),
])
def test_replay_oracle_and_coverage(schedule):
    b = binned(n_bins=61)
    mask = mux_mask(schedule, b.n_bins, 12, 50.0)
    out = time_multiplex(b, schedule).values
    assert np.array_equal(out, replay_oracle(b.values, mask))
    block = int(schedule.block_ms / 50.0)
    cycle = block * schedule.switches
    scheduled = np.flatnonzero(mask.any(axis=0))
    assert scheduled.size == min(schedule.scheduled, 12)
    for start in range(0, b.n_bins - cycle + 1, cycle):
        assert np.all(mask[start:start + cycle, scheduled].any(axis=0))
    # each block reads exactly subset_size channels, constant within the block
    for start in range(0, b.n_bins, block):
        rows = mask[start:start + block]
        assert np.all(rows == rows[0]) and rows[0].sum() == schedule.subset_size


def test_mask_commutes_with_column_permutation():
    b = binned()
    mask = mux_mask(MuxSchedule(4, 100.0, 3, 12, seed=5), b.n_bins, 12, 50.0)
    perm = np.random.default_rng(0).permutation(12)
    assert np.array_equal(apply_mask(b.values[:, perm], mask[:, perm]), apply_mask(b.values, mask)[:, perm])


def test_scheduled_count_clamped_to_available():
    mask = mux_mask(MuxSchedule(4, 50.0, 7, 28, seed=0), 70, 12, 50.0)
    assert mask.any(axis=0).all()


# -- studies on the small scene -------------------------------------------------------

@pytest.fixture(scope="module")
def small_truth():
    cfg = small_config(n_dof=3)
    cfg.sim.neurons_per_dof = 6
    scene = build_scene(cfg.sim, 1)
    return extended_musts(scene.spikes, 6), scene.reference


def test_mux_study_entries(small_truth):
    musts, ref = small_truth
    setups = [MuxSchedule(8, 200.0, 7, 56, label="a"), MuxSchedule(8, 100.0, 3, 24, label="b"),
              MuxSchedule(8, 50.0, 3, 24, label="c")]
    report = ev.mux_study(musts, ref, setups, 3, 0, baselines=(8, 24))
    assert [e.key for e in report.entries] == ["a", "b", "c", "reduced8", "reduced24", "full"]
    plain = ev.run_decode(musts, ref, DecodeConfig())
    assert report.entry("full").test == [plain.r2_test]
    again = ev.mux_study(musts, ref, setups, 3, 0, baselines=(8, 24))
    assert again.run_rows() == report.run_rows()


def test_thresholding_without_drift_agrees(small_scene):
    cfg, scene = small_scene
    report = ev.thresholding_comparison(scene.emg, scene.reference, cfg, scene.spikes)
    a, k = report.adaptive, report.kmeans
    assert a.r2_test is not None and k.r2_test is not None
    assert abs(a.r2_test - k.r2_test) <= 0.05
    assert report.improvement_test_pct == pytest.approx(100 * (a.r2_test - k.r2_test) / abs(k.r2_test))


def test_pct():
    assert ev._pct(1.2, 1.0) == pytest.approx(20.0)
    assert ev._pct(None, 1.0) is None
    assert ev._pct(1.0, 0.0) is None
