"""Scoring and robustness studies: multivariate R2, reduced channel sets,
time-multiplexed acquisition and adaptive vs. K-means spike detection."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import bss
from .config import DecodeConfig, RunConfig
from .decode import (
    BinnedActivity,
    ProjectionModel,
    align_reference,
    bin_spikes,
    fit_decoder,
    project,
    smooth,
    trial_rows,
)
from .errors import InvalidArgumentError, UnassignedDofError, UndefinedMetricError
from .sim import EmgRecording, KinematicsTrajectory, SpikeTrainSet

log = logging.getLogger(__name__)


def multivariate_r2(est: KinematicsTrajectory | np.ndarray, ref: KinematicsTrajectory | np.ndarray) -> float:
    """``1 - SSE/SST`` pooled over DoFs and time, SST about each DoF's reference mean."""
    if isinstance(est, KinematicsTrajectory) and isinstance(ref, KinematicsTrajectory):
        if list(est.dof_labels) != list(ref.dof_labels):
            raise InvalidArgumentError("DoF labels differ")
    e = est.angles if isinstance(est, KinematicsTrajectory) else np.atleast_2d(est)
    r = ref.angles if isinstance(ref, KinematicsTrajectory) else np.atleast_2d(ref)
    if e.shape != r.shape:
        raise InvalidArgumentError(f"shape mismatch {e.shape} vs {r.shape}")
    sst = np.sum((r - r.mean(axis=1, keepdims=True)) ** 2)
    if sst == 0:
        raise UndefinedMetricError("reference is constant; R2 undefined")
    return float(1.0 - np.sum((e - r) ** 2) / sst)


def format_r2_pair(train: float, test: float, digits: int = 2) -> str:
    """One-line train/test summary, e.g. ``train 0.87 / test 0.73``."""
    return f"train {train:.{digits}f} / test {test:.{digits}f}"


def format_mean_variance(values: Sequence[float], digits: int = 4) -> str:
    """``mean±variance`` over runs; a single run prints its value alone."""
    v = np.asarray(values, dtype=float)
    if v.size == 1:
        return f"{v[0]:.{digits}f}"
    return f"{v.mean():.{digits}f}\u00b1{v.var(ddof=1):.{digits}f}"


# -- spike train matching ---------------------------------------------------

def _count_matches(detected: np.ndarray, truth: np.ndarray, tol: int) -> int:
    """Greedy one-to-one matching of two sorted trains within ``tol`` samples."""
    i = j = matched = 0
    while i < detected.size and j < truth.size:
        diff = detected[i] - truth[j]
        if abs(diff) <= tol:
            matched += 1
            i += 1
            j += 1
        elif diff < 0:
            i += 1
        else:
            j += 1
    return matched


def best_lag(detected: np.ndarray, truth: np.ndarray, max_lag: int, tol: int = 0) -> int:
    """Lag (detected minus truth) in ``[-max_lag, max_lag]`` aligning the most spikes."""
    if detected.size == 0 or truth.size == 0:
        return 0
    lo = np.searchsorted(truth, detected - max_lag - tol)
    hi = np.searchsorted(truth, detected + max_lag + tol, side="right")
    diffs = np.concatenate([detected[k] - truth[lo[k]:hi[k]] for k in range(detected.size)])
    if diffs.size == 0:
        return 0
    lags = np.arange(-max_lag, max_lag + 1)
    hist = np.bincount(np.clip(diffs + max_lag + tol, 0, 2 * (max_lag + tol)), minlength=2 * (max_lag + tol) + 1)
    window = np.convolve(hist, np.ones(2 * tol + 1), mode="valid")
    return int(lags[int(np.argmax(window))])


@dataclass
class TrainMatch:
    matched: int
    detected: int
    truth: int
    lag: int

    @property
    def rate_of_agreement(self) -> float:
        denom = self.detected + self.truth - self.matched
        return self.matched / denom if denom else 1.0

    @property
    def recall(self) -> float:
        return self.matched / self.truth if self.truth else 1.0


def match_trains(detected: np.ndarray, truth: np.ndarray, tol: int, max_lag: int) -> TrainMatch:
    detected = np.asarray(detected, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    lag = best_lag(detected, truth, max_lag, tol)
    matched = _count_matches(detected - lag, truth, tol)
    return TrainMatch(matched, int(detected.size), int(truth.size), lag)


def match_sources(decomposed: SpikeTrainSet, truth: SpikeTrainSet, tol_ms: float = 1.0,
                  max_lag: int = 64) -> np.ndarray:
    """Matrix of :class:`TrainMatch` (truth x decomposed), each at its best lag."""
    tol = int(round(tol_ms * 1e-3 * truth.sample_rate))
    out = np.empty((len(truth), len(decomposed)), dtype=object)
    for i, t in enumerate(truth.trains):
        for j, d in enumerate(decomposed.trains):
            out[i, j] = match_trains(d, t, tol, max_lag)
    return out


def matched_neurons(decomposed: SpikeTrainSet, truth: SpikeTrainSet, tol_ms: float = 1.0,
                    min_roa: float = 0.9) -> list[int]:
    """Ground-truth neurons reproduced by at least one decomposed train."""
    if len(decomposed) == 0:
        return []
    table = match_sources(decomposed, truth, tol_ms)
    return [i for i in range(len(truth)) if max(m.rate_of_agreement for m in table[i]) >= min_roa]


# -- decoding runs ----------------------------------------------------------

@dataclass
class DecodeResult:
    model: ProjectionModel
    estimate: KinematicsTrajectory
    reference: KinematicsTrajectory
    r2_train: float
    r2_test: float


def evaluate_decoder(smoothed: BinnedActivity, reference: KinematicsTrajectory, cfg: DecodeConfig,
                     min_correlation: float | None = None) -> DecodeResult:
    """Fit on the training trials of ``smoothed`` and score train and test trials."""
    if min_correlation is not None:
        cfg = replace(cfg, min_correlation=min_correlation)
    model = fit_decoder(smoothed, reference, cfg)
    estimate = project(model, smoothed)
    train = trial_rows(smoothed.n_bins, cfg.trials, cfg.train_trials)
    test = trial_rows(smoothed.n_bins, cfg.trials, cfg.test_trials)
    r2_train = multivariate_r2(estimate.angles[:, train], reference.angles[:, train])
    r2_test = multivariate_r2(estimate.angles[:, test], reference.angles[:, test])
    return DecodeResult(model, estimate, reference, r2_train, r2_test)


def prepare(musts: SpikeTrainSet, reference: KinematicsTrajectory, cfg: DecodeConfig
            ) -> tuple[BinnedActivity, KinematicsTrajectory]:
    """Bin the whole session and align the reference to the bin grid."""
    binned = bin_spikes(musts, cfg.bin_ms, musts.duration_s)
    return binned, align_reference(reference, cfg.bin_ms, binned.n_bins)


def run_decode(musts: SpikeTrainSet, reference: KinematicsTrajectory, cfg: DecodeConfig,
               transform: Callable[[BinnedActivity], BinnedActivity] | None = None) -> DecodeResult:
    """Bin, optionally transform the raw counts, smooth, fit and score."""
    binned, ref = prepare(musts, reference, cfg)
    if transform is not None:
        binned = transform(binned)
    return evaluate_decoder(smooth(binned, cfg.cutoff_hz), ref, cfg)


def _robust_scores(smoothed: BinnedActivity, reference: KinematicsTrajectory, cfg: DecodeConfig) -> tuple[float, float]:
    """Train/test R2 for one study run; a DoF no component tracks falls back to its best match."""
    try:
        res = evaluate_decoder(smoothed, reference, cfg)
    except UnassignedDofError as exc:
        log.warning("%s; retrying with the correlation floor disabled", exc)
        res = evaluate_decoder(smoothed, reference, cfg, min_correlation=0.0)
    return res.r2_train, res.r2_test


# -- study reports ----------------------------------------------------------

def _stats(values: Sequence[float]) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return {
        "mean": float(v.mean()),
        "variance": float(v.var(ddof=1)) if v.size > 1 else 0.0,
        "median": float(med),
        "p25": float(q25),
        "p75": float(q75),
    }


@dataclass
class SweepEntry:
    key: str
    train: list[float]
    test: list[float]

    @property
    def runs(self) -> int:
        return len(self.test)

    def stats(self, which: str = "test") -> dict[str, float]:
        return _stats(self.test if which == "test" else self.train)


@dataclass
class SweepReport:
    entries: list[SweepEntry]
    seed: int
    run_count: int

    def entry(self, key: str | int) -> SweepEntry:
        for e in self.entries:
            if e.key == str(key):
                return e
        raise KeyError(key)

    def run_rows(self) -> list[dict[str, object]]:
        return [
            {"key": e.key, "run": r, "r2_train": tr, "r2_test": te}
            for e in self.entries
            for r, (tr, te) in enumerate(zip(e.train, e.test))
        ]

    def table(self) -> str:
        """Plain-text table of mean±variance per entry, train and test."""
        lines = [f"{'entry':>10}  {'train':>16}  {'test':>16}"]
        for e in self.entries:
            lines.append(f"{e.key:>10}  {format_mean_variance(e.train):>16}  {format_mean_variance(e.test):>16}")
        return "\n".join(lines)

    def summary_rows(self) -> list[dict[str, object]]:
        rows = []
        for e in self.entries:
            row: dict[str, object] = {"key": e.key, "runs": e.runs}
            for which in ("train", "test"):
                for name, value in e.stats(which).items():
                    row[f"{which}_{name}"] = value
            rows.append(row)
        return rows


def child_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream per (study item, run) so extra runs never disturb earlier ones."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def worker_count() -> int:
    env = os.environ.get("MYODECODE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer MYODECODE_THREADS=%r", env)
    return os.cpu_count() or 1


def _run_tasks(fn: Callable[[tuple], tuple[float, float]], tasks: list[tuple]) -> list[tuple[float, float]]:
    workers = min(worker_count(), max(1, len(tasks)))
    if workers == 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def reduced_set_sweep(musts: SpikeTrainSet, reference: KinematicsTrajectory, sizes: Sequence[int],
                      runs: int, seed: int, cfg: DecodeConfig | None = None,
                      include_full: bool = True) -> SweepReport:
    """Refit the decoder on random channel subsets of each size.

    Subsets are drawn without replacement and kept in their original column order.
    Sizes larger than the channel count are skipped with a warning. With
    ``include_full`` an extra ``"full"`` entry holds the all-channel result.
    """
    cfg = cfg or DecodeConfig()
    binned, ref = prepare(musts, reference, cfg)
    smoothed = smooth(binned, cfg.cutoff_hz)
    n = len(musts)
    valid = []
    for size in sizes:
        if size > n:
            log.warning("skipping subset size %d: only %d channels available", size, n)
        elif size < 1:
            raise InvalidArgumentError(f"subset size must be positive, got {size}")
        else:
            valid.append(int(size))

    def one(task: tuple[int, int]) -> tuple[float, float]:
        size, run = task
        cols = np.sort(child_rng(seed, size, run).choice(n, size, replace=False))
        return _robust_scores(smoothed.columns(cols), ref, cfg)

    tasks = [(size, run) for size in valid for run in range(runs)]
    results = _run_tasks(one, tasks)
    entries = []
    for k, size in enumerate(valid):
        chunk = results[k * runs:(k + 1) * runs]
        entries.append(SweepEntry(str(size), [r[0] for r in chunk], [r[1] for r in chunk]))
    if include_full:
        tr, te = _robust_scores(smoothed, ref, cfg)
        entries.append(SweepEntry("full", [tr], [te]))
    return SweepReport(entries, seed, runs)


# -- time multiplexing ------------------------------------------------------

@dataclass
class MuxSchedule:
    """Read ``subset_size`` channels per block of ``block_ms``; ``switches`` blocks per revisit."""

    subset_size: int
    block_ms: float
    switches: int
    scheduled: int
    selection: str = "random"
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        if self.subset_size < 1 or self.switches < 1 or self.scheduled < 1:
            raise InvalidArgumentError("subset_size, switches and scheduled must be >= 1")
        if self.block_ms <= 0:
            raise InvalidArgumentError("block_ms must be positive")
        if self.selection not in ("random", "periodic"):
            raise InvalidArgumentError(f"unknown selection {self.selection!r}")
        if self.subset_size * self.switches < self.scheduled:
            raise InvalidArgumentError("subset_size * switches must cover the scheduled channels")

    @property
    def revisit_ms(self) -> float:
        return self.switches * self.block_ms


def _cycle_groups(channels: np.ndarray, schedule: MuxSchedule, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(channels)
    s = schedule.subset_size
    groups = []
    for i in range(schedule.switches):
        group = order[i * s:(i + 1) * s]
        if group.size < s:
            # pad the tail block with channels already read earlier in the cycle
            visited = np.setdiff1d(order[: i * s], group)
            extra = rng.choice(visited, min(s - group.size, visited.size), replace=False)
            group = np.concatenate([group, extra])
        groups.append(np.sort(group))
    return groups


def mux_mask(schedule: MuxSchedule, n_bins: int, n_channels: int, bin_ms: float) -> np.ndarray:
    """Boolean (bins x channels) mask of which channels are read in each bin."""
    ratio = schedule.block_ms / bin_ms
    block = int(round(ratio))
    if block < 1 or abs(ratio - block) > 1e-9:
        raise InvalidArgumentError(f"block of {schedule.block_ms} ms is not a multiple of {bin_ms} ms bins")
    rng = np.random.default_rng(schedule.seed)
    scheduled = schedule.scheduled
    if scheduled > n_channels:
        log.debug("scheduling %d channels but only %d exist; using all", scheduled, n_channels)
        scheduled = n_channels
    if scheduled == n_channels:
        channels = np.arange(n_channels)
    else:
        channels = np.sort(rng.choice(n_channels, scheduled, replace=False))
    mask = np.zeros((n_bins, n_channels), dtype=bool)
    groups: list[np.ndarray] = []
    for b, start in enumerate(range(0, n_bins, block)):
        pos = b % schedule.switches
        if pos == 0 and (schedule.selection == "random" or not groups):
            groups = _cycle_groups(channels, schedule, rng)
        mask[start:start + block, groups[pos]] = True
    return mask


def apply_mask(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Hold each column at its last read value; zero before its first read."""
    out = np.empty_like(values)
    held = np.zeros(values.shape[1])
    for t in range(values.shape[0]):
        row = mask[t]
        held[row] = values[t, row]
        out[t] = held
    return out


def time_multiplex(binned: BinnedActivity, schedule: MuxSchedule) -> BinnedActivity:
    mask = mux_mask(schedule, binned.n_bins, binned.values.shape[1], binned.bin_ms)
    return replace(binned, values=apply_mask(binned.values, mask))


def schedules_from_config(setups: Sequence[dict]) -> list[MuxSchedule]:
    out = []
    for i, s in enumerate(setups):
        s = dict(s)
        s.setdefault("label", f"setup{i + 1}")
        out.append(MuxSchedule(**s))
    return out


def mux_study(musts: SpikeTrainSet, reference: KinematicsTrajectory, setups: Sequence[MuxSchedule],
              runs: int, seed: int, cfg: DecodeConfig | None = None,
              baselines: Sequence[int] = (32, 96)) -> SweepReport:
    """Multiplexed setups plus no-switching baselines (reduced sets and the full set).

    Every run of every setup draws its own schedule seed; the train and test
    trials are multiplexed together since acquisition runs continuously.
    """
    cfg = cfg or DecodeConfig()
    binned, ref = prepare(musts, reference, cfg)
    smoothed_full = smooth(binned, cfg.cutoff_hz)
    n = len(musts)
    for sched in setups:
        if sched.scheduled > n:
            log.warning("%s schedules %d channels but only %d exist; all are scheduled",
                        sched.label or "setup", sched.scheduled, n)

    def one(task: tuple[int, int]) -> tuple[float, float]:
        k, run = task
        sched = setups[k]
        seeded = replace(sched, seed=int(child_rng(seed, k, run).integers(2 ** 63)))
        muxed = time_multiplex(binned, seeded)
        return _robust_scores(smooth(muxed, cfg.cutoff_hz), ref, cfg)

    tasks = [(k, run) for k in range(len(setups)) for run in range(runs)]
    results = _run_tasks(one, tasks)
    entries = []
    for k, sched in enumerate(setups):
        chunk = results[k * runs:(k + 1) * runs]
        entries.append(SweepEntry(sched.label or f"setup{k + 1}", [r[0] for r in chunk], [r[1] for r in chunk]))

    sizes = [b for b in baselines if b <= n]
    for b in baselines:
        if b > n:
            log.warning("skipping reduced-%d baseline: only %d channels", b, n)

    def reduced(task: tuple[int, int]) -> tuple[float, float]:
        size, run = task
        cols = np.sort(child_rng(seed, len(setups), size, run).choice(n, size, replace=False))
        return _robust_scores(smoothed_full.columns(cols), ref, cfg)

    base = _run_tasks(reduced, [(size, run) for size in sizes for run in range(runs)])
    for k, size in enumerate(sizes):
        chunk = base[k * runs:(k + 1) * runs]
        entries.append(SweepEntry(f"reduced{size}", [r[0] for r in chunk], [r[1] for r in chunk]))
    tr, te = _robust_scores(smoothed_full, ref, cfg)
    entries.append(SweepEntry("full", [tr], [te]))
    return SweepReport(entries, seed, runs)


# -- adaptive vs. fixed thresholding -----------------------------------------

@dataclass
class DetectorOutcome:
    detector: str
    musts: SpikeTrainSet
    sils: list[float]
    spike_count: int
    recall: float | None
    matched: int | None
    r2_train: float | None
    r2_test: float | None
    error: str | None = None


@dataclass
class ThresholdingReport:
    adaptive: DetectorOutcome
    kmeans: DetectorOutcome
    improvement_train_pct: float | None = None
    improvement_test_pct: float | None = None
    outcomes: list[DetectorOutcome] = field(default_factory=list)

    def __post_init__(self):
        self.outcomes = [self.adaptive, self.kmeans]


def _pct(new: float | None, old: float | None) -> float | None:
    if new is None or old is None or old == 0:
        return None
    return 100.0 * (new - old) / abs(old)


def detection_recall(musts: SpikeTrainSet, truth: SpikeTrainSet, tol_ms: float = 1.0) -> float:
    """Mean over true neurons of the best recall any decomposed train achieves (0 if none)."""
    if len(truth) == 0:
        raise InvalidArgumentError("no ground-truth trains")
    if len(musts) == 0:
        return 0.0
    table = match_sources(musts, truth, tol_ms)
    return float(np.mean([max(m.recall for m in row) for row in table]))


def thresholding_comparison(emg: EmgRecording, reference: KinematicsTrajectory, cfg: RunConfig,
                            truth: SpikeTrainSet | None = None) -> ThresholdingReport:
    """Decompose with each detector and decode both MUST sets.

    ICA is run once: both detectors see identical IPTs, so only spike
    classification and qualification differ.
    """
    base = cfg.bss
    ext = bss.extend(emg, base.extension)
    model = bss.fit_whitening(ext, base.whitening_floor)
    y = bss.whiten(model, ext)
    del ext
    ipts = bss.fixed_point_ica(y, min(base.max_sources, y.shape[0]), base.tol, base.max_iter, cfg.seed, base.contrast)
    del y
    outcomes = {}
    for detector in ("adaptive", "kmeans"):
        qualified, _ = bss.qualify(ipts, emg.sample_rate, replace(base, detector=detector), cfg.seed)
        musts = SpikeTrainSet([q.spike_indices for q in qualified], emg.sample_rate,
                              [f"mu{q.origin}" for q in qualified], emg.n_samples)
        recall = matched = None
        if truth is not None:
            recall = detection_recall(musts, truth, cfg.eval.match_tolerance_ms)
            matched = len(matched_neurons(musts, truth, cfg.eval.match_tolerance_ms, cfg.eval.min_rate_of_agreement))
        r2_train = r2_test = None
        error = None
        if len(musts):
            try:
                res = run_decode(musts, reference, cfg.decode)
                r2_train, r2_test = res.r2_train, res.r2_test
            except (UnassignedDofError, InvalidArgumentError) as exc:
                error = str(exc)
        else:
            error = "no qualified sources"
        outcomes[detector] = DetectorOutcome(
            detector, musts, [q.sil for q in qualified], sum(len(t) for t in musts.trains),
            recall, matched, r2_train, r2_test, error,
        )
    a, k = outcomes["adaptive"], outcomes["kmeans"]
    return ThresholdingReport(a, k, _pct(a.r2_train, k.r2_train), _pct(a.r2_test, k.r2_test))
