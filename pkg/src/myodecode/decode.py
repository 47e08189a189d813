"""From spike trains to joint angles: binning, smoothing, PCA, VARIMAX, DoF calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .config import DecodeConfig
from .errors import InvalidArgumentError, RankDeficientError, UnassignedDofError
from .signals import first_order_lowpass, smoothing_coefficient
from .sim import KinematicsTrajectory, SpikeTrainSet


@dataclass
class BinnedActivity:
    """Bins x channels matrix of spike counts (or their smoothed version)."""

    values: np.ndarray
    bin_ms: float
    column_labels: list[str]
    smoothed: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidArgumentError("binned activity must be 2-D (bins x channels)")
        if len(self.column_labels) != self.values.shape[1]:
            raise InvalidArgumentError("one label per column required")

    @property
    def bin_rate(self) -> float:
        return 1000.0 / self.bin_ms

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    def rows(self, start: int, stop: int) -> BinnedActivity:
        return replace(self, values=self.values[start:stop])

    def columns(self, indices: Sequence[int]) -> BinnedActivity:
        idx = list(indices)
        return replace(self, values=self.values[:, idx], column_labels=[self.column_labels[i] for i in idx])


@dataclass
class ProjectionModel:
    """PCA loadings plus the rotation and per-DoF calibration that turn scores into angles.

    Estimated angle for DoF ``k`` is ``sign*gain*score + offset`` where ``score`` is
    the assigned column of ``(X - column_means) @ rotated_loadings``.
    """

    loadings: np.ndarray
    singular_values: np.ndarray
    column_means: np.ndarray
    column_labels: list[str]
    n_train: int
    rotation: np.ndarray | None = None
    dof_labels: list[str] = field(default_factory=list)
    assignment: list[tuple[int, int]] = field(default_factory=list)
    gains: list[float] = field(default_factory=list)
    offsets: list[float] = field(default_factory=list)
    bin_ms: float = 50.0
    cutoff_hz: float = 1.0

    def __post_init__(self):
        if self.rotation is None:
            self.rotation = np.eye(self.loadings.shape[1])

    @property
    def components(self) -> int:
        return self.loadings.shape[1]

    @property
    def rotated_loadings(self) -> np.ndarray:
        return self.loadings @ self.rotation

    @property
    def smoothing(self) -> float:
        return smoothing_coefficient(self.cutoff_hz, 1000.0 / self.bin_ms)

    def scores(self, binned: BinnedActivity | np.ndarray, rotated: bool = True) -> np.ndarray:
        x = binned.values if isinstance(binned, BinnedActivity) else np.asarray(binned, float)
        if x.ndim != 2 or x.shape[1] != self.loadings.shape[0]:
            raise InvalidArgumentError(
                f"expected {self.loadings.shape[0]} columns, got {x.shape[-1]}"
            )
        w = self.rotated_loadings if rotated else self.loadings
        return (x - self.column_means) @ w


def bin_spikes(musts: SpikeTrainSet, bin_ms: float, duration_s: float | None = None) -> BinnedActivity:
    """Count spikes per ``bin_ms`` bin; a trailing partial bin is dropped."""
    if bin_ms <= 0:
        raise InvalidArgumentError("bin_ms must be positive")
    if len(musts) == 0:
        raise InvalidArgumentError("no spike trains to bin")
    if duration_s is None:
        duration_s = musts.duration_s
    n_bins = int(math.floor(duration_s * 1000.0 / bin_ms + 1e-9))
    if n_bins < 1:
        raise InvalidArgumentError("duration shorter than one bin")
    samples_per_bin = musts.sample_rate * bin_ms / 1000.0
    counts = np.zeros((n_bins, len(musts)))
    for c, train in enumerate(musts.trains):
        bins = np.floor(train / samples_per_bin).astype(np.int64)
        bins = bins[(bins >= 0) & (bins < n_bins)]
        counts[:, c] = np.bincount(bins, minlength=n_bins)
    return BinnedActivity(counts, float(bin_ms), list(musts.source_labels))


def smooth(binned: BinnedActivity, cutoff_hz: float = 1.0) -> BinnedActivity:
    """Per-channel one-pole low-pass at the bin rate, zero initial state."""
    values = first_order_lowpass(binned.values, cutoff_hz, binned.bin_rate, axis=0)
    return replace(binned, values=values, smoothed=True)


def numerical_rank(x: np.ndarray) -> int:
    s = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > s[0] * max(x.shape) * np.finfo(float).eps))


def fit_pca(binned: BinnedActivity, d: int) -> ProjectionModel:
    """Top-``d`` right singular vectors of the column-centred data.

    Each loading column is signed so its largest-magnitude entry is positive.
    """
    x = binned.values
    t, n = x.shape
    if t < 2:
        raise InvalidArgumentError("need at least two bins")
    if d < 1:
        raise InvalidArgumentError("d must be >= 1")
    means = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - means, full_matrices=False)
    tol = s[0] * max(t, n) * np.finfo(float).eps if s.size else 0.0
    if d > min(t, n) or not s[d - 1] > tol:
        raise RankDeficientError(f"requested {d} components but the data rank is {int(np.sum(s > tol))}")
    w = vt[:d].T.copy()
    pivots = np.argmax(np.abs(w), axis=0)
    w *= np.sign(w[pivots, np.arange(d)])
    return ProjectionModel(w, s[:d].copy(), means, list(binned.column_labels), t,
                           bin_ms=binned.bin_ms)


def varimax_criterion(loadings: np.ndarray) -> float:
    """Variance of squared loadings; larger means sparser columns."""
    l2 = np.asarray(loadings) ** 2
    d = l2.shape[1]
    return float(np.sum(l2 ** 2) / d - np.sum((l2.sum(axis=1) / d) ** 2))


def varimax_sweeps(loadings: np.ndarray, tol: float = 1e-10, max_iter: int = 1000
                   ) -> Iterator[tuple[np.ndarray, float]]:
    """Yield ``(rotation, criterion)`` after every sweep of pairwise planar rotations.

    Each planar step uses the closed-form optimal angle, so the criterion never
    decreases. Stops when a sweep gains less than ``tol`` or after ``max_iter`` sweeps.
    """
    w = np.array(loadings, dtype=float)
    n, d = w.shape
    rot = np.eye(d)
    current = varimax_criterion(w)
    if d < 2:
        yield rot, current
        return
    for _ in range(max_iter):
        for p in range(d - 1):
            for q in range(p + 1, d):
                x, y = w[:, p], w[:, q]
                u, v = x * x - y * y, 2.0 * x * y
                a, b = u.sum(), v.sum()
                num = 2.0 * np.dot(u, v) - 2.0 * a * b / n
                den = np.dot(u, u) - np.dot(v, v) - (a * a - b * b) / n
                phi = 0.25 * math.atan2(num, den)
                if phi == 0.0:
                    continue
                c, s = math.cos(phi), math.sin(phi)
                plane = np.array([[c, -s], [s, c]])
                w[:, [p, q]] = w[:, [p, q]] @ plane
                rot[:, [p, q]] = rot[:, [p, q]] @ plane
        updated = varimax_criterion(w)
        gain = updated - current
        current = updated
        yield rot.copy(), current
        if gain < tol:
            return


def varimax(loadings: np.ndarray, tol: float = 1e-10, max_iter: int = 1000) -> np.ndarray:
    """Orthogonal rotation maximising the VARIMAX criterion of ``loadings @ R``."""
    rot = np.eye(np.shape(loadings)[1])
    for rot, _ in varimax_sweeps(loadings, tol, max_iter):
        pass
    return rot


def rotate_model(model: ProjectionModel, rotation: np.ndarray) -> ProjectionModel:
    rotation = np.asarray(rotation, dtype=float)
    d = model.components
    if rotation.shape != (d, d):
        raise InvalidArgumentError(f"rotation must be {d}x{d}")
    if np.linalg.norm(rotation.T @ rotation - np.eye(d)) > 1e-6:
        raise InvalidArgumentError("rotation is not orthogonal")
    return replace(model, rotation=rotation.copy(), assignment=[], gains=[], offsets=[])


def _pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Correlation of every row of ``a`` with every column of ``b``."""
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=0, keepdims=True)
    na = np.linalg.norm(a, axis=1)[:, None]
    nb = np.linalg.norm(b, axis=0)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (a @ b) / (na * nb)
    return np.nan_to_num(r)


def assign_dofs(model: ProjectionModel, training_scores: np.ndarray, reference: KinematicsTrajectory,
                gain_rows: slice | None = None, min_correlation: float = 0.2) -> ProjectionModel:
    """Pick one rotated component and direction per DoF, then calibrate its gain.

    Components are matched greedily by descending |Pearson r| with the reference,
    without replacement. Gain and offset map the range of the signed score onto the
    range of the reference over ``gain_rows`` (the first trial), so the peak and the
    resting level of the estimate both land on the reference.
    """
    scores = np.asarray(training_scores, dtype=float)
    ref = reference.angles
    n_dof, d = ref.shape[0], scores.shape[1]
    if n_dof > d:
        raise InvalidArgumentError(f"{n_dof} DoFs but only {d} components")
    if ref.shape[1] != scores.shape[0]:
        raise InvalidArgumentError("reference and scores differ in length")
    corr = _pearson(ref, scores)
    free_dof, free_comp = set(range(n_dof)), set(range(d))
    picks: dict[int, tuple[int, int]] = {}
    while free_dof:
        best = max(((abs(corr[k, c]), k, c) for k in free_dof for c in free_comp))
        mag, k, c = best
        if mag < min_correlation:
            raise UnassignedDofError(
                f"DoF {reference.dof_labels[k]!r}: best |r| = {mag:.3f} < {min_correlation}"
            )
        picks[k] = (c, 1 if corr[k, c] >= 0 else -1)
        free_dof.remove(k)
        free_comp.remove(c)

    rows = gain_rows if gain_rows is not None else slice(None)
    assignment, gains, offsets = [], [], []
    for k in range(n_dof):
        c, sign = picks[k]
        est = sign * scores[rows, c]
        target = ref[k, rows]
        span = est.max() - est.min()
        if not span > 0:
            raise UnassignedDofError(f"DoF {reference.dof_labels[k]!r}: flat score in gain trial")
        gain = (target.max() - target.min()) / span
        assignment.append((c, sign))
        gains.append(float(gain))
        offsets.append(float(target.min() - gain * est.min()))
    return replace(model, dof_labels=list(reference.dof_labels), assignment=assignment,
                   gains=gains, offsets=offsets)


def project(model: ProjectionModel, binned: BinnedActivity) -> KinematicsTrajectory:
    if not model.assignment:
        raise InvalidArgumentError("model has no DoF assignment")
    if list(binned.column_labels) != list(model.column_labels):
        raise InvalidArgumentError("test columns do not match the training columns")
    scores = model.scores(binned)
    angles = np.vstack([
        sign * gain * scores[:, c] + offset
        for (c, sign), gain, offset in zip(model.assignment, model.gains, model.offsets)
    ])
    return KinematicsTrajectory(angles, list(model.dof_labels), binned.bin_rate)


def align_reference(reference: KinematicsTrajectory, bin_ms: float, n_bins: int) -> KinematicsTrajectory:
    """Sample the reference at bin start times, interpolating if the rates differ."""
    rate = 1000.0 / bin_ms
    if reference.sample_rate == rate and reference.n_samples >= n_bins:
        return reference.segment(0, n_bins)
    t_ref = np.arange(reference.n_samples) / reference.sample_rate
    t_bin = np.arange(n_bins) / rate
    if t_bin[-1] > t_ref[-1] + 1e-9:
        raise InvalidArgumentError("reference is shorter than the binned activity")
    angles = np.vstack([np.interp(t_bin, t_ref, row) for row in reference.angles])
    return KinematicsTrajectory(angles, list(reference.dof_labels), rate)


def trial_rows(n_bins: int, trials: int, indices: Sequence[int]) -> np.ndarray:
    """Row indices of the given trials when ``n_bins`` splits into equal trials."""
    if trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    size = n_bins // trials
    return np.concatenate([np.arange(i * size, (i + 1) * size) for i in indices])


def fit_decoder(smoothed: BinnedActivity, reference: KinematicsTrajectory, cfg: DecodeConfig) -> ProjectionModel:
    """Fit PCA, VARIMAX and the DoF calibration on the training trials.

    ``smoothed`` and ``reference`` cover the whole session at the bin rate. The
    number of components is capped at the rank of the training data.
    """
    rows = trial_rows(smoothed.n_bins, cfg.trials, cfg.train_trials)
    train = replace(smoothed, values=smoothed.values[rows])
    d = min(cfg.components, numerical_rank(train.values))
    d = max(d, len(reference.dof_labels))
    model = fit_pca(train, d)
    model.cutoff_hz = cfg.cutoff_hz
    model = rotate_model(model, varimax(model.loadings, cfg.varimax_tol, cfg.varimax_max_iter))
    train_ref = KinematicsTrajectory(reference.angles[:, rows], list(reference.dof_labels), reference.sample_rate)
    size = smoothed.n_bins // cfg.trials
    pos = list(cfg.train_trials).index(cfg.gain_trial)
    gain_rows = slice(pos * size, (pos + 1) * size)
    return assign_dofs(model, model.scores(train), train_ref, gain_rows, cfg.min_correlation)
