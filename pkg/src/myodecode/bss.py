"""Blind source separation of multichannel EMG into motor unit spike trains.

Pipeline: delay-extend the channels, whiten, extract sources one at a time with
a fixed-point ICA and Gram-Schmidt deflation, then turn each innervation pulse
train (IPT) into discharge times and keep it only if its silhouette is high.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.signal import find_peaks

from .config import BssConfig
from .errors import DegenerateInputError, InvalidArgumentError, UndefinedSilError
from .sim import EmgRecording, SpikeTrainSet

log = logging.getLogger(__name__)


@dataclass
class ExtendedObservations:
    """Delay-extended EMG; row ``i*R + delta`` is channel ``i`` delayed by ``delta``."""

    matrix: np.ndarray
    extension: int
    channel_origin: list[tuple[int, int]]

    @property
    def n_samples(self) -> int:
        return self.matrix.shape[1]


@dataclass
class WhiteningModel:
    matrix: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    floor: float
    mean: np.ndarray


@dataclass
class IptSet:
    """Converged ICA outputs. ``origins`` maps each row to its extraction attempt."""

    sources: np.ndarray
    separation_vectors: np.ndarray
    origins: list[int] = field(default_factory=list)
    attempts: int = 0

    def __len__(self) -> int:
        return self.sources.shape[0]


@dataclass
class QualifiedSource:
    spike_indices: np.ndarray
    sil: float
    origin: int


@dataclass
class SourceDiagnostic:
    """One row per ICA attempt, qualified or not."""

    attempt: int
    converged: bool
    sil: float
    spike_count: int
    qualified: bool


@dataclass
class Decomposition:
    spikes: SpikeTrainSet
    sources: list[QualifiedSource]
    diagnostics: list[SourceDiagnostic]
    ipts: IptSet


def extend(emg: EmgRecording, R: int) -> ExtendedObservations:
    """Stack delays ``0..R-1`` of every channel, zero-padded at the start."""
    if R < 1:
        raise InvalidArgumentError(f"extension factor must be >= 1, got {R}")
    x = emg.samples
    m, n = x.shape
    out = np.zeros((m * R, n))
    origin = []
    for i in range(m):
        for delta in range(R):
            out[i * R + delta, delta:] = x[i, : n - delta]
            origin.append((i, delta))
    return ExtendedObservations(out, R, origin)


def fit_whitening(extended: ExtendedObservations | np.ndarray, floor: float = 1e-8) -> WhiteningModel:
    """Symmetric (ZCA) whitening ``U D^-1/2 U^T`` of the mean-removed observations.

    Eigenvalues below ``floor * max_eigenvalue`` are raised to that floor first.
    """
    x = extended.matrix if isinstance(extended, ExtendedObservations) else np.asarray(extended, float)
    rows, n = x.shape
    if n <= rows:
        raise InvalidArgumentError(f"need more samples ({n}) than extended channels ({rows})")
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    cov = (xc @ xc.T) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    top = eigvals[-1]
    if not top > 0:
        raise DegenerateInputError("observations have zero variance")
    clamped = np.maximum(eigvals, floor * top)
    matrix = (eigvecs * clamped ** -0.5) @ eigvecs.T
    return WhiteningModel(matrix, eigvecs, eigvals, floor, mean)


def whiten(model: WhiteningModel, extended: ExtendedObservations | np.ndarray) -> np.ndarray:
    x = extended.matrix if isinstance(extended, ExtendedObservations) else np.asarray(extended, float)
    if x.shape[0] != model.matrix.shape[1]:
        raise InvalidArgumentError(
            f"model expects {model.matrix.shape[1]} rows, got {x.shape[0]}"
        )
    return model.matrix @ (x - model.mean[:, None])


def _contrast(name: str):
    if name == "skew":
        return lambda u: u * u, lambda u: 2.0 * u
    if name == "logcosh":
        return np.tanh, lambda u: 1.0 - np.tanh(u) ** 2
    raise InvalidArgumentError(f"unknown contrast {name!r}")


def fixed_point_ica(whitened: np.ndarray, max_sources: int, tol: float = 1e-4, max_iter: int = 200,
                    seed: int = 0, contrast: str = "skew") -> IptSet:
    """Deflationary fixed-point ICA.

    Each attempt starts from a seeded random unit vector and iterates
    ``w <- E[y g(w'y)] - E[g'(w'y)] w``, Gram-Schmidt against the vectors found so
    far, until ``|<w_new, w_old>| > 1 - tol``. Attempts that do not converge in
    ``max_iter`` steps are dropped.
    """
    y = np.asarray(whitened, dtype=float)
    dim, n = y.shape
    if max_sources < 1:
        raise InvalidArgumentError("max_sources must be >= 1")
    if max_sources > dim:
        raise InvalidArgumentError(f"max_sources {max_sources} exceeds whitened dimension {dim}")
    g, g_prime = _contrast(contrast)
    rng = np.random.default_rng(seed)
    basis = np.zeros((0, dim))
    origins = []
    for attempt in range(max_sources):
        w = rng.standard_normal(dim)
        w -= basis.T @ (basis @ w)
        w /= np.linalg.norm(w)
        converged = False
        for _ in range(max_iter):
            u = w @ y
            w_new = (y @ g(u)) / n - g_prime(u).mean() * w
            w_new -= basis.T @ (basis @ w_new)
            norm = np.linalg.norm(w_new)
            if norm == 0:
                break
            w_new /= norm
            if abs(w_new @ w) > 1.0 - tol:
                w = w_new
                converged = True
                break
            w = w_new
        if not converged:
            log.debug("ICA attempt %d did not converge", attempt)
            continue
        # one more projection keeps the basis orthonormal to round-off
        w -= basis.T @ (basis @ w)
        w /= np.linalg.norm(w)
        basis = np.vstack([basis, w])
        origins.append(attempt)
    return IptSet(basis @ y, basis, origins, max_sources)


def peak_candidates(ipt_row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices and heights of the local maxima of the squared IPT."""
    power = np.asarray(ipt_row, dtype=float) ** 2
    idx, _ = find_peaks(power)
    return idx, power[idx]


def _refractory_samples(refractory_ms: float, sample_rate: float) -> int:
    if refractory_ms <= 0:
        raise InvalidArgumentError("refractory_ms must be positive")
    return int(math.ceil(refractory_ms * 1e-3 * sample_rate - 1e-9))


def _enforce_refractory(idx: np.ndarray, amp: np.ndarray, refractory: int) -> np.ndarray:
    """Scan in time order; of two spikes closer than ``refractory`` keep the larger."""
    kept_idx: list[int] = []
    kept_amp: list[float] = []
    for i, a in zip(idx.tolist(), amp.tolist()):
        if kept_idx and i - kept_idx[-1] < refractory:
            if a > kept_amp[-1]:
                kept_idx[-1], kept_amp[-1] = i, a
            continue
        kept_idx.append(i)
        kept_amp.append(a)
    return np.array(kept_idx, dtype=np.int64)


def _two_means(values: np.ndarray, max_iter: int = 100) -> tuple[float, float]:
    """Deterministic 1-D 2-means started at the extremes; returns (low, high) centroids."""
    low, high = float(values.min()), float(values.max())
    for _ in range(max_iter):
        split = 0.5 * (low + high)
        lo_vals, hi_vals = values[values <= split], values[values > split]
        if lo_vals.size == 0 or hi_vals.size == 0:
            break
        new = float(lo_vals.mean()), float(hi_vals.mean())
        if new == (low, high):
            break
        low, high = new
    return low, high


def detect_spikes_adaptive(ipt_row: np.ndarray, sample_rate: float, refractory_ms: float = 10.0,
                           window_s: float = 1.0, rel_threshold: float = 0.5) -> np.ndarray:
    """Locally adaptive peak detection on the squared IPT.

    A local maximum is accepted when it exceeds ``rel_threshold`` times the mean
    height of the peaks accepted during the trailing ``window_s``. When that window
    holds no accepted peak, the reference is the upper centroid of a 2-means split of
    all peak heights. Peaks closer than the refractory period keep only the larger.
    """
    if not 0.0 < rel_threshold < 1.0:
        raise InvalidArgumentError("rel_threshold must lie in (0, 1)")
    if window_s <= 0:
        raise InvalidArgumentError("window_s must be positive")
    refractory = _refractory_samples(refractory_ms, sample_rate)
    idx, amp = peak_candidates(ipt_row)
    if idx.size == 0 or not np.any(amp > 0):
        return np.zeros(0, dtype=np.int64)
    fallback = _two_means(amp)[1]
    window = int(round(window_s * sample_rate))

    recent: deque[tuple[int, float]] = deque()
    total = 0.0
    kept_idx: list[int] = []
    kept_amp: list[float] = []
    for i, a in zip(idx.tolist(), amp.tolist()):
        while recent and recent[0][0] <= i - window:
            total -= recent.popleft()[1]
        reference = total / len(recent) if recent else fallback
        if a <= rel_threshold * reference:
            continue
        if kept_idx and i - kept_idx[-1] < refractory:
            if a <= kept_amp[-1]:
                continue
            # replace the previous, smaller spike
            old = recent.pop()
            total -= old[1]
            kept_idx[-1], kept_amp[-1] = i, a
        else:
            kept_idx.append(i)
            kept_amp.append(a)
        recent.append((i, a))
        total += a
    return np.array(kept_idx, dtype=np.int64)


def detect_spikes_kmeans(ipt_row: np.ndarray, sample_rate: float, refractory_ms: float = 10.0,
                         seed: int = 0) -> np.ndarray:
    """Fixed-threshold baseline: 2-means on squared peak heights, upper class are spikes."""
    refractory = _refractory_samples(refractory_ms, sample_rate)
    idx, amp = peak_candidates(ipt_row)
    if np.unique(amp).size < 2:
        return np.zeros(0, dtype=np.int64)
    centroids, labels = kmeans2(amp.reshape(-1, 1), 2, minit="++", seed=seed)
    spike_class = int(np.argmax(centroids[:, 0]))
    chosen = labels == spike_class
    return _enforce_refractory(idx[chosen], amp[chosen], refractory)


def silhouette(ipt_row: np.ndarray, spikes: np.ndarray) -> float:
    """Separation of spike and non-spike squared peak heights, in [-1, 1].

    ``(between - within) / max(between, within)`` where both terms are sums of
    point-to-centroid distances over all peaks.
    """
    power = np.asarray(ipt_row, dtype=float) ** 2
    spikes = np.asarray(spikes, dtype=np.int64)
    peaks, _ = find_peaks(power)
    others = np.setdiff1d(peaks, spikes, assume_unique=False)
    if spikes.size == 0 or others.size == 0:
        raise UndefinedSilError("silhouette needs at least one spike and one non-spike peak")
    hi, lo = power[spikes], power[others]
    c_hi, c_lo = hi.mean(), lo.mean()
    within = np.abs(hi - c_hi).sum() + np.abs(lo - c_lo).sum()
    between = np.abs(hi - c_lo).sum() + np.abs(lo - c_hi).sum()
    scale = max(within, between)
    if scale == 0:
        return 0.0
    return float((between - within) / scale)


def detect(ipt_row: np.ndarray, sample_rate: float, cfg: BssConfig, seed: int = 0) -> np.ndarray:
    if cfg.detector == "adaptive":
        return detect_spikes_adaptive(ipt_row, sample_rate, cfg.refractory_ms, cfg.window_s, cfg.rel_threshold)
    if cfg.detector == "kmeans":
        return detect_spikes_kmeans(ipt_row, sample_rate, cfg.refractory_ms, seed)
    raise InvalidArgumentError(f"unknown detector {cfg.detector!r}")


def qualify(ipts: IptSet, sample_rate: float, cfg: BssConfig, seed: int = 0
            ) -> tuple[list[QualifiedSource], list[SourceDiagnostic]]:
    """Detect spikes on every IPT and keep the sources whose SIL beats the threshold."""
    by_attempt = {a: k for k, a in enumerate(ipts.origins)}
    qualified, diagnostics = [], []
    for attempt in range(ipts.attempts):
        k = by_attempt.get(attempt)
        if k is None:
            diagnostics.append(SourceDiagnostic(attempt, False, float("nan"), 0, False))
            continue
        row = ipts.sources[k]
        spikes = detect(row, sample_rate, cfg, seed + attempt)
        try:
            sil = silhouette(row, spikes)
        except UndefinedSilError:
            sil = float("nan")
        ok = bool(sil > cfg.sil_threshold)
        diagnostics.append(SourceDiagnostic(attempt, True, sil, int(spikes.size), ok))
        if ok:
            qualified.append(QualifiedSource(spikes, sil, attempt))
    return qualified, diagnostics


def decompose(emg: EmgRecording, cfg: BssConfig | None = None, seed: int = 0) -> Decomposition:
    """Extend, whiten, separate, detect and qualify; delayed replicas are kept."""
    cfg = cfg or BssConfig()
    ext = extend(emg, cfg.extension)
    model = fit_whitening(ext, cfg.whitening_floor)
    y = whiten(model, ext)
    del ext
    max_sources = min(cfg.max_sources, y.shape[0])
    ipts = fixed_point_ica(y, max_sources, cfg.tol, cfg.max_iter, seed, cfg.contrast)
    del y
    qualified, diagnostics = qualify(ipts, emg.sample_rate, cfg, seed)
    if not qualified:
        log.warning("no source qualified (SIL > %.2f) out of %d attempts", cfg.sil_threshold, ipts.attempts)
    trains = SpikeTrainSet(
        [q.spike_indices for q in qualified],
        emg.sample_rate,
        [f"mu{q.origin}" for q in qualified],
        emg.n_samples,
    )
    return Decomposition(trains, qualified, diagnostics, ipts)
