"""Synthetic ground truth: motor neuron pools, spike trains, MUAPs, EMG and kinematics.

EMG follows the convolutive mixture ``x(k) = sum_l H(l) s(k-l) + n(k)`` so that
every downstream stage can be scored against the sources that produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import SimConfig
from .errors import InvalidArgumentError
from .signals import first_order_lowpass


@dataclass(frozen=True)
class Neuron:
    recruitment_threshold: float
    min_rate: float
    peak_rate: float


@dataclass(frozen=True)
class MotorNeuronPool:
    """Neurons ordered by recruitment threshold (size principle)."""

    neurons: tuple[Neuron, ...]

    def __post_init__(self):
        thresholds = [n.recruitment_threshold for n in self.neurons]
        if any(not 0.0 <= t < 1.0 for t in thresholds):
            raise InvalidArgumentError("recruitment thresholds must lie in [0, 1)")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise InvalidArgumentError("recruitment thresholds must be strictly increasing")
        for n in self.neurons:
            if not 0.0 < n.min_rate < n.peak_rate:
                raise InvalidArgumentError("need 0 < min_rate < peak_rate for every neuron")

    @property
    def pool_size(self) -> int:
        return len(self.neurons)


@dataclass
class MuapBank:
    """MUAP templates, shape ``(neurons, channels, L)``."""

    templates: np.ndarray
    amplitude_drift: np.ndarray | None = None

    def __post_init__(self):
        self.templates = np.asarray(self.templates, dtype=float)
        if self.templates.ndim != 3 or min(self.templates.shape[1:]) < 1:
            raise InvalidArgumentError("templates must have shape (neurons, channels>=1, L>=1)")
        if self.amplitude_drift is not None:
            self.amplitude_drift = np.broadcast_to(
                np.asarray(self.amplitude_drift, dtype=float), (self.neuron_count,)
            ).copy()

    @property
    def neuron_count(self) -> int:
        return self.templates.shape[0]

    @property
    def channel_count(self) -> int:
        return self.templates.shape[1]

    @property
    def length(self) -> int:
        return self.templates.shape[2]


@dataclass
class ExcitationTrajectory:
    """Drive to one pool, as a fraction of MVC sampled at ``sample_rate``."""

    values: np.ndarray
    sample_rate: float
    ramp_up_s: float | None = None
    ramp_down_s: float | None = None
    peak: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise InvalidArgumentError("excitation must be one-dimensional")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise InvalidArgumentError("excitation values must lie in [0, 1]")

    @property
    def duration_s(self) -> float:
        return len(self.values) / self.sample_rate


@dataclass
class EmgRecording:
    """Channels x samples EMG matrix."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise InvalidArgumentError("EMG needs at least one channel and one sample")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgumentError("EMG contains non-finite values")

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class SpikeTrainSet:
    """Discharge sample indices per source.

    ``n_samples`` is the length of the recording the trains live in, when known.
    """

    trains: list[np.ndarray]
    sample_rate: float
    source_labels: list[str] = field(default_factory=list)
    n_samples: int | None = None

    def __post_init__(self):
        self.trains = [np.asarray(t, dtype=np.int64).reshape(-1) for t in self.trains]
        for t in self.trains:
            if t.size > 1 and np.any(np.diff(t) <= 0):
                raise InvalidArgumentError("spike indices must be strictly increasing")
        if not self.source_labels:
            self.source_labels = [f"s{i}" for i in range(len(self.trains))]
        if len(self.source_labels) != len(self.trains):
            raise InvalidArgumentError("one label per train required")

    def __len__(self) -> int:
        return len(self.trains)

    @property
    def duration_s(self) -> float:
        if self.n_samples is not None:
            return self.n_samples / self.sample_rate
        last = max((int(t[-1]) for t in self.trains if t.size), default=0)
        return (last + 1) / self.sample_rate

    def subset(self, indices: Sequence[int]) -> SpikeTrainSet:
        return SpikeTrainSet(
            [self.trains[i] for i in indices],
            self.sample_rate,
            [self.source_labels[i] for i in indices],
            self.n_samples,
        )

    @staticmethod
    def concat(parts: Sequence[SpikeTrainSet]) -> SpikeTrainSet:
        if not parts:
            raise InvalidArgumentError("nothing to concatenate")
        rates = {p.sample_rate for p in parts}
        if len(rates) != 1:
            raise InvalidArgumentError("sample rates differ")
        lengths = {p.n_samples for p in parts}
        return SpikeTrainSet(
            [t for p in parts for t in p.trains],
            parts[0].sample_rate,
            [lab for p in parts for lab in p.source_labels],
            lengths.pop() if len(lengths) == 1 else None,
        )


@dataclass
class KinematicsTrajectory:
    """Joint angles in degrees, shape ``(dofs, samples)``."""

    angles: np.ndarray
    dof_labels: list[str]
    sample_rate: float

    def __post_init__(self):
        self.angles = np.atleast_2d(np.asarray(self.angles, dtype=float))
        if self.angles.shape[0] < 1:
            raise InvalidArgumentError("need at least one DoF")
        if len(self.dof_labels) != self.angles.shape[0]:
            raise InvalidArgumentError("one label per DoF required")
        if not np.all(np.isfinite(self.angles)):
            raise InvalidArgumentError("angles contain non-finite values")

    @property
    def n_samples(self) -> int:
        return self.angles.shape[1]

    def segment(self, start: int, stop: int) -> KinematicsTrajectory:
        return KinematicsTrajectory(self.angles[:, start:stop], list(self.dof_labels), self.sample_rate)


def generate_cue(ramp_up_s: float, ramp_down_s: float, peak: float, sample_rate: float,
                 rest_s: float = 0.0) -> ExcitationTrajectory:
    """Triangular ramp cue flanked by ``rest_s`` of zeros on both sides."""
    if ramp_up_s <= 0 or ramp_down_s <= 0 or sample_rate <= 0 or rest_s < 0:
        raise InvalidArgumentError("durations and sample_rate must be positive")
    if not 0.0 <= peak <= 1.0:
        raise InvalidArgumentError(f"peak must lie in [0, 1], got {peak}")
    rest = int(round(rest_s * sample_rate))
    up = int(round(ramp_up_s * sample_rate))
    down = int(round(ramp_down_s * sample_rate))
    n = np.arange(2 * rest + up + down)
    rising = peak * (n - rest) / up
    falling = peak * (1.0 - (n - rest - up) / down)
    values = np.where(n <= rest + up, rising, falling)
    values = np.clip(values, 0.0, peak)
    return ExcitationTrajectory(values, float(sample_rate), ramp_up_s, ramp_down_s, peak)


def make_pool(size: int, max_threshold: float = 0.5, min_rate: float = 8.0,
              peak_rate_range: tuple[float, float] = (25.0, 35.0)) -> MotorNeuronPool:
    """Pool with exponentially spaced thresholds; early recruits reach higher peak rates."""
    if size < 1:
        raise InvalidArgumentError("pool size must be >= 1")
    if size == 1:
        thresholds = np.array([0.01])
    else:
        ramp = (np.exp(2.0 * np.arange(size) / (size - 1)) - 1.0) / (math.e ** 2 - 1.0)
        thresholds = 0.01 + (max_threshold - 0.01) * ramp
    low, high = peak_rate_range
    peaks = np.linspace(high, low, size)
    return MotorNeuronPool(tuple(Neuron(float(t), min_rate, float(p)) for t, p in zip(thresholds, peaks)))


def generate_spike_trains(pool: MotorNeuronPool, excitation: ExcitationTrajectory, emg_rate: float,
                          seed: int, isi_cv: float = 0.15, refractory_ms: float = 10.0,
                          label_prefix: str = "n") -> SpikeTrainSet:
    """Rate-coded renewal spike trains for every neuron of ``pool``.

    A neuron fires while the drive is at or above its recruitment threshold. Its
    mean rate rises linearly from ``min_rate`` at recruitment to ``peak_rate`` at
    full drive; each inter-spike interval is ``(1 + isi_cv * N(0, 1)) / rate``,
    never shorter than the refractory period. The first discharge lands exactly on
    the recruitment sample.
    """
    if pool.pool_size == 0:
        raise InvalidArgumentError("empty motor neuron pool")
    if emg_rate < 2 * excitation.sample_rate:
        raise InvalidArgumentError("emg_rate must be at least twice the excitation rate")
    rng = np.random.default_rng(seed)
    n_samples = int(round(excitation.duration_s * emg_rate))
    t_exc = np.arange(len(excitation.values)) / excitation.sample_rate
    drive = np.interp(np.arange(n_samples) / emg_rate, t_exc, excitation.values)
    refractory = int(math.ceil(refractory_ms * 1e-3 * emg_rate))

    trains = []
    for neuron in pool.neurons:
        thr = neuron.recruitment_threshold
        active = (drive >= thr) & (drive > 0)
        active_idx = np.flatnonzero(active)
        spikes: list[int] = []
        if active_idx.size:
            k = int(active_idx[0])
            t = k / emg_rate
            while True:
                spikes.append(k)
                level = (drive[k] - thr) / (1.0 - thr)
                rate = neuron.min_rate + (neuron.peak_rate - neuron.min_rate) * level
                isi = (1.0 + isi_cv * rng.standard_normal()) / rate
                t += isi
                nxt = max(int(round(t * emg_rate)), k + refractory)
                if nxt >= n_samples:
                    break
                if not active[nxt]:
                    pos = np.searchsorted(active_idx, nxt)
                    if pos >= active_idx.size:
                        break
                    nxt = int(active_idx[pos])
                if nxt != int(round(t * emg_rate)):
                    t = nxt / emg_rate
                k = nxt
        trains.append(np.array(spikes, dtype=np.int64))
    labels = [f"{label_prefix}{i}" for i in range(pool.pool_size)]
    return SpikeTrainSet(trains, float(emg_rate), labels, n_samples)


def make_muap_bank(n_neurons: int, n_channels: int, length: int, seed: int,
                   locations: np.ndarray | None = None,
                   amplitude_drift: float | np.ndarray | None = None) -> MuapBank:
    """Seeded biphasic (difference-of-Gaussians) MUAPs with spatial amplitude profiles.

    Channels sit on a near-square grid. Each neuron has a location on that grid
    (random unless ``locations`` is given, in grid units) and its amplitude decays
    with distance; waveform timing and widths vary per (neuron, channel).
    """
    if n_neurons < 1 or n_channels < 1 or length < 1:
        raise InvalidArgumentError("neurons, channels and length must all be >= 1")
    rng = np.random.default_rng(seed)
    cols = int(math.ceil(math.sqrt(n_channels)))
    grid = np.array([(c // cols, c % cols) for c in range(n_channels)], dtype=float)
    if locations is None:
        locations = rng.uniform(0, cols - 1, size=(n_neurons, 2))
    locations = np.asarray(locations, dtype=float)
    lag = np.arange(length, dtype=float)
    templates = np.empty((n_neurons, n_channels, length))
    for j in range(n_neurons):
        spread = rng.uniform(1.0, 2.5)
        dist2 = np.sum((grid - locations[j]) ** 2, axis=1)
        gain = 0.1 + np.exp(-dist2 / (2 * spread ** 2))
        gain *= rng.uniform(0.5, 1.5)
        centre = rng.uniform(0.25, 0.45, size=n_channels) * length
        width = rng.uniform(0.04, 0.09, size=n_channels) * length
        offset = rng.uniform(0.08, 0.18, size=n_channels) * length
        ratio = rng.uniform(0.5, 0.9, size=n_channels)
        first = np.exp(-((lag - centre[:, None]) ** 2) / (2 * width[:, None] ** 2))
        second = np.exp(-((lag - centre[:, None] - offset[:, None]) ** 2) / (2 * (1.6 * width[:, None]) ** 2))
        shape = first - ratio[:, None] * second
        shape /= np.max(np.abs(shape), axis=1, keepdims=True)
        templates[j] = gain[:, None] * shape
    return MuapBank(templates, amplitude_drift)


def synthesize_emg(spikes: SpikeTrainSet, muaps: MuapBank, noise_snr_db: float | None, seed: int,
                   noise_power: float | None = None, n_samples: int | None = None) -> EmgRecording:
    """Convolutive mixture of the spike trains through the MUAP bank plus white noise.

    Noise power is ``reference / 10**(snr/10)`` where the reference is
    ``noise_power`` if given, else the clean mixture power, else 1 when the mixture
    is silent. ``noise_snr_db=None`` disables noise.
    """
    if len(spikes) != muaps.neuron_count:
        raise InvalidArgumentError(
            f"{len(spikes)} spike trains but {muaps.neuron_count} MUAP sets"
        )
    if n_samples is None:
        n_samples = spikes.n_samples
    if n_samples is None:
        raise InvalidArgumentError("recording length unknown; pass n_samples")
    if n_samples < muaps.length:
        raise InvalidArgumentError("recording shorter than the MUAP length")
    fs = spikes.sample_rate
    clean = np.zeros((muaps.channel_count, n_samples))
    for j, train in enumerate(spikes.trains):
        train = train[(train >= 0) & (train < n_samples)]
        if train.size == 0:
            continue
        scale = np.ones(train.size)
        if muaps.amplitude_drift is not None:
            scale = 1.0 + muaps.amplitude_drift[j] * (train / fs)
        part = np.zeros_like(clean)
        for lag in range(muaps.length):
            pos = train + lag
            keep = pos < n_samples
            part[:, pos[keep]] += muaps.templates[j, :, lag : lag + 1] * scale[keep]
        clean += part
    if noise_snr_db is None:
        return EmgRecording(clean, fs)
    reference = noise_power
    if reference is None:
        reference = float(np.mean(clean ** 2)) or 1.0
    sigma = math.sqrt(reference / 10.0 ** (noise_snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return EmgRecording(clean + sigma * rng.standard_normal(clean.shape), fs)


def generate_reference_kinematics(excitations: Sequence[ExcitationTrajectory], gains: Sequence[float],
                                  dof_labels: Sequence[str] | None = None,
                                  cutoff_hz: float = 1.0) -> KinematicsTrajectory:
    """Angles as ``gain * lowpass(drive)``, with the decoder's one-pole smoother."""
    if not excitations:
        raise InvalidArgumentError("need at least one excitation")
    if len(gains) != len(excitations):
        raise InvalidArgumentError("one gain per excitation required")
    rates = {e.sample_rate for e in excitations}
    lengths = {len(e.values) for e in excitations}
    if len(rates) != 1 or len(lengths) != 1:
        raise InvalidArgumentError("excitations must share rate and length")
    rate = rates.pop()
    drive = np.vstack([e.values for e in excitations])
    angles = np.asarray(gains, dtype=float)[:, None] * first_order_lowpass(drive, cutoff_hz, rate)
    labels = list(dof_labels) if dof_labels is not None else [f"dof{i}" for i in range(len(excitations))]
    return KinematicsTrajectory(angles, labels, rate)


@dataclass
class Scene:
    """A complete synthetic session: EMG, its sources and the mirrored kinematics."""

    emg: EmgRecording
    spikes: SpikeTrainSet
    reference: KinematicsTrajectory
    excitations: list[ExcitationTrajectory]
    muaps: MuapBank
    pools: list[MotorNeuronPool]
    trial_samples: int

    @property
    def dof_of_source(self) -> list[int]:
        out = []
        for d, pool in enumerate(self.pools):
            out.extend([d] * pool.pool_size)
        return out


def protocol_excitations(cfg: SimConfig) -> list[ExcitationTrajectory]:
    """Per-DoF drive for ``cfg.trials`` repetitions of the ramp cue.

    DoF ``d`` starts ``d * stagger_s`` later than DoF 0 within each trial so the
    DoFs move concurrently but not identically.
    """
    n_dof = len(cfg.dof_labels)
    cue = generate_cue(cfg.ramp_up_s, cfg.ramp_down_s, cfg.peak, cfg.cue_rate, 0.0).values
    rest = int(round(cfg.rest_s * cfg.cue_rate))
    stagger = int(round(cfg.stagger_s * cfg.cue_rate)) if n_dof > 1 else 0
    trial_len = 2 * rest + cue.size + stagger * (n_dof - 1)
    out = []
    for d in range(n_dof):
        trial = np.zeros(trial_len)
        start = rest + d * stagger
        trial[start : start + cue.size] = cue
        values = np.tile(trial, cfg.trials)
        out.append(ExcitationTrajectory(values, cfg.cue_rate, cfg.ramp_up_s, cfg.ramp_down_s, cfg.peak))
    return out


def build_scene(cfg: SimConfig, seed: int) -> Scene:
    """Simulate one pool per DoF, mix all pools into one electrode grid."""
    n_dof = len(cfg.dof_labels)
    if n_dof < 1:
        raise InvalidArgumentError("need at least one DoF label")
    gains = list(cfg.kinematic_gain_deg)
    if len(gains) == 1:
        gains = gains * n_dof
    if len(gains) != n_dof:
        raise InvalidArgumentError("kinematic_gain_deg must have one entry or one per DoF")
    seeds = np.random.SeedSequence(seed).spawn(n_dof + 2)
    excitations = protocol_excitations(cfg)
    pools, parts = [], []
    for d, exc in enumerate(excitations):
        pool = make_pool(cfg.neurons_per_dof, cfg.max_threshold, cfg.min_rate,
                         (cfg.peak_rate_low, cfg.peak_rate_high))
        pools.append(pool)
        parts.append(generate_spike_trains(
            pool, exc, cfg.sample_rate, int(seeds[d].generate_state(1)[0]),
            cfg.isi_cv, cfg.refractory_ms, label_prefix=f"{cfg.dof_labels[d]}_n",
        ))
    spikes = SpikeTrainSet.concat(parts)

    # each DoF's pool occupies its own region of the grid
    side = math.ceil(math.sqrt(cfg.channels)) - 1
    muap_rng = np.random.default_rng(seeds[n_dof])
    locations = []
    for d in range(n_dof):
        centre = np.array([side / 2.0, side * (d + 0.5) / n_dof])
        jitter = muap_rng.uniform(-0.35, 0.35, size=(cfg.neurons_per_dof, 2)) * np.array([side, side / n_dof])
        locations.append(centre + jitter)
    drift = cfg.amplitude_drift if cfg.amplitude_drift != 0.0 else None
    muaps = make_muap_bank(len(spikes), cfg.channels, cfg.muap_length,
                           int(muap_rng.integers(2 ** 31)), np.vstack(locations), drift)
    emg = synthesize_emg(spikes, muaps, cfg.snr_db, int(seeds[n_dof + 1].generate_state(1)[0]))
    reference = generate_reference_kinematics(excitations, gains, cfg.dof_labels, cfg.kinematic_cutoff_hz)
    trial_samples = len(excitations[0].values) // cfg.trials
    return Scene(emg, spikes, reference, excitations, muaps, pools, trial_samples)
