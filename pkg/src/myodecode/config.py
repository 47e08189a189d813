"""Run configuration: one TOML document with ``[sim]``, ``[bss]``, ``[decode]`` and ``[eval]``.

Every tunable has a default here; unknown keys are rejected on load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .errors import FormatError, InvalidArgumentError


@dataclass
class SimConfig:
    channels: int = 64
    neurons_per_dof: int = 10
    dof_labels: list[str] = field(default_factory=lambda: ["EF"])
    sample_rate: float = 2048.0
    muap_length: int = 30
    snr_db: float = 20.0
    trials: int = 3
    ramp_up_s: float = 3.0
    ramp_down_s: float = 3.0
    peak: float = 1.0
    rest_s: float = 2.0
    stagger_s: float = 1.5
    cue_rate: float = 20.0
    isi_cv: float = 0.15
    refractory_ms: float = 10.0
    min_rate: float = 8.0
    peak_rate_low: float = 25.0
    peak_rate_high: float = 35.0
    max_threshold: float = 0.5
    amplitude_drift: float = 0.0
    kinematic_gain_deg: list[float] = field(default_factory=lambda: [90.0])
    kinematic_cutoff_hz: float = 1.0


@dataclass
class BssConfig:
    extension: int = 5
    whitening_floor: float = 1e-8
    max_sources: int = 30
    contrast: str = "skew"
    tol: float = 1e-4
    max_iter: int = 200
    detector: str = "adaptive"
    refractory_ms: float = 10.0
    window_s: float = 1.0
    rel_threshold: float = 0.5
    sil_threshold: float = 0.8


@dataclass
class DecodeConfig:
    bin_ms: float = 50.0
    cutoff_hz: float = 1.0
    components: int = 12
    varimax_tol: float = 1e-10
    varimax_max_iter: int = 1000
    min_correlation: float = 0.2
    trials: int = 3
    train_trials: list[int] = field(default_factory=lambda: [0, 1])
    test_trials: list[int] = field(default_factory=lambda: [2])
    gain_trial: int = 0


def _default_mux_setups() -> list[dict[str, Any]]:
    return [
        {"label": "setup1", "subset_size": 32, "block_ms": 200.0, "switches": 7, "scheduled": 224, "selection": "random"},
        {"label": "setup2", "subset_size": 32, "block_ms": 100.0, "switches": 3, "scheduled": 96, "selection": "random"},
        {"label": "setup3", "subset_size": 32, "block_ms": 50.0, "switches": 3, "scheduled": 96, "selection": "random"},
    ]


@dataclass
class EvalConfig:
    sizes: list[int] = field(default_factory=lambda: [8, 16, 32, 48, 96, 192])
    runs: int = 50
    match_tolerance_ms: float = 1.0
    min_rate_of_agreement: float = 0.9
    mux_setups: list[dict[str, Any]] = field(default_factory=_default_mux_setups)
    mux_baselines: list[int] = field(default_factory=lambda: [32, 96])


@dataclass
class RunConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    bss: BssConfig = field(default_factory=BssConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form; identifies a resolved config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {"sim": SimConfig, "bss": BssConfig, "decode": DecodeConfig, "eval": EvalConfig}


def _build_section(cls: type, name: str, values: dict[str, Any]) -> Any:
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise InvalidArgumentError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    obj = cls()
    for key, value in values.items():
        default = getattr(obj, key)
        # TOML ints are acceptable where floats are expected
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        setattr(obj, key, value)
    return obj


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise InvalidArgumentError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig(seed=int(data.get("seed", 0)))
    for name, cls in _SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise InvalidArgumentError(f"[{name}] must be a table")
        setattr(cfg, name, _build_section(cls, name, section))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    d = cfg.decode
    for idx in [*d.train_trials, *d.test_trials, d.gain_trial]:
        if not 0 <= idx < d.trials:
            raise InvalidArgumentError(f"trial index {idx} outside [0, {d.trials})")
    if d.gain_trial not in d.train_trials:
        raise InvalidArgumentError("gain_trial must be one of train_trials")
    if cfg.bss.detector not in ("adaptive", "kmeans"):
        raise InvalidArgumentError(f"unknown detector {cfg.bss.detector!r}")
    if cfg.bss.contrast not in ("skew", "logcosh"):
        raise InvalidArgumentError(f"unknown contrast {cfg.bss.contrast!r}")


def load_config(path: str | Path | None) -> RunConfig:
    """Read a TOML config, or the ``config`` entry of a JSON run manifest."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        if path.suffix == ".json":
            # a run manifest carries the resolved config under "config"
            data = json.loads(path.read_text())["config"]
        else:
            with path.open("rb") as fh:
                data = tomli.load(fh)
    except (tomli.TOMLDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
