"""Command-line entry point: ``myodecode <command> [options]``.

Every command computes all of its results before touching the output
directory, so a failing run leaves nothing behind. Each successful run writes
``manifest.json`` holding the resolved config; passing that file back through
``--config`` reproduces the run.

Exit codes: 0 success, 1 invalid input or format error, 2 usage error,
3 a DoF could not be assigned to any component.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from . import bss, evaluation, io, sim
from .config import RunConfig, load_config
from .decode import fit_decoder, project, smooth
from .errors import MyoDecodeError, UnassignedDofError
from .evaluation import format_r2_pair, multivariate_r2, prepare, trial_rows

log = logging.getLogger("myodecode")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_UNASSIGNED = 0, 1, 2, 3

# an output is (file name, writer taking the full path)
Output = tuple[str, Callable[[Path], Any]]


def _common(suppress: bool) -> argparse.ArgumentParser:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d(None),
                   help="TOML config or a previous run's manifest.json")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the config)")
    p.add_argument("--out", metavar="DIR", default=d("."), help="output directory")
    p.add_argument("--format", choices=("bin", "csv"), default=d("bin"),
                   help="matrix and spike file format")
    p.add_argument("-v", "--verbose", action="count", default=d(0))
    return p


def build_parser() -> argparse.ArgumentParser:
    sub_common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="myodecode", parents=[_common(suppress=False)],
                                     description="Motor unit decomposition and kinematic decoding.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    cmds = parser.add_subparsers(dest="command", required=True)

    cmds.add_parser("simulate", parents=[sub_common], help="synthesize EMG, spikes and kinematics")

    p = cmds.add_parser("decompose", parents=[sub_common], help="EMG matrix -> qualified spike trains")
    p.add_argument("emg", help="EMG matrix file (channels x samples)")
    p.add_argument("--detector", choices=("adaptive", "kmeans"), help="spike detector (overrides the config)")

    p = cmds.add_parser("decode", parents=[sub_common], help="spike trains -> joint angle estimates")
    p.add_argument("spikes", help="MUST spike file")
    p.add_argument("reference", help="reference kinematics matrix file (DoFs x samples)")
    p.add_argument("--model", metavar="PATH", help="reuse a saved model instead of fitting")

    ev = cmds.add_parser("eval", help="robustness studies").add_subparsers(dest="study", required=True)
    p = ev.add_parser("sweep", parents=[sub_common], help="reduced channel-set sweep")
    p.add_argument("spikes")
    p.add_argument("reference")
    p = ev.add_parser("mux", parents=[sub_common], help="time-multiplexed acquisition study")
    p.add_argument("spikes")
    p.add_argument("reference")
    p = ev.add_parser("thresholds", parents=[sub_common], help="adaptive vs. K-means detection")
    p.add_argument("emg")
    p.add_argument("reference")
    p.add_argument("--truth", metavar="PATH", help="ground-truth spike file for recall")
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=int(args.seed))
    if getattr(args, "detector", None):
        cfg = replace(cfg, bss=replace(cfg.bss, detector=args.detector))
    return cfg


def _ext(fmt: str, kind: str) -> str:
    return io.EXTENSIONS[fmt][kind]


def _read_emg(path: str) -> sim.EmgRecording:
    samples, rate = io.read_matrix(path)
    if rate is None:
        raise MyoDecodeError(f"{path}: EMG file carries no sample rate")
    return sim.EmgRecording(samples, rate)


def _read_reference(path: str, cfg: RunConfig) -> sim.KinematicsTrajectory:
    angles, rate = io.read_matrix(path)
    if rate is None:
        raise MyoDecodeError(f"{path}: reference file carries no sample rate")
    labels = list(cfg.sim.dof_labels)
    if len(labels) != angles.shape[0]:
        labels = [f"dof{i}" for i in range(angles.shape[0])]
    return sim.KinematicsTrajectory(angles, labels, rate)


def _commit(out: Path, outputs: list[Output], cfg: RunConfig, argv: list[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, write in outputs:
        write(out / name)
    io.write_json(out / "manifest.json", {
        "version": __version__,
        "command": argv,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "outputs": [name for name, _ in outputs],
    })


# -- commands ---------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace, cfg: RunConfig) -> list[Output]:
    scene = sim.build_scene(cfg.sim, cfg.seed)
    fmt = args.format
    return [
        ("emg" + _ext(fmt, "matrix"), lambda p: io.write_matrix(p, scene.emg.samples, scene.emg.sample_rate, fmt)),
        ("spikes" + _ext(fmt, "spikes"), lambda p: io.write_spikes(p, scene.spikes, fmt)),
        ("kinematics" + _ext(fmt, "matrix"),
         lambda p: io.write_matrix(p, scene.reference.angles, scene.reference.sample_rate, fmt)),
    ]


def cmd_decompose(args: argparse.Namespace, cfg: RunConfig) -> list[Output]:
    emg = _read_emg(args.emg)
    result = bss.decompose(emg, cfg.bss, cfg.seed)
    rows = [
        {"attempt": d.attempt, "converged": int(d.converged), "sil": d.sil,
         "spike_count": d.spike_count, "qualified": int(d.qualified)}
        for d in result.diagnostics
    ]
    fmt = args.format
    log.info("%d of %d sources qualified", len(result.sources), len(result.diagnostics))
    return [
        ("spikes" + _ext(fmt, "spikes"), lambda p: io.write_spikes(p, result.spikes, fmt)),
        ("diagnostics.csv", lambda p: io.write_csv(p, rows, ["attempt", "converged", "sil", "spike_count", "qualified"])),
    ]


def cmd_decode(args: argparse.Namespace, cfg: RunConfig) -> list[Output]:
    musts = io.read_spikes(args.spikes)
    reference = _read_reference(args.reference, cfg)
    dc = cfg.decode
    binned, ref = prepare(musts, reference, dc)
    smoothed = smooth(binned, dc.cutoff_hz)
    if args.model:
        model = io.load_model(args.model)
    else:
        model = fit_decoder(smoothed, ref, dc)
    if list(model.dof_labels) != list(ref.dof_labels):
        raise MyoDecodeError(f"model DoFs {model.dof_labels} differ from reference DoFs {ref.dof_labels}")
    estimate = project(model, smoothed)

    size = smoothed.n_bins // dc.trials
    split = np.full(smoothed.n_bins, "unused", dtype=object)
    split[trial_rows(smoothed.n_bins, dc.trials, dc.train_trials)] = "train"
    split[trial_rows(smoothed.n_bins, dc.trials, dc.test_trials)] = "test"
    rows = []
    for b in range(smoothed.n_bins):
        row: dict[str, Any] = {"bin": b, "time_s": b / smoothed.bin_rate,
                               "trial": b // size if size else 0, "split": split[b]}
        for k, lab in enumerate(ref.dof_labels):
            row[f"est_{lab}"] = float(estimate.angles[k, b])
        for k, lab in enumerate(ref.dof_labels):
            row[f"ref_{lab}"] = float(ref.angles[k, b])
        rows.append(row)
    r2 = []
    for name, trials in (("train", dc.train_trials), ("test", dc.test_trials)):
        idx = trial_rows(smoothed.n_bins, dc.trials, trials)
        r2.append({"split": name, "trials": " ".join(map(str, trials)),
                   "r2": multivariate_r2(estimate.angles[:, idx], ref.angles[:, idx])})
    log.info("R2 %s", format_r2_pair(r2[0]["r2"], r2[1]["r2"], digits=4))
    outputs: list[Output] = [
        ("estimates.csv", lambda p: io.write_csv(p, rows)),
        ("r2.csv", lambda p: io.write_csv(p, r2)),
    ]
    if not args.model:
        outputs.insert(0, ("model.json", lambda p: io.save_model(p, model, cfg.hash())))
    return outputs


def _report_outputs(prefix: str, report: evaluation.SweepReport, run_keys: set[str] | None = None) -> list[Output]:
    log.info("R2 mean\u00b1variance over runs\n%s", report.table())
    runs = [r for r in report.run_rows() if run_keys is None or r["key"] in run_keys]
    summary = report.summary_rows()
    doc = {"seed": report.seed, "run_count": report.run_count,
           "entries": [{"key": e.key, "train": e.train, "test": e.test} for e in report.entries],
           "summary": summary}
    return [
        (f"{prefix}_runs.csv", lambda p: io.write_csv(p, runs, ["key", "run", "r2_train", "r2_test"])),
        (f"{prefix}_summary.csv", lambda p: io.write_csv(p, summary)),
        (f"{prefix}.json", lambda p: io.write_json(p, doc)),
    ]


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig) -> list[Output]:
    musts = io.read_spikes(args.spikes)
    reference = _read_reference(args.reference, cfg)
    report = evaluation.reduced_set_sweep(musts, reference, cfg.eval.sizes, cfg.eval.runs, cfg.seed, cfg.decode)
    sizes = {e.key for e in report.entries if e.key != "full"}
    return _report_outputs("sweep", report, sizes)


def cmd_mux(args: argparse.Namespace, cfg: RunConfig) -> list[Output]:
    musts = io.read_spikes(args.spikes)
    reference = _read_reference(args.reference, cfg)
    setups = evaluation.schedules_from_config(cfg.eval.mux_setups)
    report = evaluation.mux_study(musts, reference, setups, cfg.eval.runs, cfg.seed, cfg.decode,
                                  cfg.eval.mux_baselines)
    return _report_outputs("mux", report)


def cmd_thresholds(args: argparse.Namespace, cfg: RunConfig) -> list[Output]:
    emg = _read_emg(args.emg)
    reference = _read_reference(args.reference, cfg)
    truth = io.read_spikes(args.truth) if args.truth else None
    report = evaluation.thresholding_comparison(emg, reference, cfg, truth)
    rows = []
    for o in report.outcomes:
        rows.append({"detector": o.detector, "sources": len(o.musts), "spikes": o.spike_count,
                     "recall": "" if o.recall is None else o.recall,
                     "matched": "" if o.matched is None else o.matched,
                     "r2_train": "" if o.r2_train is None else o.r2_train,
                     "r2_test": "" if o.r2_test is None else o.r2_test,
                     "error": o.error or ""})
    improvement = [{"split": "train", "improvement_pct": "" if report.improvement_train_pct is None
                    else report.improvement_train_pct},
                   {"split": "test", "improvement_pct": "" if report.improvement_test_pct is None
                    else report.improvement_test_pct}]
    outputs: list[Output] = [
        ("thresholds.csv", lambda p: io.write_csv(p, rows)),
        ("improvement.csv", lambda p: io.write_csv(p, improvement)),
    ]
    for o in report.outcomes:
        raster = [{"source": k, "label": lab, "sample": int(s), "time_s": s / emg.sample_rate}
                  for k, (lab, train) in enumerate(zip(o.musts.source_labels, o.musts.trains))
                  for s in train.tolist()]
        outputs.append((f"raster_{o.detector}.csv",
                        lambda p, raster=raster: io.write_csv(p, raster, ["source", "label", "sample", "time_s"])))
    return outputs


COMMANDS = {
    ("simulate", None): cmd_simulate,
    ("decompose", None): cmd_decompose,
    ("decode", None): cmd_decode,
    ("eval", "sweep"): cmd_sweep,
    ("eval", "mux"): cmd_mux,
    ("eval", "thresholds"): cmd_thresholds,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        outputs = COMMANDS[(args.command, getattr(args, "study", None))](args, cfg)
        _commit(Path(args.out), outputs, cfg, argv)
    except UnassignedDofError as exc:
        print(f"myodecode: unassigned DoF: {exc}", file=sys.stderr)
        return EXIT_UNASSIGNED
    except (MyoDecodeError, OSError) as exc:
        print(f"myodecode: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
