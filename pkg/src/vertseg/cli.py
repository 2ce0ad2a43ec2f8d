"""Command-line front end: phantom generation, segmentation runs, and study
reports (JSON + CSV + figures) driven by JSON config files.

Exit codes: 0 success, 2 input error, 3 at least one vertebra flagged.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first

from .analysis import Calibration, study_report
from .balloon import BalloonParams
from .constraints import SeedSet
from .mesh import write_obj
from .phantom import GroundTruth, PhantomSpec, default_spec, generate_phantom
from .pipeline import PipelineParams, StageError, segment_all
from .volgrid import load_volume, save_mask, save_volume

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FLAGGED = 3


class ConfigError(ValueError):
    """Unusable run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Declarative study description loaded from JSON."""

    volume: str
    seeds: SeedSet
    outdir: str
    truth: str | None = None            # truth.json path (accuracy mode)
    mode: str = "accuracy"              # accuracy | precision
    repeats: int = 3
    jitter_voxels: float = 2.0
    rng_seed: int = 0
    calibration: Calibration = Calibration()
    params: PipelineParams = field(default_factory=PipelineParams)

    def __post_init__(self):
        if self.mode not in ("accuracy", "precision"):
            raise ConfigError(f"unknown study mode {self.mode!r}")
        if self.repeats < 1:
            raise ConfigError("repeat count must be >= 1")
        if not os.path.exists(self.volume):
            raise ConfigError(f"volume file not found: {self.volume}")
        if self.truth is not None and not os.path.exists(self.truth):
            raise ConfigError(f"truth file not found: {self.truth}")


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        seeds = SeedSet(
            body_centers=tuple(tuple(c) for c in raw["seeds"]["body_centers"]),
            canal_seed=tuple(raw["seeds"]["canal_seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad seeds section: {exc}") from exc

    params = PipelineParams()
    overrides = raw.get("params", {})
    balloon_over = overrides.pop("settle", None)
    known = {f.name for f in fields(PipelineParams)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown parameter overrides: {sorted(unknown)}")
    if overrides:
        params = replace(params, **overrides)
    if balloon_over:
        bknown = {f.name for f in fields(BalloonParams)}
        bunknown = set(balloon_over) - bknown
        if bunknown:
            raise ConfigError(f"unknown balloon overrides: {sorted(bunknown)}")
        params = replace(params, settle=replace(params.settle, **balloon_over))

    cal = raw.get("calibration", {})
    config_dir = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.join(config_dir, p)

    return RunConfig(
        volume=resolve(raw["volume"]),
        seeds=seeds,
        outdir=resolve(raw.get("outdir", ".")),
        truth=resolve(raw.get("truth")),
        mode=raw.get("mode", "accuracy"),
        repeats=int(raw.get("repeats", 3)),
        jitter_voxels=float(raw.get("jitter_voxels", 2.0)),
        rng_seed=int(raw.get("rng_seed", 0)),
        calibration=Calibration(slope=float(cal.get("slope", 1.0)),
                                intercept=float(cal.get("intercept", 0.0))),
        params=params)


# -- atomic output helpers ------------------------------------------------------

def _atomic_bytes(path, data: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _write_json(path, obj):
    _atomic_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n")
                  .encode())


def _write_fig(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, metadata={"Software": ""})
    plt.close(fig)
    _atomic_bytes(path, buf.getvalue())


# -- subcommands ----------------------------------------------------------------

def cmd_phantom(spec_path, outdir) -> int:
    if spec_path is not None:
        try:
            with open(spec_path) as fh:
                spec = PhantomSpec.from_json(fh.read())
        except (OSError, ValueError, TypeError, KeyError) as exc:
            print(f"error: invalid phantom spec: {exc}", file=sys.stderr)
            return EXIT_INPUT
    else:
        spec = default_spec(noise_sigma=50.0, seed=0)
    os.makedirs(outdir, exist_ok=True)
    volume, truth = generate_phantom(spec)
    save_volume(volume, os.path.join(outdir, "phantom.mhd"))
    for name, attr in (("body", "body_mask"), ("core", "core_mask"),
                       ("arch", "arch_mask")):
        labels = np.zeros(volume.dims, dtype=np.uint8)
        for i, v in enumerate(truth.vertebrae, start=1):
            labels[getattr(v, attr)] = i
        save_mask(labels, volume.spacing, volume.origin,
                  os.path.join(outdir, f"truth_{name}.mhd"))
    _write_json(os.path.join(outdir, "truth.json"), truth.summary())
    _write_json(os.path.join(outdir, "spec.json"), json.loads(spec.to_json()))
    print(f"phantom written to {outdir}")
    return EXIT_OK


def _run_study(config: RunConfig):
    """Segment per the config; returns (volume, results, per-repeat results)."""
    volume = load_volume(config.volume)
    results = segment_all(volume, config.seeds, config.params)
    failures = [r for r in results if isinstance(r, StageError)]
    if failures:
        raise failures[0]
    repeats = None
    if config.mode == "precision":
        rng = np.random.default_rng(config.rng_seed)
        spacing = np.asarray(volume.spacing)
        repeats = []
        for _ in range(config.repeats):
            jit = rng.uniform(-config.jitter_voxels, config.jitter_voxels,
                              size=(len(config.seeds.body_centers) + 1, 3))
            centers = tuple(
                tuple(np.asarray(c) + jit[i] * spacing)
                for i, c in enumerate(config.seeds.body_centers))
            canal = tuple(np.asarray(config.seeds.canal_seed)
                          + jit[-1] * spacing * (1, 1, 0))
            seeds = SeedSet(body_centers=centers, canal_seed=canal)
            rep = segment_all(volume, seeds, config.params)
            bad = [r for r in rep if isinstance(r, StageError)]
            if bad:
                raise bad[0]
            repeats.append(rep)
    return volume, results, repeats


def _result_record(i, result):
    return {
        "vertebra": i,
        "thresholds_hu": [float(t) for t in result.thresholds],
        "iterations": result.iterations,
        "flags": list(result.flags),
    }


def cmd_segment(config_path) -> int:
    try:
        config = load_config(config_path)
        volume, results, _ = _run_study(replace(config, mode="accuracy",
                                                truth=None))
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGGED
    os.makedirs(config.outdir, exist_ok=True)
    log = []
    for i, result in enumerate(results):
        save_mask(result.to_labels(), volume.spacing, volume.origin,
                  os.path.join(config.outdir, f"labels_v{i}.mhd"))
        write_obj(result.mesh,
                  os.path.join(config.outdir, f"mesh_v{i}.obj"))
        log.append(_result_record(i, result))
    _write_json(os.path.join(config.outdir, "stages.json"), log)
    flagged = any(r.flags for r in results)
    print(f"{len(results)} vertebrae segmented"
          + (" (flagged)" if flagged else ""))
    return EXIT_FLAGGED if flagged else EXIT_OK


def _accuracy_figure(report, truth):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    idx = np.arange(len(report.bmd_mg_cm3))
    for ax, key, title in ((axes[0], "bmd_pct", "BMD error"),
                           (axes[1], "volume_pct", "Volume error")):
        ax.bar(idx, report.errors[key], color="0.4")
        ax.set_xticks(idx)
        ax.set_xticklabels([f"v{i}" for i in idx])
        ax.set_ylabel("% error vs nominal")
        ax.set_title(title)
    fig.tight_layout()
    return fig


def _precision_figure(report):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    idx = np.arange(len(report.cvs["bmd_cv_pct"]))
    w = 0.35
    ax.bar(idx - w / 2, report.cvs["bmd_cv_pct"], w, label="BMD", color="0.3")
    ax.bar(idx + w / 2, report.cvs["volume_cv_pct"], w, label="Volume",
           color="0.7")
    ax.set_xticks(idx)
    ax.set_xticklabels([f"v{i}" for i in idx])
    ax.set_ylabel("% CV")
    ax.set_title("Precision (3-repeat CV per vertebra)")
    ax.legend()
    fig.tight_layout()
    return fig


def _report_csv(report) -> bytes:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = ["vertebra", "bmd_mg_cm3", "volume_cm3"]
    if report.errors:
        header += ["bmd_err_pct", "volume_err_pct"]
    if report.cvs:
        header += ["bmd_cv_pct", "volume_cv_pct"]
    writer.writerow(header)
    for i in range(len(report.bmd_mg_cm3)):
        row = [i, f"{report.bmd_mg_cm3[i]:.6f}", f"{report.volume_cm3[i]:.6f}"]
        if report.errors:
            row += [f"{report.errors['bmd_pct'][i]:.6f}",
                    f"{report.errors['volume_pct'][i]:.6f}"]
        if report.cvs:
            row += [f"{report.cvs['bmd_cv_pct'][i]:.6f}",
                    f"{report.cvs['volume_cv_pct'][i]:.6f}"]
        writer.writerow(row)
    return out.getvalue().encode()


def _load_truth(path) -> GroundTruth:
    from .phantom import VertebraTruth
    with open(path) as fh:
        raw = json.load(fh)
    verts = tuple(
        VertebraTruth(center=tuple(v["center"]),
                      trabecular_volume_cm3=v["trabecular_volume_cm3"],
                      trabecular_density=v["trabecular_density"],
                      body_mask=None, core_mask=None, arch_mask=None,
                      pedicle_cylinders=tuple(tuple(c) for c in
                                              v["pedicle_cylinders"]))
        for v in raw["vertebrae"])
    return GroundTruth(vertebrae=verts)


def cmd_report(config_path, mode=None) -> int:
    try:
        config = load_config(config_path)
        if mode is not None:
            config = replace(config, mode=mode)
        if config.mode == "accuracy" and config.truth is None:
            raise ConfigError("accuracy mode requires a truth.json path")
        truth = _load_truth(config.truth) if config.mode == "accuracy" else None
        volume, results, repeats = _run_study(config)
    except (ConfigError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGGED
    os.makedirs(config.outdir, exist_ok=True)

    report = study_report(volume, results, truth=truth, repeats=repeats,
                          cal=config.calibration)
    payload = report.to_dict()
    payload["mode"] = config.mode
    payload["per_vertebra"] = [_result_record(i, r)
                               for i, r in enumerate(results)]
    if repeats is not None:
        payload["repeats"] = [
            [_result_record(i, r) for i, r in enumerate(rep)]
            for rep in repeats]
    _write_json(os.path.join(config.outdir, "report.json"), payload)
    _atomic_bytes(os.path.join(config.outdir, "report.csv"),
                  _report_csv(report))
    fig = (_accuracy_figure(report, truth) if config.mode == "accuracy"
           else _precision_figure(report))
    _write_fig(fig, os.path.join(config.outdir, "report.png"))
    flagged = any(r.flags for r in results) or (
        repeats is not None
        and any(r.flags for rep in repeats for r in rep))
    print(f"report written to {config.outdir}"
          + (" (flagged)" if flagged else ""))
    return EXIT_FLAGGED if flagged else EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vertseg",
        description="Vertebral body segmentation and trabecular BMD/volume "
                    "measurement on CT-like volumes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom study")
    p.add_argument("--spec", default=None, help="phantom spec JSON "
                   "(default: built-in 3-vertebra phantom, noise 50 HU)")
    p.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("segment", help="segment a volume per a run config")
    s.add_argument("--config", required=True, help="run config JSON")

    r = sub.add_parser("report", help="run a study and write reports")
    r.add_argument("--config", required=True, help="run config JSON")
    r.add_argument("--mode", choices=("accuracy", "precision"), default=None,
                   help="override the study mode from the config")

    args = parser.parse_args(argv)
    if args.command == "phantom":
        return cmd_phantom(args.spec, args.out)
    if args.command == "segment":
        return cmd_segment(args.config)
    return cmd_report(args.config, args.mode)


if __name__ == "__main__":
    sys.exit(main())
