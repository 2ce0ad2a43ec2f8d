"""BMD/volume statistics per VOI, accuracy against nominal values, and
precision (coefficient-of-variation) aggregation for repeated analyses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volgrid import Calibration, VoxelVolume, calibrate


class EmptyVoiError(ValueError):
    """Raised when a requested label selects zero voxels."""


@dataclass(frozen=True)
class VoiReport:
    """Per-vertebra measurements plus study-level aggregates.

    BMD is measured over the peeled trabecular VOI (label 4) and volume over
    the full trabecular VOI (label 3); ``errors``/``cvs`` hold whatever the
    study mode produced (percent errors vs. nominal, or percent CVs).
    """

    bmd_mg_cm3: tuple          # one per vertebra
    volume_cm3: tuple
    voxel_counts: tuple        # (label-4 count, label-3 count) per vertebra
    errors: dict = field(default_factory=dict)
    cvs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bmd_mg_cm3": list(self.bmd_mg_cm3),
            "volume_cm3": list(self.volume_cm3),
            "voxel_counts": [list(c) for c in self.voxel_counts],
            "errors": self.errors,
            "cvs": self.cvs,
        }


def voi_stats(volume: VoxelVolume, mask: np.ndarray, label: int,
              cal: Calibration = Calibration()):
    """Mean calibrated density and volume of one label of a mask.

    Returns (BMD mg/cm^3, volume cm^3, voxel count). The volume is exactly
    count x voxel volume; no partial-volume correction is applied.
    """
    mask = np.asarray(mask)
    if mask.shape != volume.dims:
        raise ValueError("mask geometry does not match the volume")
    sel = mask == label if mask.dtype != bool else mask
    count = int(np.count_nonzero(sel))
    if count == 0:
        raise EmptyVoiError(f"label {label} selects no voxels")
    bmd = float(np.mean(calibrate(volume.values[sel].astype(np.float64), cal)))
    vol_cm3 = count * volume.voxel_volume_mm3 / 1000.0
    return bmd, vol_cm3, count


def measure_result(volume: VoxelVolume, result,
                   cal: Calibration = Calibration()):
    """(BMD over label 4, volume over label 3, counts) for one VertebraResult."""
    bmd, _, n4 = voi_stats(volume, result.peeled, True, cal)
    _, vol, n3 = voi_stats(volume, result.trabecular, True, cal)
    return bmd, vol, (n4, n3)


def accuracy_error(measured: float, nominal: float) -> float:
    """Percent deviation from a nominal value, sign-blind."""
    if nominal == 0:
        raise ValueError("nominal value must be nonzero")
    return 100.0 * abs(measured - nominal) / nominal


def precision_cv(measurements):
    """Precision of repeated measurements, subject by subject.

    ``measurements`` is a sequence of per-subject repeat sequences (>= 2
    repeats each). Per subject CV = 100 x sample SD (n-1) / mean; the study
    aggregate is the root-mean-square of the subject CVs. Returns
    (CV_RMS, SD across subject CVs, per-subject CV list).
    """
    if len(measurements) == 0:
        raise ValueError("at least one subject required")
    cvs = []
    for reps in measurements:
        reps = np.asarray(reps, dtype=np.float64)
        if reps.size < 2:
            raise ValueError("each subject needs at least 2 repeats")
        cvs.append(100.0 * np.std(reps, ddof=1) / np.mean(reps))
    cvs = np.asarray(cvs)
    cv_rms = float(np.sqrt(np.mean(cvs ** 2)))
    cv_sd = float(np.std(cvs, ddof=1)) if len(cvs) > 1 else 0.0
    return cv_rms, cv_sd, [float(c) for c in cvs]


def study_report(volume: VoxelVolume, results, truth=None, repeats=None,
                 cal: Calibration = Calibration()) -> VoiReport:
    """Aggregate one study into a VoiReport.

    Accuracy mode (``truth`` given): per-vertebra percent errors of BMD vs.
    the nominal trabecular density and volume vs. the analytic trabecular
    core volume.  Precision mode (``repeats`` given): ``repeats`` is a list
    of per-repeat result lists; per-vertebra CVs plus CV_RMS/SD per measurand.
    The primary ``results`` list supplies the reported point measurements.
    """
    stats = [measure_result(volume, r, cal) for r in results]
    bmds = tuple(s[0] for s in stats)
    vols = tuple(s[1] for s in stats)
    counts = tuple(s[2] for s in stats)
    errors, cvs = {}, {}

    if truth is not None:
        if len(truth.vertebrae) != len(results):
            raise ValueError("ground truth layout does not match results")
        errors["bmd_pct"] = [
            accuracy_error(b, t.trabecular_density)
            for b, t in zip(bmds, truth.vertebrae)]
        errors["volume_pct"] = [
            accuracy_error(v, t.trabecular_volume_cm3)
            for v, t in zip(vols, truth.vertebrae)]

    if repeats is not None:
        if any(len(rep) != len(results) for rep in repeats):
            raise ValueError("inconsistent repeat layout")
        rep_stats = [[measure_result(volume, r, cal) for r in rep]
                     for rep in repeats]
        per_vert_bmd = [[rep[i][0] for rep in rep_stats]
                        for i in range(len(results))]
        per_vert_vol = [[rep[i][1] for rep in rep_stats]
                        for i in range(len(results))]
        for name, series in (("bmd", per_vert_bmd), ("volume", per_vert_vol)):
            rms, sd, per = precision_cv(series)
            cvs[f"{name}_cv_pct"] = per
            cvs[f"{name}_cv_rms_pct"] = rms
            cvs[f"{name}_cv_sd_pct"] = sd

    return VoiReport(bmd_mg_cm3=bmds, volume_cm3=vols, voxel_counts=counts,
                     errors=errors, cvs=cvs)
