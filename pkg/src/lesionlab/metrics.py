"""Voxel segmentation and lesion detection metrics over threshold sweeps.

Rates follow the TPR/FDR/F1 conventions throughout: tpr = tp/(tp+fn),
fdr = fp/(tp+fp), f1 = 2tp/(2tp+fp+fn), with the degenerate cases pinned
(tpr=1 when there is nothing to find, fdr=0 when nothing was predicted,
f1=1 when all three counts are zero).

Lesion detection: a truth lesion counts as detected when the predicted
foreground covers at least ``min_overlap_fraction`` of its voxels; a
predicted component counts as a false positive when it overlaps zero
eligible-truth voxels.  Truth lesions below ``min_lesion_size`` (default 3)
are excluded everywhere.  Detected/missed counts are binned by TRUTH lesion
size; false positives have no truth bin, so every bin row reports the shared
false-positive count.

Curves pool counts over all volumes per threshold (micro-averaging), then
compute rates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import Mask, Volume
from .lesions import DEFAULT_CONNECTIVITY, LabelMap, label_components, size_bin

DETECTION_BINS = ("small", "medium", "large")
DEFAULT_TAUS = tuple(np.round(np.arange(0.01, 0.991, 0.01), 2))
DEFAULT_MIN_OVERLAP = 0.1
DEFAULT_MIN_LESION_SIZE = 3


@dataclass(frozen=True)
class VoxelCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Rates:
    tpr: float
    fdr: float
    f1: float


def rates(tp: int, fp: int, fn: int) -> Rates:
    """TPR/FDR/F1 with the degenerate-denominator conventions."""
    tpr = 1.0 if tp + fn == 0 else tp / (tp + fn)
    fdr = 0.0 if tp + fp == 0 else fp / (tp + fp)
    f1 = 1.0 if tp + fp + fn == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
    return Rates(tpr=tpr, fdr=fdr, f1=f1)


def _flat_probs(prob) -> np.ndarray:
    if isinstance(prob, Volume):
        return prob.data
    return np.asarray(prob).reshape(-1)


def _flat_truth(truth) -> np.ndarray:
    if isinstance(truth, Mask):
        return truth.data
    return np.asarray(truth).reshape(-1)


def voxel_counts(prob, truth, tau: float) -> VoxelCounts:
    """Confusion counts of (prob >= tau) against the truth mask."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    p = _flat_probs(prob)
    t = _flat_truth(truth)
    if p.size != t.size:
        raise ValueError(f"shape mismatch: probs {p.size} vs truth {t.size}")
    pred = p >= tau
    pos = t == 1
    tp = int(np.count_nonzero(pred & pos))
    fp = int(np.count_nonzero(pred & ~pos))
    fn = int(np.count_nonzero(~pred & pos))
    return VoxelCounts(tp=tp, fp=fp, fn=fn, tn=p.size - tp - fp - fn)


@dataclass(frozen=True)
class DetectionCounts:
    """Per-bin truth-lesion outcomes plus the shared false-positive count.

    detected/missed map bin name -> count for small/medium/large plus the
    pooled "all"; detected+missed equals the eligible truth lesions of the
    bin.  false_positive_predictions applies to every bin row because a
    no-overlap predicted component has no truth size to bin by.
    """

    detected: dict = field(default_factory=dict)
    missed: dict = field(default_factory=dict)
    false_positive_predictions: int = 0

    def bin_rates(self, bin_name: str) -> Rates:
        return rates(self.detected[bin_name], self.false_positive_predictions, self.missed[bin_name])


def match_lesions(
    pred_labels: LabelMap,
    truth_labels: LabelMap,
    min_overlap_fraction: float = DEFAULT_MIN_OVERLAP,
    min_lesion_size: int = DEFAULT_MIN_LESION_SIZE,
) -> DetectionCounts:
    """Match predicted components against truth lesions.

    A truth lesion (size >= min_lesion_size) is detected iff the union of
    predicted components covers >= min_overlap_fraction of its voxels.  A
    predicted component of any size is a false positive iff it overlaps no
    eligible truth voxel.
    """
    if pred_labels.dims != truth_labels.dims:
        raise ValueError("prediction and truth grids differ in dims")
    if not 0.0 < min_overlap_fraction <= 1.0:
        raise ValueError(f"min_overlap_fraction must be in (0, 1], got {min_overlap_fraction}")
    pred = pred_labels.labels
    truth = truth_labels.labels
    k_truth = truth_labels.component_count
    k_pred = pred_labels.component_count

    sizes = np.bincount(truth, minlength=k_truth + 1)
    eligible = np.zeros(k_truth + 1, dtype=bool)
    eligible[1:] = sizes[1:] >= min_lesion_size

    pred_fg = pred > 0
    covered = np.bincount(truth[pred_fg], minlength=k_truth + 1)

    detected = {b: 0 for b in DETECTION_BINS} | {"all": 0}
    missed = {b: 0 for b in DETECTION_BINS} | {"all": 0}
    for j in range(1, k_truth + 1):
        if not eligible[j]:
            continue
        hit = covered[j] / sizes[j] >= min_overlap_fraction
        # A tiny lesion made eligible by a lower threshold counts in "all"
        # but has no bin row of its own.
        bin_name = size_bin(int(sizes[j])).value
        for key in (bin_name, "all"):
            if key in detected:
                (detected if hit else missed)[key] += 1

    protecting = eligible[truth]
    protected_pred = np.unique(pred[protecting & pred_fg])
    n_protected = int(np.count_nonzero(protected_pred))
    false_pos = k_pred - n_protected
    return DetectionCounts(detected=detected, missed=missed, false_positive_predictions=false_pos)


@dataclass(frozen=True)
class CurveRow:
    tau: float
    vox: Rates
    det: dict  # bin name ("all", "small", "medium", "large") -> Rates


@dataclass(frozen=True)
class OperatingReport:
    """Best segmentation/detection thresholds, their distance, and the best
    single threshold serving both tasks."""

    tau_seg: float
    tau_det: float
    gap: float
    f1_seg: float
    f1_det: float
    simultaneous_f1: float
    tau_star: float

    def __post_init__(self):
        if self.simultaneous_f1 > min(self.f1_seg, self.f1_det) + 1e-12:
            raise AssertionError("simultaneous F1 exceeds an individual best F1")

    def to_dict(self) -> dict:
        return {
            "tau_seg": self.tau_seg,
            "tau_det": self.tau_det,
            "gap": self.gap,
            "f1_seg": self.f1_seg,
            "f1_det": self.f1_det,
            "simultaneous_f1": self.simultaneous_f1,
            "tau_star": self.tau_star,
        }


def pooled_counts(
    probs: list,
    truth_label_maps: list[LabelMap],
    truths: list,
    tau: float,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_overlap_fraction: float = DEFAULT_MIN_OVERLAP,
    min_lesion_size: int = DEFAULT_MIN_LESION_SIZE,
):
    """Micro-averaged voxel and detection counts at one threshold."""
    vox_tp = vox_fp = vox_fn = vox_tn = 0
    det_detected = {b: 0 for b in DETECTION_BINS} | {"all": 0}
    det_missed = {b: 0 for b in DETECTION_BINS} | {"all": 0}
    det_fp = 0
    for prob, tlm, truth in zip(probs, truth_label_maps, truths):
        vc = voxel_counts(prob, truth, tau)
        vox_tp += vc.tp
        vox_fp += vc.fp
        vox_fn += vc.fn
        vox_tn += vc.tn
        pred_mask = Mask(tlm.dims, (_flat_probs(prob) >= tau).astype(np.uint8))
        dc = match_lesions(
            label_components(pred_mask, connectivity),
            tlm,
            min_overlap_fraction=min_overlap_fraction,
            min_lesion_size=min_lesion_size,
        )
        for key in det_detected:
            det_detected[key] += dc.detected[key]
            det_missed[key] += dc.missed[key]
        det_fp += dc.false_positive_predictions
    return (
        VoxelCounts(tp=vox_tp, fp=vox_fp, fn=vox_fn, tn=vox_tn),
        DetectionCounts(detected=det_detected, missed=det_missed, false_positive_predictions=det_fp),
    )


def sweep_curves(
    probs: list,
    truths: list[Mask],
    taus=None,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_overlap_fraction: float = DEFAULT_MIN_OVERLAP,
    min_lesion_size: int = DEFAULT_MIN_LESION_SIZE,
) -> list[CurveRow]:
    """Pooled TPR/FDR/F1 rows over a threshold grid, ascending in tau."""
    if not probs or len(probs) != len(truths):
        raise ValueError("need equally many probability volumes and truth masks")
    taus = DEFAULT_TAUS if taus is None else tuple(taus)
    if any(not 0.0 <= t <= 1.0 for t in taus):
        raise ValueError("thresholds must lie in [0, 1]")
    truth_label_maps = [label_components(t, connectivity) for t in truths]
    rows = []
    for tau in sorted(taus):
        vc, dc = pooled_counts(
            probs,
            truth_label_maps,
            truths,
            tau,
            connectivity=connectivity,
            min_overlap_fraction=min_overlap_fraction,
            min_lesion_size=min_lesion_size,
        )
        det = {key: dc.bin_rates(key) for key in ("all", *DETECTION_BINS)}
        rows.append(CurveRow(tau=float(tau), vox=rates(vc.tp, vc.fp, vc.fn), det=det))
    return rows


def operating_report(rows: list[CurveRow]) -> OperatingReport:
    """Argmax thresholds for voxel F1 and all-lesion detection F1 (ties break
    to the smallest tau), their gap, and max-min simultaneous F1."""
    if not rows:
        raise ValueError("empty curve")
    vox_f1 = np.array([r.vox.f1 for r in rows])
    det_f1 = np.array([r.det["all"].f1 for r in rows])
    i_seg = int(np.argmax(vox_f1))  # argmax returns the first (smallest tau) maximum
    i_det = int(np.argmax(det_f1))
    sim = np.minimum(vox_f1, det_f1)
    i_star = int(np.argmax(sim))
    return OperatingReport(
        tau_seg=rows[i_seg].tau,
        tau_det=rows[i_det].tau,
        gap=abs(rows[i_det].tau - rows[i_seg].tau),
        f1_seg=float(vox_f1[i_seg]),
        f1_det=float(det_f1[i_det]),
        simultaneous_f1=float(sim[i_star]),
        tau_star=rows[i_star].tau,
    )


CURVE_CSV_COLUMNS = ["tau", "vox_tpr", "vox_fdr", "vox_f1"] + [
    f"det_{m}_{b}" for b in ("all", "small", "medium", "large") for m in ("tpr", "fdr", "f1")
]


def write_curves_csv(path, rows: list[CurveRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_CSV_COLUMNS)
        for r in rows:
            record = [repr(r.tau), repr(r.vox.tpr), repr(r.vox.fdr), repr(r.vox.f1)]
            for b in ("all", "small", "medium", "large"):
                record += [repr(r.det[b].tpr), repr(r.det[b].fdr), repr(r.det[b].f1)]
            writer.writerow(record)
