"""Detection matching, precision/recall, average precision and colour histograms."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from simdet.detloss import Detection
from simdet.errors import InvalidInputError, ParseError
from simdet.geometry import BBox, pairwise_iou
from simdet.synthdata.io import read_ppm

DEFAULT_IOU = 0.5
EVAL_CONF_FLOOR = 0.005

GroundTruth = tuple[int, BBox]


@dataclass
class MatchResult:
    """Per-class ``(confidence, is_tp)`` records in processing order, plus gt counts."""

    records: dict[int, list[tuple[float, bool]]] = field(default_factory=dict)
    gt_counts: dict[int, int] = field(default_factory=dict)

    def extend(self, other: "MatchResult") -> None:
        for cls, recs in other.records.items():
            self.records.setdefault(cls, []).extend(recs)
        for cls, n in other.gt_counts.items():
            self.gt_counts[cls] = self.gt_counts.get(cls, 0) + n

    def tp_count(self, cls: int) -> int:
        return sum(tp for _, tp in self.records.get(cls, []))


@dataclass
class APReport:
    per_class: dict[int, float]
    mAP: float
    iou_threshold: float
    conf_threshold: float
    gt_counts: dict[int, int] = field(default_factory=dict)
    curves: dict[int, list[tuple[float, float]]] = field(default_factory=dict, repr=False)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = DEFAULT_IOU) -> MatchResult:
    """Greedy matching for one image, highest confidence first (ties keep input order).

    A detection is a true positive when the best-overlapping still-unmatched
    ground truth of its class reaches ``iou_thresh``; that ground truth is
    then consumed.
    """
    if not 0 < iou_thresh <= 1:
        raise InvalidInputError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    result = MatchResult()
    for cls, _ in gts:
        result.gt_counts[cls] = result.gt_counts.get(cls, 0) + 1
    if not dets:
        return result
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)  # stable
    gt_cls = np.array([c for c, _ in gts], dtype=np.int64)
    ious = (
        pairwise_iou(np.array([d.box.as_array() for d in dets]), np.array([b.as_array() for _, b in gts]))
        if gts
        else np.zeros((len(dets), 0))
    )
    used = np.zeros(len(gts), dtype=bool)
    for i in order:
        det = dets[i]
        tp = False
        if gts:
            cand = np.where((gt_cls == det.cls) & ~used, ious[i], -1.0)
            j = int(np.argmax(cand))
            if cand[j] >= iou_thresh:
                used[j] = True
                tp = True
        result.records.setdefault(det.cls, []).append((det.confidence, tp))
    return result


def pr_points(records: Sequence[tuple[float, bool]], gt_count: int) -> list[tuple[float, float]]:
    """``(recall, precision)`` at every distinct confidence cutoff, loosest last.

    Records must already be in processing order (descending confidence).
    Tied confidences form a single cutoff.
    """
    points = []
    tp = 0
    for k, (conf, is_tp) in enumerate(records):
        tp += is_tp
        if k + 1 == len(records) or records[k + 1][0] != conf:
            points.append((tp / gt_count, tp / (k + 1)))
    return points


def average_precision(records: Sequence[tuple[float, bool]], gt_count: int) -> float:
    """All-point interpolated AP: area under the non-increasing precision envelope."""
    if gt_count <= 0:
        return 0.0
    points = pr_points(records, gt_count)
    envelope = []
    best = 0.0
    for _, p in reversed(points):
        best = max(best, p)
        envelope.append(best)
    envelope.reverse()
    ap = 0.0
    prev = 0.0
    for (r, _), p in zip(points, envelope):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return ap


def _pooled(per_image_dets, per_image_gts, iou_thresh: float, conf_thresh: float) -> MatchResult:
    if len(per_image_dets) != len(per_image_gts):
        raise InvalidInputError(f"{len(per_image_dets)} detection lists vs {len(per_image_gts)} ground-truth lists")
    pooled = MatchResult()
    tagged: dict[int, list[tuple[float, int, bool]]] = {}
    counter = 0
    for dets, gts in zip(per_image_dets, per_image_gts):
        kept = [d for d in dets if d.confidence > conf_thresh]
        res = match_detections(kept, gts, iou_thresh)
        for cls, n in res.gt_counts.items():
            pooled.gt_counts[cls] = pooled.gt_counts.get(cls, 0) + n
        # records come back in per-image processing order; re-key by input
        # position so ties across images resolve by input order
        by_cls: dict[int, list[int]] = {}
        for idx in sorted(range(len(kept)), key=lambda i: -kept[i].confidence):
            by_cls.setdefault(kept[idx].cls, []).append(counter + idx)
        for cls, recs in res.records.items():
            for (conf, tp), pos in zip(recs, by_cls[cls]):
                tagged.setdefault(cls, []).append((conf, pos, tp))
        counter += len(kept)
    for cls, recs in tagged.items():
        recs.sort(key=lambda r: (-r[0], r[1]))
        pooled.records[cls] = [(conf, tp) for conf, _, tp in recs]
    return pooled


def mean_average_precision(
    per_image_dets: Sequence[Sequence[Detection]],
    per_image_gts: Sequence[Sequence[GroundTruth]],
    iou_thresh: float = DEFAULT_IOU,
    K: int | None = None,
    conf_thresh: float = EVAL_CONF_FLOOR,
) -> APReport:
    """Pool detections over images, AP per class, mean over classes that have ground truth."""
    pooled = _pooled(per_image_dets, per_image_gts, iou_thresh, conf_thresh)
    classes = sorted(pooled.gt_counts) if K is None else [c for c in range(K) if pooled.gt_counts.get(c, 0) > 0]
    per_class = {}
    curves = {}
    for cls in classes:
        recs = pooled.records.get(cls, [])
        per_class[cls] = average_precision(recs, pooled.gt_counts[cls])
        curves[cls] = pr_points(recs, pooled.gt_counts[cls])
    m = sum(per_class[c] for c in classes) / len(classes) if classes else 0.0
    return APReport(per_class, m, iou_thresh, conf_thresh, {c: pooled.gt_counts[c] for c in classes}, curves)


# ---------------------------------------------------------------------------
# colour histograms


@dataclass
class ColorHistogram:
    bins: np.ndarray  # (3, 256), each row sums to 1

    def mean_intensity(self) -> np.ndarray:
        """Per-channel mean pixel value in [0, 1]."""
        return self.bins @ (np.arange(256) / 255.0)

    def overall_mean(self) -> float:
        return float(self.mean_intensity().mean())


def image_histogram(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise InvalidInputError("histograms are computed on 8-bit images")
    flat = img.reshape(-1, 3)
    return np.stack([np.bincount(flat[:, c], minlength=256) for c in range(3)]) / flat.shape[0]


def average_color_histogram(image_paths: Iterable) -> ColorHistogram:
    """Per-image normalized 256-bin histograms averaged uniformly over images."""
    paths = [getattr(p, "image", p) for p in image_paths]
    if not paths:
        raise InvalidInputError("average_color_histogram needs at least one image")
    acc = np.zeros((3, 256), dtype=np.float64)
    for path in paths:
        try:
            img = read_ppm(path)
        except (OSError, ValueError) as exc:
            raise OSError(f"cannot read image {path}: {exc}") from exc
        acc += image_histogram(img)
    return ColorHistogram(acc / len(paths))


def earth_movers_distance(a: ColorHistogram, b: ColorHistogram) -> np.ndarray:
    """Per-channel 1-D EMD in units of the full intensity range."""
    return np.abs(np.cumsum(a.bins - b.bins, axis=1)).sum(axis=1) / 255.0


def histogram_csv(hist: ColorHistogram) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin", "r", "g", "b"])
    for i in range(256):
        w.writerow([i, *(repr(float(v)) for v in hist.bins[:, i])])
    return buf.getvalue()


def write_histogram_csv(path, hist: ColorHistogram) -> None:
    Path(path).write_text(histogram_csv(hist), encoding="utf-8", newline="")


def ap_report_csv(report: APReport, class_names: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "ap"])
    for cls, ap in sorted(report.per_class.items()):
        name = class_names[cls] if class_names is not None and cls < len(class_names) else str(cls)
        w.writerow([name, f"{ap:.6f}"])
    w.writerow(["mAP", f"{report.mAP:.6f}"])
    return buf.getvalue()


def write_ap_report(path, report: APReport, class_names: Sequence[str] | None = None) -> None:
    Path(path).write_text(ap_report_csv(report, class_names), encoding="utf-8", newline="")


# ---------------------------------------------------------------------------
# detection files


def write_detections(path, dets: Iterable[Detection]) -> None:
    lines = (f"{d.cls} {d.confidence:.6f} {d.box.cx:.6f} {d.box.cy:.6f} {d.box.w:.6f} {d.box.h:.6f}\n" for d in dets)
    Path(path).write_text("".join(lines), encoding="ascii", newline="\n")


def read_detections(path) -> list[Detection]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ParseError(f"{path}: expected 6 fields, got {len(fields)}", lineno)
        try:
            out.append(Detection(int(fields[0]), BBox(*(float(v) for v in fields[2:])), float(fields[1])))
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", lineno) from exc
    return out
