"""Detection evaluation: AP at IoU 0.5, base/novel mAP and confusion matrices."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .boxes import Box, BoxError, iou, iou_matrix
from .data import AnnotationParseError, ClassSplit, Dataset

logger = logging.getLogger(__name__)

__all__ = [
    "Detection",
    "EvalReport",
    "average_precision",
    "confusion_matrix",
    "evaluate",
    "iou",
    "mean_confusion",
    "nms",
]


class UndefinedAPWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Detection:
    scene_id: str
    class_id: int
    score: float
    box: Box

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    scene_id: str
    class_id: int
    box: Box


def ground_truth(dataset: Dataset) -> list[GroundTruth]:
    return [GroundTruth(s.scene_id, o.class_id, o.box) for s in dataset.scenes for o in s.objects]


def _score_order(dets: Sequence[Detection]) -> np.ndarray:
    # stable: equal scores keep their input order
    return np.argsort(-np.array([d.score for d in dets], dtype=np.float64), kind="stable")


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = 0.5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy score-ordered matching of same-class detections to ground truth.

    Each detection takes the highest-IoU unmatched ground truth in its scene
    when that IoU reaches ``iou_thresh``. Returns (order, tp flags in that
    order, gt index matched per ordered detection or -1).
    """
    order = _score_order(dets)
    by_scene: dict[str, list[int]] = {}
    for gi, g in enumerate(gts):
        by_scene.setdefault(g.scene_id, []).append(gi)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    matched = np.full(len(order), -1, dtype=np.int64)
    for rank, di in enumerate(order):
        d = dets[di]
        best, best_iou = -1, iou_thresh
        for gi in by_scene.get(d.scene_id, ()):
            if used[gi]:
                continue
            o = iou(d.box, gts[gi].box)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = gi, o
        if best >= 0:
            used[best] = True
            tp[rank] = True
            matched[rank] = best
    return order, tp, matched


def pr_curve(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp_cum = np.cumsum(tp.astype(np.float64))
    fp_cum = np.cumsum((~tp).astype(np.float64))
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-300)
    return recall, precision


def ap_from_pr(recall: np.ndarray, precision: np.ndarray, interp: str = "allpoint") -> float:
    if interp == "11point":
        return float(
            np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0 for t in np.linspace(0, 1, 11)])
        )
    if interp != "allpoint":
        raise ValueError(f"unknown interpolation {interp!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresh: float = 0.5,
    interp: str = "allpoint",
) -> float | None:
    """AP for one class. Returns ``None`` (with a warning) when there is no ground truth."""
    if not gts:
        warnings.warn("class has no ground-truth instances; AP undefined", UndefinedAPWarning, stacklevel=2)
        return None
    if not dets:
        return 0.0
    _, tp, _ = match_detections(dets, gts, iou_thresh)
    recall, precision = pr_curve(tp, len(gts))
    return ap_from_pr(recall, precision, interp)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    order = list(np.argsort(-np.asarray(scores), kind="stable"))
    keep: list[int] = []
    boxes = np.asarray(boxes, dtype=np.float64)
    while order:
        i = order.pop(0)
        keep.append(int(i))
        if not order:
            break
        ov = iou_matrix(boxes[i], boxes[order])[0]
        order = [j for j, o in zip(order, ov) if o <= iou_thresh]
    return keep


# --- confusion -----------------------------------------------------------


def confusion_labels(split: ClassSplit) -> tuple[list[str], list[str]]:
    rows = list(split.classes) + ["background", "background_fp"]
    cols = list(split.classes) + ["background", "missed"]
    return rows, cols


def confusion_matrix(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    num_classes: int,
    score_thresh: float = 0.5,
    iou_thresh: float = 0.5,
) -> np.ndarray:
    """Class-agnostic greedy matching of confident detections to ground truth.

    Layout is ``(C + 2) x (C + 2)``: foreground classes, then background,
    then an extra slot. A matched pair counts at ``[gt, pred]``; an
    unmatched detection at ``[C + 1, pred]`` (background false positive);
    an unmatched ground truth at ``[gt, C + 1]`` (missed).
    """
    extra = num_classes + 1
    mat = np.zeros((num_classes + 2, num_classes + 2), dtype=np.int64)
    kept = [d for d in dets if d.score >= score_thresh]
    order = _score_order(kept)
    by_scene: dict[str, list[int]] = {}
    for gi, g in enumerate(gts):
        by_scene.setdefault(g.scene_id, []).append(gi)
    used = np.zeros(len(gts), dtype=bool)
    for di in order:
        d = kept[di]
        best, best_iou = -1, iou_thresh
        for gi in by_scene.get(d.scene_id, ()):
            if used[gi]:
                continue
            o = iou(d.box, gts[gi].box)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = gi, o
        if best >= 0:
            used[best] = True
            mat[gts[best].class_id, d.class_id] += 1
        else:
            mat[extra, d.class_id] += 1
    for gi in np.flatnonzero(~used):
        mat[gts[gi].class_id, extra] += 1
    return mat


def mean_confusion(matrix: np.ndarray) -> float | None:
    """Mean over ground-truth classes of the off-diagonal share of matched detections, in percent.

    Only foreground columns count (missed and background-FP cells are
    excluded). Returns ``None`` when nothing was matched at all.
    """
    C = matrix.shape[0] - 2
    fg = np.asarray(matrix, dtype=np.float64)[:C, :C]
    rates = []
    for c in range(C):
        total = fg[c].sum()
        if total > 0:
            rates.append((total - fg[c, c]) / total)
    if not rates:
        return None
    return 100.0 * float(np.mean(rates))


def normalize_confusion(matrix: np.ndarray, over: str) -> np.ndarray:
    """Row-normalise foreground rows over matched detections or over all ground truth."""
    C = matrix.shape[0] - 2
    m = np.asarray(matrix, dtype=np.float64)
    out = np.zeros_like(m)
    for c in range(C):
        denom = m[c, :C].sum() if over == "matched" else m[c].sum()
        if denom > 0:
            out[c] = m[c] / denom
            if over == "matched":
                out[c, C:] = 0.0
    return out


# --- full report ---------------------------------------------------------


@dataclass
class EvalReport:
    split: ClassSplit
    per_class_ap: dict[str, float | None]
    mAP_all: float | None
    mAP_base: float | None
    mAP_novel: float | None
    confusion: np.ndarray
    mean_confusion: float | None
    interp: str = "allpoint"
    pr_points: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        rows, cols = confusion_labels(self.split)
        return {
            "split": self.split.name,
            "interp": self.interp,
            "per_class_ap": self.per_class_ap,
            "mAP_all": self.mAP_all,
            "mAP_base": self.mAP_base,
            "mAP_novel": self.mAP_novel,
            "mean_confusion": self.mean_confusion,
            "confusion": {"rows": rows, "cols": cols, "counts": self.confusion.tolist()},
        }

    def write(self, out_dir: str | Path, prefix: str = "") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{prefix}report.json"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        rows, cols = confusion_labels(self.split)
        for name, mat, fmt in (
            ("confusion.csv", self.confusion, "{:d}"),
            ("confusion_norm_matched.csv", normalize_confusion(self.confusion, "matched"), "{:.6f}"),
            ("confusion_norm_gt.csv", normalize_confusion(self.confusion, "gt"), "{:.6f}"),
        ):
            p = out / f"{prefix}{name}"
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["gt\\pred"] + cols)
                for label, row in zip(rows, mat):
                    w.writerow([label] + [fmt.format(int(v) if fmt == "{:d}" else float(v)) for v in row])
            paths.append(p)
        p = out / f"{prefix}pr_points.csv"
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "rank", "recall", "precision"])
            for cname, (rec, prec) in self.pr_points.items():
                for k, (r, q) in enumerate(zip(rec, prec), start=1):
                    w.writerow([cname, k, f"{r:.10f}", f"{q:.10f}"])
        paths.append(p)
        return paths


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth] | Dataset,
    split: ClassSplit,
    iou_thresh: float = 0.5,
    interp: str = "allpoint",
    confusion_score: float = 0.5,
) -> EvalReport:
    if isinstance(gts, Dataset):
        gts = ground_truth(gts)
    C = split.num_classes
    for d in dets:
        if not 0 <= d.class_id < C:
            raise ValueError(f"detection class id {d.class_id} outside split {split.name}")
    per_class: dict[str, float | None] = {}
    pr: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for c, name in enumerate(split.classes):
        cd = [d for d in dets if d.class_id == c]
        cg = [g for g in gts if g.class_id == c]
        if not cg:
            logger.warning("class %s has no ground truth; excluded from mAP", name)
            per_class[name] = None
            continue
        if cd:
            _, tp, _ = match_detections(cd, cg, iou_thresh)
            rec, prec = pr_curve(tp, len(cg))
            per_class[name] = ap_from_pr(rec, prec, interp)
            pr[name] = (rec, prec)
        else:
            per_class[name] = 0.0
    conf = confusion_matrix(dets, gts, C, confusion_score, iou_thresh)
    return EvalReport(
        split=split,
        per_class_ap=per_class,
        mAP_all=_mean(per_class.values()),
        mAP_base=_mean(per_class[n] for n in split.base_classes),
        mAP_novel=_mean(per_class[n] for n in split.novel_classes),
        confusion=conf,
        mean_confusion=mean_confusion(conf),
        interp=interp,
        pr_points=pr,
    )


# --- detections files ----------------------------------------------------


def write_detections(dets: Sequence[Detection], split: ClassSplit, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in dets:
            rec = {"scene_id": d.scene_id, "class": split.classes[d.class_id], "score": d.score, "bbox": d.box.as_list()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detections(path: str | Path, split: ClassSplit) -> list[Detection]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Detection(str(rec["scene_id"]), split.index_of(rec["class"]), float(rec["score"]), Box.from_seq(rec["bbox"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, BoxError) as exc:
                raise AnnotationParseError(f"{path}: line {lineno}: {exc}") from None
    return out
