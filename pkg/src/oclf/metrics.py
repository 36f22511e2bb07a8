"""Confusion matrices, macro-averaged metrics, occlusion ratios and weight sweeps.

REAL is the positive class. Matrices use the layout ``[[TP, FN], [FP, TN]]``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

from .errors import InvalidInput
from .facepatch import PatchName
from .fusion import FusionResult, PatchWeights, Path3, fuse_three, majority_vote
from .labels import BinaryLabel

REAL, FAKE = BinaryLabel.REAL, BinaryLabel.FAKE

# column order of the per-patch weight tables
SWEEP_PATCH_ORDER = (
    PatchName.LEFT_EYE,
    PatchName.RIGHT_EYE,
    PatchName.LEFT_CHEEK,
    PatchName.RIGHT_CHEEK,
    PatchName.CHIN,
    PatchName.MOUTH,
    PatchName.NOSE,
)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fn", "fp", "tn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise InvalidInput(f"{name} must be a non-negative count, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def as_rows(self) -> List[List[int]]:
        return [[self.tp, self.fn], [self.fp, self.tn]]

    @classmethod
    def from_rows(cls, rows) -> "ConfusionMatrix":
        (tp, fn), (fp, tn) = rows
        return cls(tp, fn, fp, tn)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f: float
    confusion: ConfusionMatrix

    def to_dict(self, ndigits: Optional[int] = 2) -> dict:
        r = (lambda v: round(v, ndigits)) if ndigits is not None else (lambda v: v)
        return {
            "accuracy": r(self.accuracy),
            "macro_precision": r(self.macro_precision),
            "macro_recall": r(self.macro_recall),
            "macro_f": r(self.macro_f),
            "confusion": self.confusion.as_rows(),
            "n": self.confusion.total,
        }


def confusion_from_predictions(pred: Sequence, truth: Sequence) -> ConfusionMatrix:
    if len(pred) != len(truth):
        raise InvalidInput(f"{len(pred)} predictions vs {len(truth)} labels")
    if not pred:
        raise InvalidInput("no predictions")
    tp = fn = fp = tn = 0
    for p, t in zip(pred, truth):
        p, t = BinaryLabel.parse(p), BinaryLabel.parse(t)
        if t is REAL:
            tp += p is REAL
            fn += p is FAKE
        else:
            fp += p is REAL
            tn += p is FAKE
    return ConfusionMatrix(tp, fn, fp, tn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus macro P/R/F over {REAL, FAKE}; macro F is the mean of per-class F1."""
    if cm.total <= 0:
        raise InvalidInput("empty confusion matrix")
    prec_real, rec_real = _ratio(cm.tp, cm.tp + cm.fp), _ratio(cm.tp, cm.tp + cm.fn)
    prec_fake, rec_fake = _ratio(cm.tn, cm.tn + cm.fn), _ratio(cm.tn, cm.tn + cm.fp)
    return MetricsReport(
        accuracy=100.0 * (cm.tp + cm.tn) / cm.total,
        macro_precision=100.0 * (prec_real + prec_fake) / 2,
        macro_recall=100.0 * (rec_real + rec_fake) / 2,
        macro_f=100.0 * (_f1(prec_real, rec_real) + _f1(prec_fake, rec_fake)) / 2,
        confusion=cm,
    )


def evaluate_labels(pred: Sequence, truth: Sequence) -> MetricsReport:
    return metrics_from_confusion(confusion_from_predictions(pred, truth))


def accuracy(pred: Sequence, truth: Sequence) -> float:
    return evaluate_labels(pred, truth).accuracy


# --- occlusion --------------------------------------------------------------


def occlusion_ratio(source, split: Optional[str] = None) -> float:
    """Fraction of a split's images that contain occlusion.

    ``source`` is a DatasetManifest (with ``split``) or a sequence of samples /
    records exposing ``is_occluded``.
    """
    if hasattr(source, "records"):
        items = [r for r in source.records if split is None or r.split == split]
        flags = [source.record_is_occluded(r) for r in items]
    else:
        flags = [bool(s.is_occluded) for s in source if split is None or getattr(s, "split", split) == split]
    if not flags:
        raise InvalidInput(f"split {split!r} is empty")
    return sum(flags) / len(flags)


# --- per-patch and sweep ----------------------------------------------------


def per_patch_accuracy(patch_votes: Sequence[Mapping], truth: Sequence) -> Dict[str, float]:
    """Accuracy (%) of each patch's own label over a split.

    ``patch_votes[i]`` maps patch key name to that patch's predicted label for
    sample ``i``. The result is sorted strongest first.
    """
    if len(patch_votes) != len(truth) or not truth:
        raise InvalidInput("patch votes and truth must be equal-length and nonempty")
    hits: Dict[str, int] = {}
    seen: Dict[str, int] = {}
    for votes, t in zip(patch_votes, truth):
        t = BinaryLabel.parse(t)
        for k, v in votes.items():
            k = k.value if isinstance(k, PatchName) else str(k)
            seen[k] = seen.get(k, 0) + 1
            hits[k] = hits.get(k, 0) + (BinaryLabel.parse(v) is t)
    acc = {k: 100.0 * hits[k] / seen[k] for k in seen}
    return dict(sorted(acc.items(), key=lambda kv: (-kv[1], kv[0])))


def per_patch_accuracy_from_results(results: Sequence[FusionResult], truth: Sequence) -> Dict[str, float]:
    votes = []
    for r in results:
        d = r.decisions.get(Path3.PATCH_VOTE)
        if d is None:
            raise InvalidInput(f"result {r.sample_id} has no patch votes")
        prob = d.detail.get("patch_prob_real")
        votes.append({k: (REAL if p >= 0.5 else FAKE) for k, p in prob.items()} if prob else r.patch_votes)
    return per_patch_accuracy(votes, truth)


def _require_full(results: Sequence[FusionResult]):
    for r in results:
        if r.label_of(Path3.WHOLE_FACE) is None or r.label_of(Path3.CONCAT) is None:
            raise InvalidInput(f"result {r.sample_id} lacks a path; sweeps need full-pipeline results")


def reweight(result: FusionResult, weights: PatchWeights):
    """Re-run the vote and 2-of-3 fusion of one full result under new weights."""
    whole = result.label_of(Path3.WHOLE_FACE)
    vote, tie = majority_vote(result.patch_votes, weights, tie_fallback=whole)
    return vote, fuse_three(whole, result.label_of(Path3.CONCAT), vote), tie


def weight_sweep(results: Sequence[FusionResult], truth: Sequence, weight_configs: Sequence[PatchWeights]) -> List[dict]:
    """One table row per weight config: entire face, each patch, vote total, concat, final.

    Weights only move the vote and the final columns; the rest repeat per row.
    """
    if not weight_configs:
        raise InvalidInput("no weight configurations")
    _require_full(results)
    truth = [BinaryLabel.parse(t) for t in truth]
    whole_acc = accuracy([r.label_of(Path3.WHOLE_FACE) for r in results], truth)
    concat_acc = accuracy([r.label_of(Path3.CONCAT) for r in results], truth)
    patch_acc = per_patch_accuracy_from_results(results, truth)
    order = [p.value for p in SWEEP_PATCH_ORDER if p.value in patch_acc] or sorted(patch_acc)
    rows = []
    for w in weight_configs:
        w = w if isinstance(w, PatchWeights) else PatchWeights(w)
        votes, finals = [], []
        for r in results:
            v, f, _ = reweight(r, w)
            votes.append(v)
            finals.append(f)
        row = {"weights": w.label(), "entire_face": whole_acc}
        row.update({k: patch_acc[k] for k in order})
        row.update(
            {
                "total": accuracy(votes, truth),
                "concatenate": concat_acc,
                "final": accuracy(finals, truth),
                "weight_map": w.to_dict(order),
            }
        )
        rows.append(row)
    return rows


# --- serialisation ----------------------------------------------------------


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_confusion_csv(cm: ConfusionMatrix, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["actual\\predicted", "real", "fake"])
        w.writerow(["real", cm.tp, cm.fn])
        w.writerow(["fake", cm.fp, cm.tn])
    return path


def write_sweep_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    cols = [c for c in rows[0] if c != "weight_map"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], str) else f"{row[c]:.2f}" for c in cols])
    return path


def read_weight_configs(path) -> List[PatchWeights]:
    """A JSON list of ``{patch_name: weight}`` objects."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list) or not data or not all(isinstance(d, dict) for d in data):
        raise InvalidInput("weights file must be a nonempty JSON list of objects")
    valid = {p.value for p in PatchName}
    out = []
    for d in data:
        for k in d:
            if k not in valid and k != "default" and "x" not in k:
                raise InvalidInput(f"unknown patch {k!r} in weights file")
        out.append(PatchWeights(d))
    return out
