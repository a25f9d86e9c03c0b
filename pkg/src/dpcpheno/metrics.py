"""Classification, regression and ROC metrics plus the serialisable report."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import CLASS_NAMES, MARKER_NAMES

log = logging.getLogger(__name__)


def _safe_div(num: float, den: float, what: str) -> float:
    if den == 0:
        log.warning("%s is 0/0; reported as 0", what)
        return 0.0
    return num / den


def confusion_matrix(pred_labels, true_labels, n_classes: int = 3) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_labels), np.asarray(pred_labels)), 1)
    return cm


def classification_metrics(pred_labels, true_labels, n_classes: int = 3) -> dict:
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.size == 0 or pred.shape != true.shape:
        raise ValueError("classification_metrics needs equal-length, non-empty label vectors")
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    cm = confusion_matrix(pred, true, n_classes)
    tp = np.diag(cm).astype(np.float64)
    precision, recall, f1 = [], [], []
    for c in range(n_classes):
        p = _safe_div(tp[c], cm[:, c].sum(), f"precision of class {c}")
        r = _safe_div(tp[c], cm[c, :].sum(), f"recall of class {c}")
        precision.append(p)
        recall.append(r)
        f1.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    return {
        "accuracy": float(tp.sum() / cm.sum()),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "macro_precision": float(np.mean(precision)),
        "macro_recall": float(np.mean(recall)),
        "macro_f1": float(np.mean(f1)),
        "confusion": cm.tolist(),
    }


def regression_metrics(pred, target) -> dict:
    """Pearson r, concordance correlation, RMSE and MAE with population moments."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size < 2:
        raise ValueError("regression_metrics needs two equal-length vectors with N >= 2")
    err = p - t
    mp, mt = p.mean(), t.mean()
    vp, vt = p.var(), t.var()
    cov = ((p - mp) * (t - mt)).mean()
    degenerate = vp == 0 or vt == 0
    if degenerate:
        r = ccc = 0.0
    else:
        r = float(np.clip(cov / np.sqrt(vp * vt), -1.0, 1.0))
        ccc = float(2 * cov / (vp + vt + (mp - mt) ** 2))
    return {
        "pearson_r": r,
        "ccc": ccc,
        "rmse": float(np.sqrt((err * err).mean())),
        "mae": float(np.abs(err).mean()),
        "degenerate": bool(degenerate),
    }


def auc_rank(scores, positives) -> float | None:
    """Mann-Whitney AUC with ties counted one half; None if a class is missing."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n1 = int(pos.sum())
    n0 = pos.size - n1
    if n1 == 0 or n0 == 0:
        return None
    ranks = rankdata(s)  # average ranks: ties share (2 * rank) integers
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_points(scores, positives) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) sweeping thresholds over distinct scores, highest first.

    A sample counts as positive-predicted when ``score >= threshold``; the
    first point is (0, 0, +inf).
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n1 = max(int(pos.sum()), 1)
    n0 = max(int((~pos).sum()), 1)
    pts = [(0.0, 0.0, float("inf"))]
    for thr in np.unique(s)[::-1]:
        sel = s >= thr
        pts.append((float((sel & ~pos).sum() / n0), float((sel & pos).sum() / n1), float(thr)))
    return pts


def roc_auc_ovr(cls_probs, true_labels, n_classes: int = 3) -> dict:
    probs = np.asarray(cls_probs, dtype=np.float64)
    true = np.asarray(true_labels)
    out = {"auc": [], "points": [], "degenerate": []}
    for c in range(n_classes):
        positives = true == c
        auc = auc_rank(probs[:, c], positives)
        out["auc"].append(auc)
        out["degenerate"].append(auc is None)
        out["points"].append(roc_points(probs[:, c], positives))
    return out


def per_marker_report(pred, target, names=MARKER_NAMES) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim != 2 or pred.shape != target.shape or pred.shape[1] != len(names):
        raise ValueError("per_marker_report: pred/target must be [N, n_markers] and match names")
    rows = []
    for j, name in enumerate(names):
        rows.append({"marker": name, **regression_metrics(pred[:, j], target[:, j])})
    keys = ("rmse", "mae", "pearson_r", "ccc")
    mean_row = {"marker": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in keys}}
    return {"rows": rows, "mean": mean_row}


@dataclass
class EvalReport:
    n_samples: int
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    marker_names: list[str] = field(default_factory=lambda: list(MARKER_NAMES))
    classification: dict | None = None
    roc: dict | None = None
    regression: dict | None = None

    @property
    def accuracy(self) -> float | None:
        return None if self.classification is None else self.classification["accuracy"]

    @property
    def mean_r(self) -> float | None:
        return None if self.regression is None else self.regression["mean"]["pearson_r"]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def write(self, out_dir) -> list[Path]:
        """Report JSON plus one flat CSV per table and per ROC curve."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json"]
        written[0].write_text(self.to_json() + "\n", encoding="utf-8")
        if self.classification is not None:
            c = self.classification
            rows = [[name, c["precision"][i], c["recall"][i], c["f1"][i],
                     int(np.sum(c["confusion"][i]))] for i, name in enumerate(self.class_names)]
            rows.append(["Macro Avg.", c["macro_precision"], c["macro_recall"], c["macro_f1"], self.n_samples])
            written.append(_write_csv(out / "classification.csv", ["class", "precision", "recall", "f1", "support"], rows))
            cm_rows = [[name] + list(c["confusion"][i]) for i, name in enumerate(self.class_names)]
            written.append(_write_csv(out / "confusion.csv", ["true\\pred"] + self.class_names, cm_rows))
        if self.roc is not None:
            for i, name in enumerate(self.class_names):
                pts = [[f, t, "inf" if np.isinf(th) else th] for f, t, th in self.roc["points"][i]]
                written.append(_write_csv(out / f"roc_{name.lower()}.csv", ["fpr", "tpr", "threshold"], pts))
            written.append(_write_csv(out / "auc.csv", ["class", "auc"],
                                      [[n, "" if a is None else a] for n, a in zip(self.class_names, self.roc["auc"])]))
        if self.regression is not None:
            keys = ["rmse", "mae", "pearson_r", "ccc"]
            rows = [[r["marker"]] + [r[k] for k in keys] for r in self.regression["rows"]]
            rows.append(["mean"] + [self.regression["mean"][k] for k in keys])
            written.append(_write_csv(out / "per_marker.csv", ["marker"] + keys, rows))
        return written


def build_report(cls_probs=None, true_labels=None, reg_pred=None, reg_target=None,
                 class_names=CLASS_NAMES, marker_names=MARKER_NAMES) -> EvalReport:
    n = len(true_labels) if true_labels is not None else len(reg_target)
    report = EvalReport(n_samples=int(n), class_names=list(class_names), marker_names=list(marker_names))
    if cls_probs is not None:
        probs = np.asarray(cls_probs)
        report.classification = classification_metrics(probs.argmax(axis=1), true_labels, len(class_names))
        report.roc = roc_auc_ovr(probs, true_labels, len(class_names))
    if reg_pred is not None:
        report.regression = per_marker_report(reg_pred, reg_target, marker_names)
    return report


def _write_csv(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj
