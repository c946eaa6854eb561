"""Precision/recall/F1, ROC-AUC and per-category breakdowns."""

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedMetricError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def num_classes(self):
        return len(self.tp)

    @property
    def total(self):
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])


def confusion(pred, truth, num_classes: Optional[int] = None) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ContractError(f"confusion: {pred.size} predictions vs {truth.size} labels")
    if pred.size == 0:
        raise ContractError("confusion: empty input")
    C = int(num_classes if num_classes is not None else max(pred.max(), truth.max()) + 1)
    M = np.zeros((C, C), np.int64)  # rows truth, cols prediction
    np.add.at(M, (truth, pred), 1)
    tp = np.diag(M).copy()
    fp = M.sum(axis=0) - tp
    fn = M.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _div(a, b):
    return float(a) / float(b) if b else 0.0


def prf1(counts: ConfusionCounts, cls: int):
    """``(precision, recall, f1)`` with 0/0 taken as 0."""
    tp, fp, fn = counts.tp[cls], counts.fp[cls], counts.fn[cls]
    p = _div(tp, tp + fp)
    r = _div(tp, tp + fn)
    f = _div(2 * p * r, p + r)
    return p, r, f


def roc_auc(scores, truth) -> float:
    """Mann-Whitney AUC by midrank summation; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both positive and negative examples")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ClassScores:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    classes: List[ClassScores]
    accuracy: float
    macro: Dict[str, float]
    weighted: Dict[str, float]
    auc: Optional[float] = None
    positive_class: Optional[str] = None
    n: int = 0
    harm_ratio: Optional[float] = None
    by_category: Dict[str, "EvalReport"] = field(default_factory=dict)

    def scores_for(self, name):
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def headline(self):
        """P, R, F-1 of the positive class (or macro) plus AUC."""
        if self.positive_class is not None:
            c = self.scores_for(self.positive_class)
            return {"P": c.precision, "R": c.recall, "F-1": c.f1, "AUC": self.auc}
        return {"P": self.macro["precision"], "R": self.macro["recall"], "F-1": self.macro["f1"],
                "AUC": self.auc}

    def to_dict(self):
        d = {
            "n": self.n,
            "accuracy": self.accuracy,
            "classes": [asdict(c) for c in self.classes],
            "macro": self.macro,
            "weighted": self.weighted,
            "auc": self.auc,
            "positive_class": self.positive_class,
        }
        if self.harm_ratio is not None:
            d["harm_ratio"] = self.harm_ratio
        if self.by_category:
            d["by_category"] = {k: v.to_dict() for k, v in self.by_category.items()}
        return d

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_table(self, title="all") -> str:
        """Aligned text table; columns P, R, F-1, AUC (percentages)."""
        rows = [(title, self)]
        rows += sorted(self.by_category.items(), key=lambda kv: -kv[1].headline()["F-1"])
        extra = bool(self.by_category)
        head = f"{'group':<28} {'P':>6} {'R':>6} {'F-1':>6} {'AUC':>6} {'Acc':>6}"
        if extra:
            head += f" {'harm%':>6} {'n':>6}"
        lines = [head, "-" * len(head)]
        for name, rep in rows:
            h = rep.headline()
            auc = "-" if h["AUC"] is None else f"{100 * h['AUC']:.1f}"
            line = (f"{name:<28} {100 * h['P']:>6.1f} {100 * h['R']:>6.1f} {100 * h['F-1']:>6.1f} "
                    f"{auc:>6} {100 * rep.accuracy:>6.1f}")
            if extra:
                hr = "-" if rep.harm_ratio is None else f"{100 * rep.harm_ratio:.1f}"
                line += f" {hr:>6} {rep.n:>6}"
            lines.append(line)
        return "\n".join(lines)


def evaluate(pred, truth, class_names: Sequence[str], scores=None,
             positive_class: Optional[str] = None) -> EvalReport:
    """Full report. ``scores`` is an ``[N, C]`` probability matrix (for AUC)."""
    C = len(class_names)
    counts = confusion(pred, truth, C)
    per = []
    for k, name in enumerate(class_names):
        p, r, f = prf1(counts, k)
        per.append(ClassScores(name, p, r, f, int(counts.tp[k] + counts.fn[k])))
    support = np.array([c.support for c in per], float)
    macro = {m: float(np.mean([getattr(c, m) for c in per])) for m in ("precision", "recall", "f1")}
    weighted = {
        m: float(np.dot([getattr(c, m) for c in per], support) / support.sum())
        for m in ("precision", "recall", "f1")
    }
    truth = np.asarray(truth)
    acc = float((np.asarray(pred) == truth).mean())
    auc = None
    if scores is not None and (C == 2 or positive_class is not None):
        pos = class_names.index(positive_class) if positive_class is not None else 1
        try:
            auc = roc_auc(np.asarray(scores)[:, pos], truth == pos)
        except UndefinedMetricError:
            auc = None
    harm_ratio = None
    if positive_class is not None:
        harm_ratio = float((truth == class_names.index(positive_class)).mean())
    return EvalReport(per, acc, macro, weighted, auc, positive_class, int(truth.size), harm_ratio)


def per_category_report(categories: Sequence[Optional[str]], pred, truth, class_names,
                        scores=None, positive_class: Optional[str] = "harm") -> Dict[str, EvalReport]:
    """Score each category group independently.

    Groups holding a single class get ``auc=None``; P/R/F1 are still given.
    Each report carries the group's harm ratio.
    """
    cats = np.array(["<none>" if c is None else c for c in categories], dtype=object)
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if positive_class is not None and positive_class not in class_names:
        positive_class = None
    out = {}
    for cat in sorted(set(cats)):
        sel = cats == cat
        sc = None if scores is None else np.asarray(scores)[sel]
        out[cat] = evaluate(pred[sel], truth[sel], class_names, sc, positive_class)
    return out
