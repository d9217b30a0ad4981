"""Threshold-free evaluation: AUC, partial AUC and harmonic-mean scores.

Anomalies are the positive class; a higher score means more anomalous.
Ties get half credit everywhere, so the pairwise AUC and the area under the
tie-aware ROC are the same number.  Areas are accumulated in exact rational
arithmetic and rounded once.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


def _check(normals, anomalies):
    normals = np.asarray(normals, dtype=np.float64).ravel()
    anomalies = np.asarray(anomalies, dtype=np.float64).ravel()
    if normals.size == 0 or anomalies.size == 0:
        raise ValueError("AUC needs at least one normal and one anomalous score")
    if not (np.all(np.isfinite(normals)) and np.all(np.isfinite(anomalies))):
        raise ValueError("scores must be finite")
    return normals, anomalies


def _pair_credit(normals, anomalies) -> int:
    """Twice the Mann-Whitney U: 2 per anomaly above a normal, 1 per tie."""
    ns = np.sort(normals)
    below = np.searchsorted(ns, anomalies, side="left")
    not_above = np.searchsorted(ns, anomalies, side="right")
    return int(below.sum()) + int(not_above.sum())


def auc(normals, anomalies) -> float:
    normals, anomalies = _check(normals, anomalies)
    return _pair_credit(normals, anomalies) / (2 * normals.size * anomalies.size)


def _roc_counts(normals, anomalies):
    """ROC vertices as integer (false-positive, true-positive) counts.

    Thresholds sweep from high to low; tied scores move both counts at once,
    which gives the diagonal segment of the tie-aware ROC.
    """
    scores = np.concatenate([anomalies, normals])
    is_pos = np.concatenate([np.ones(anomalies.size, int), np.zeros(normals.size, int)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    cut = np.flatnonzero(np.diff(scores)) + 1
    tp = np.concatenate([[0], np.cumsum(is_pos)[np.append(cut, scores.size) - 1]])
    fp = np.concatenate([[0], np.cumsum(1 - is_pos)[np.append(cut, scores.size) - 1]])
    return fp, tp


def partial_area(normals, anomalies, p: float) -> Fraction:
    """Un-normalised ROC area over FPR in [0, p], exact."""
    normals, anomalies = _check(normals, anomalies)
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    n, m = normals.size, anomalies.size
    fp, tp = _roc_counts(normals, anomalies)
    limit = Fraction(p) * n  # in false-positive count units
    area = Fraction(0)
    for i in range(1, len(fp)):
        x0, x1, y0, y1 = int(fp[i - 1]), int(fp[i]), int(tp[i - 1]), int(tp[i])
        if x0 >= limit:
            break
        if x1 == x0:
            continue
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / Fraction(2)
    return area / (n * m)


def pauc(normals, anomalies, p: float = 0.1, mcclish: bool = False) -> float:
    """ROC area over FPR in [0, p] divided by p.

    With ``mcclish`` the McClish standardisation ``0.5 * (1 + (A - Amin) /
    (Amax - Amin))`` is returned instead, with Amin = p^2/2 and Amax = p.
    """
    area = partial_area(normals, anomalies, p)
    pf = Fraction(p)
    if mcclish:
        amin, amax = pf * pf / 2, pf
        return float(Fraction(1, 2) * (1 + (area - amin) / (amax - amin)))
    return float(area / pf)


def hmean(values) -> float:
    values = [float(v) for v in values]
    if not values:
        raise ValueError("harmonic mean of nothing")
    if any(not v > 0 for v in values):
        raise ValueError("harmonic mean needs strictly positive values")
    return len(values) / sum(1.0 / v for v in values)


@dataclass
class LabeledScore:
    score: float
    label: str  # "normal" | "anomaly"
    domain: str  # "source" | "target"
    machine: str
    clip_id: str = ""


def domain_auc(scores: list[LabeledScore], domain: str) -> float:
    """Domain-``domain`` normals against every anomaly (both domains)."""
    normals = [s.score for s in scores if s.label == "normal" and s.domain == domain]
    anomalies = [s.score for s in scores if s.label == "anomaly"]
    if not normals:
        raise ValueError(f"no {domain}-domain normal clips")
    if not anomalies:
        raise ValueError("no anomalous clips")
    return auc(normals, anomalies)


@dataclass
class MachineReport:
    machine: str
    auc_source: float
    auc_target: float
    pauc: float

    @property
    def values(self):
        return (self.auc_source, self.auc_target, self.pauc)

    @property
    def hmean(self) -> float:
        return _safe_hmean(self.values)


def _safe_hmean(values) -> float:
    return 0.0 if any(v <= 0 for v in values) else hmean(values)


def official_score(reports: list[MachineReport]) -> float:
    if not reports:
        raise ValueError("no machine reports")
    flat = []
    for r in reports:
        if any(v is None for v in r.values):
            raise ValueError(f"machine {r.machine} lacks a metric")
        flat.extend(r.values)
    return _safe_hmean(flat)


@dataclass
class EvalReport:
    machines: list[MachineReport] = field(default_factory=list)
    p: float = 0.1
    mcclish: bool = False

    @property
    def official(self) -> float:
        return official_score(self.machines)

    def subset(self, names) -> "EvalReport":
        names = set(names)
        return EvalReport([m for m in self.machines if m.machine in names], self.p, self.mcclish)

    def rows(self):
        for m in self.machines:
            yield m.machine, m.auc_source, m.auc_target, m.pauc, m.hmean
        yield "ALL", None, None, None, self.official

    def to_text(self) -> str:
        head = f"{'machine':<16}{'AUC_src':>10}{'AUC_tgt':>10}{'pAUC':>10}{'hmean':>10}"
        lines = [head, "-" * len(head)]
        for name, a, b, c, h in self.rows():
            cells = ["" if v is None else f"{100 * v:.2f}" for v in (a, b, c, h)]
            lines.append(f"{name:<16}" + "".join(f"{x:>10}" for x in cells))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["machine", "auc_source", "auc_target", "pauc", "hmean"])
        for name, *vals in self.rows():
            w.writerow([name] + ["" if v is None else f"{100 * v:.2f}" for v in vals])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        out = []
        for name, a, b, c, h in self.rows():
            out.append(json.dumps({"machine": name, "auc_source": a, "auc_target": b,
                                   "pauc": c, "hmean": h}))
        return "\n".join(out) + "\n"


def evaluate(scores: list[LabeledScore], p: float = 0.1, mcclish: bool = False) -> EvalReport:
    by_machine: dict[str, list[LabeledScore]] = defaultdict(list)
    for s in scores:
        if s.label not in ("normal", "anomaly"):
            raise ValueError(f"clip {s.clip_id or '?'} has no normal/anomaly label")
        by_machine[s.machine].append(s)
    reports = []
    for machine in sorted(by_machine):
        rows = by_machine[machine]
        normals = [s.score for s in rows if s.label == "normal"]
        anomalies = [s.score for s in rows if s.label == "anomaly"]
        reports.append(MachineReport(
            machine,
            domain_auc(rows, "source"),
            domain_auc(rows, "target"),
            pauc(normals, anomalies, p, mcclish),
        ))
    return EvalReport(reports, p, mcclish)
