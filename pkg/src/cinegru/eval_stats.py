"""Patient-grouped folds, pooled AUROC, bootstrap intervals and a paired permutation test."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import rng as rngmod


class UndefinedAUROC(ValueError):
    pass


# ---------------------------------------------------------------- splits


@dataclass
class SplitPlan:
    k: int
    assignment: dict[str, int]
    seed: int

    @property
    def hash(self) -> str:
        blob = json.dumps({"k": self.k, "assignment": self.assignment}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def fold_patients(self, fold: int) -> set[str]:
        return {p for p, f in self.assignment.items() if f == fold}

    def fold_sizes(self) -> list[int]:
        return [sum(1 for f in self.assignment.values() if f == i) for i in range(self.k)]

    def to_json(self) -> str:
        return json.dumps(
            {"k": self.k, "seed": self.seed, "hash": self.hash, "assignment": self.assignment}, indent=2, sort_keys=True
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        plan = cls(int(d["k"]), {str(p): int(f) for p, f in d["assignment"].items()}, int(d["seed"]))
        if "hash" in d and d["hash"] != plan.hash:
            raise ValueError(f"split plan hash mismatch: stored {d['hash']}, recomputed {plan.hash}")
        return plan


def group_kfold(patient_ids: Sequence[str], k: int = 5, seed: int = 0) -> SplitPlan:
    """Seeded shuffle of the unique patients, then round-robin assignment to folds."""
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    patients = sorted(set(patient_ids))
    if len(patients) < k:
        raise ValueError(f"{len(patients)} patients is fewer than {k} folds")
    order = rngmod.stream(seed, "group_kfold").permutation(len(patients))
    return SplitPlan(k, {patients[j]: i % k for i, j in enumerate(order)}, seed)


# ---------------------------------------------------------------- predictions


@dataclass
class PredictionSet:
    series_ids: list[str]
    patient_ids: list[str]
    labels: np.ndarray
    scores: np.ndarray
    model: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.series_ids)
        if not (len(self.patient_ids) == n == len(self.labels) == len(self.scores)):
            raise ValueError("prediction columns have different lengths")
        if len(set(self.series_ids)) != n:
            raise ValueError("duplicate series ids in prediction set")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.series_ids)

    def sorted(self) -> "PredictionSet":
        order = np.argsort(self.series_ids, kind="stable")
        return PredictionSet(
            [self.series_ids[i] for i in order],
            [self.patient_ids[i] for i in order],
            self.labels[order],
            self.scores[order],
            self.model,
            self.provenance,
        )


VAL_COLUMNS = ["series_id", "patient_id", "label", "score"]


def write_val_scores(path: str | Path, rows: Sequence[tuple[str, str, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VAL_COLUMNS)
        for sid, pid, label, score in rows:
            w.writerow([sid, pid, int(label), repr(float(score))])


def read_val_scores(paths: Sequence[str | Path], model: str = "") -> PredictionSet:
    sids, pids, labels, scores = [], [], [], []
    for p in paths:
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != VAL_COLUMNS:
                raise ValueError(f"{p}: expected columns {VAL_COLUMNS}, got {reader.fieldnames}")
            for row in reader:
                sids.append(row["series_id"])
                pids.append(row["patient_id"])
                labels.append(int(row["label"]))
                scores.append(float(row["score"]))
    return PredictionSet(sids, pids, labels, scores, model, {"files": [str(p) for p in paths]})


# ---------------------------------------------------------------- AUROC


def _scores_labels(preds, labels=None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(preds, PredictionSet):
        return preds.scores, preds.labels
    return np.asarray(preds, dtype=np.float64), np.asarray(labels, dtype=int)


def auroc(preds, labels=None) -> float:
    """Mann-Whitney AUROC from rank sums; tied scores count one half."""
    s, y = _scores_labels(preds, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROC("undefined AUROC: only one class present")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _auroc_rows(scores: np.ndarray, y: np.ndarray) -> np.ndarray:
    """AUROC of every row of ``scores[m,n]`` against shared labels."""
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    ranks = rankdata(scores, axis=1)
    u = ranks[:, y == 1].sum(axis=1) - n_pos * (n_pos + 1) / 2
    return u / (n_pos * n_neg)


def auroc_bruteforce(preds, labels=None) -> float:
    """O(P*N) pairwise reference."""
    s, y = _scores_labels(preds, labels)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedAUROC("undefined AUROC: only one class present")
    gt = int((pos[:, None] > neg[None, :]).sum())
    eq = int((pos[:, None] == neg[None, :]).sum())
    return float((gt + 0.5 * eq) / (len(pos) * len(neg)))


def roc_curve(preds, labels=None) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) from (0,0) at threshold +inf to (1,1), one point per distinct score."""
    s, y = _scores_labels(preds, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROC("undefined ROC: only one class present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    curve = [(0.0, 0.0, float("inf"))]
    curve += [(fps[i] / n_neg, tps[i] / n_pos, float(s[i])) for i in last]
    return curve


def trapezoid_area(curve) -> float:
    f = np.array([c[0] for c in curve])
    t = np.array([c[1] for c in curve])
    return float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2))


# ---------------------------------------------------------------- resampling


def bootstrap_ci(
    preds: PredictionSet,
    B: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    unit: str = "series",
    max_retries: int = 100,
) -> tuple[float, float]:
    """Percentile bootstrap interval of the AUROC.

    ``unit="patient"`` resamples patients and keeps all their series.
    Single-class resamples are redrawn.
    """
    if unit not in ("series", "patient"):
        raise ValueError(f"bootstrap unit must be 'series' or 'patient', got {unit!r}")
    s, y = preds.scores, preds.labels
    auroc(s, y)
    if unit == "patient":
        groups: dict[str, list[int]] = {}
        for i, p in enumerate(preds.patient_ids):
            groups.setdefault(p, []).append(i)
        members = [np.array(v) for _, v in sorted(groups.items())]
    n = len(s)
    stats = np.empty(B)
    for b in range(B):
        rng = rngmod.stream(seed, "bootstrap", unit, b)
        for _ in range(max_retries):
            if unit == "series":
                idx = rng.integers(0, n, size=n)
            else:
                pick = rng.integers(0, len(members), size=len(members))
                idx = np.concatenate([members[j] for j in pick])
            yb = y[idx]
            if 0 < yb.sum() < len(yb):
                break
        else:
            raise RuntimeError(f"bootstrap resample {b}: no two-class draw in {max_retries} attempts")
        stats[b] = auroc(s[idx], yb)
    lo, hi = np.quantile(stats, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def align(a: PredictionSet, b: PredictionSet) -> tuple[PredictionSet, PredictionSet]:
    if set(a.series_ids) != set(b.series_ids):
        only_a = sorted(set(a.series_ids) - set(b.series_ids))
        only_b = sorted(set(b.series_ids) - set(a.series_ids))
        raise ValueError(f"series id sets differ: only in A {only_a[:5]}, only in B {only_b[:5]}")
    a, b = a.sorted(), b.sorted()
    if not np.array_equal(a.labels, b.labels):
        raise ValueError("prediction sets disagree on labels")
    return a, b


def perm_test_delta_auroc(
    preds_a: PredictionSet, preds_b: PredictionSet, n_perm: int = 10000, seed: int = 0, chunk: int = 1000
) -> tuple[float, float]:
    """Two-sided paired permutation test of AUROC(A) - AUROC(B).

    Each permutation swaps the two models' scores of every series with
    probability 1/2. Returns ``(delta, p)`` with ``p = (1 + #extreme) / (N + 1)``.
    """
    a, b = align(preds_a, preds_b)
    y = a.labels
    delta = auroc(a.scores, y) - auroc(b.scores, y)
    n = len(y)
    extreme = 0
    tol = 1e-12
    for start in range(0, n_perm, chunk):
        idx = range(start, min(start + chunk, n_perm))
        swap = np.stack([rngmod.stream(seed, "perm", i).random(n) < 0.5 for i in idx])
        sa = np.where(swap, b.scores, a.scores)
        sb = np.where(swap, a.scores, b.scores)
        d = _auroc_rows(sa, y) - _auroc_rows(sb, y)
        extreme += int(np.sum(np.abs(d) >= abs(delta) - tol))
    return float(delta), (1 + extreme) / (n_perm + 1)


# ---------------------------------------------------------------- artifacts


def write_roc_csv(path: str | Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, thr in curve:
            w.writerow([repr(float(f)), repr(float(t)), repr(float(thr))])


def read_roc_csv(path: str | Path) -> list[tuple[float, float, float]]:
    with open(path, newline="") as fh:
        return [(float(r["fpr"]), float(r["tpr"]), float(r["threshold"])) for r in csv.DictReader(fh)]


def roc_svg(curves: dict[str, tuple[list, float]], size: int = 320) -> str:
    """SVG with one ROC polyline per model, the chance diagonal and AUROC labels."""
    m = 40
    side = size - 2 * m
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

    def pt(f, t):
        return f"{m + f * side:.2f},{m + (1 - t) * side:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{m}" y="{m}" width="{side}" height="{side}" fill="none" stroke="#000"/>',
        f'<line class="diagonal" x1="{m}" y1="{m + side}" x2="{m + side}" y2="{m}" stroke="#999" stroke-dasharray="4,4"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">False positive rate</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {size / 2})">True positive rate</text>',
    ]
    for k, (name, (curve, auc)) in enumerate(curves.items()):
        color = colors[k % len(colors)]
        pts = " ".join(pt(f, t) for f, t, _ in curve)
        parts.append(f'<polyline class="roc" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text class="auroc" x="{m + side - 4}" y="{m + side - 8 - 16 * k}" text-anchor="end" '
            f'font-size="12" fill="{color}">{name} AUROC = {auc:.3f}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
