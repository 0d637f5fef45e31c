"""Evaluation artifacts: MAE by network condition, accuracy-vs-tolerance
curves, rating confusion matrices, and CDF/density exports for plotting.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .featurize import SlotKey
from .ground_truth import RATING_ORDER, Rating, SlotLabels
from .trace_ingest import ConditionKind, SessionMeta

REPORT_FORMAT = "qoe-lens-report/1"

DEFAULT_FPS_TOLERANCES = tuple(range(0, 11))


class LengthMismatch(Exception):
    pass


class EmptyInput(Exception):
    pass


class AlignmentError(Exception):
    """Predictions and labels disagree on which slots exist."""


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise EmptyInput("mae of empty input")
    return float(np.mean(np.abs(pred - truth)))


def tolerance_curve(
    pred: Sequence[float], truth: Sequence[float],
    tolerances: Sequence[float] = DEFAULT_FPS_TOLERANCES,
) -> list[tuple[float, float]]:
    """accuracy(tol) = fraction of |pred - truth| <= tol; non-decreasing."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise EmptyInput("tolerance curve of empty input")
    errors = np.abs(pred - truth)
    return [(float(t), float(np.mean(errors <= t))) for t in tolerances]


@dataclass
class ConfusionMatrix:
    """Rows = actual class, columns = predicted. The emitted table keeps
    only rows for classes observed in the truth and columns for classes
    observed anywhere; raw counts retain the full vocabulary."""
    class_order: list[str]
    raw_counts: np.ndarray  # len(order) x len(order)

    @property
    def observed_rows(self) -> list[str]:
        return [c for i, c in enumerate(self.class_order)
                if self.raw_counts[i].sum() > 0]

    @property
    def observed_cols(self) -> list[str]:
        keep = (self.raw_counts.sum(axis=0) > 0) | (self.raw_counts.sum(axis=1) > 0)
        return [c for i, c in enumerate(self.class_order) if keep[i]]

    def row_rates(self) -> tuple[list[str], list[str], np.ndarray]:
        rows = self.observed_rows
        cols = self.observed_cols
        ri = [self.class_order.index(c) for c in rows]
        ci = [self.class_order.index(c) for c in cols]
        sub = self.raw_counts[np.ix_(ri, ci)].astype(float)
        return rows, cols, sub / sub.sum(axis=1, keepdims=True)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.raw_counts) / self.raw_counts.sum())

    def to_dict(self) -> dict:
        rows, cols, rates = self.row_rates()
        return {
            "classes": self.class_order,
            "raw_counts": self.raw_counts.tolist(),
            "rows": rows,
            "cols": cols,
            "rates": rates.tolist(),
            "accuracy": self.accuracy,
        }


def confusion_matrix(
    pred: Sequence[str], truth: Sequence[str],
    class_order: Optional[Sequence[str]] = None,
) -> ConfusionMatrix:
    if len(pred) != len(truth):
        raise LengthMismatch(f"{len(pred)} vs {len(truth)}")
    if class_order is None:
        class_order = [r.value for r in RATING_ORDER]
    order = [c.value if isinstance(c, Rating) else c for c in class_order]
    index = {c: i for i, c in enumerate(order)}
    counts = np.zeros((len(order), len(order)), dtype=np.int64)
    for p, t in zip(pred, truth):
        p = p.value if isinstance(p, Rating) else p
        t = t.value if isinstance(t, Rating) else t
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(class_order=list(order), raw_counts=counts)


def export_distributions(
    values: Sequence[float], kind: str, grid_points: int = 200
) -> np.ndarray:
    """CDF: empirical step function at unique values. Density: Gaussian KDE
    with Silverman-rule bandwidth on an even grid. Returns (x, y) rows."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise EmptyInput("no values to export")
    if kind == "cdf":
        xs, counts = np.unique(v, return_counts=True)
        ys = np.cumsum(counts) / v.size
        return np.column_stack([xs, ys])
    if kind != "density":
        raise ValueError(f"kind must be 'cdf' or 'density', got {kind!r}")
    std = float(v.std())
    iqr = float(np.subtract(*np.percentile(v, [75, 25])))
    sigma = min(std, iqr / 1.34) if iqr > 0 else std
    if sigma <= 0:
        sigma = max(abs(float(v.mean())) * 1e-3, 1e-3)
    h = 0.9 * sigma * v.size ** (-0.2)
    xs = np.linspace(v.min() - 3 * h, v.max() + 3 * h, grid_points)
    z = (xs[:, None] - v[None, :]) / h
    ys = np.exp(-0.5 * z * z).sum(axis=1) / (v.size * h * math.sqrt(2 * math.pi))
    return np.column_stack([xs, ys])


@dataclass
class EvalReport:
    # keys are (condition_kind, target, mode) rendered as strings in JSON
    mae_by_condition: dict[tuple[str, str, str], float] = field(default_factory=dict)
    rating_accuracy: dict[tuple[str, str, str], float] = field(default_factory=dict)
    overall_mae: dict[tuple[str, str], float] = field(default_factory=dict)
    overall_accuracy: dict[tuple[str, str], float] = field(default_factory=dict)
    confusion: dict[tuple[str, str], ConfusionMatrix] = field(default_factory=dict)
    # (group, mode) -> [(tolerance, accuracy)]
    tolerance_curves: dict[tuple[str, str], list[tuple[float, float]]] = field(default_factory=dict)
    distributions: dict[str, np.ndarray] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "format": REPORT_FORMAT,
            "mae_by_condition": {"/".join(k): v for k, v in self.mae_by_condition.items()},
            "rating_accuracy": {"/".join(k): v for k, v in self.rating_accuracy.items()},
            "overall_mae": {"/".join(k): v for k, v in self.overall_mae.items()},
            "overall_accuracy": {"/".join(k): v for k, v in self.overall_accuracy.items()},
            "confusion": {"/".join(k): m.to_dict() for k, m in self.confusion.items()},
            "tolerance_curves": {"/".join(k): v for k, v in self.tolerance_curves.items()},
            "distributions": {k: v.tolist() for k, v in self.distributions.items()},
        }
        return json.dumps(doc, sort_keys=True, indent=1)


def _split_by(
    keys: Sequence[SlotKey], groups: Mapping[str, str]
) -> dict[str, np.ndarray]:
    out: dict[str, list[int]] = {}
    for i, k in enumerate(keys):
        out.setdefault(groups[k.session_id], []).append(i)
    return {g: np.array(ix) for g, ix in out.items()}


def per_condition_report(
    predictions: Mapping[tuple[str, str], Mapping[SlotKey, object]],
    labels: Sequence[SlotLabels],
    sessions: Sequence[SessionMeta],
    fps_tolerances: Sequence[float] = DEFAULT_FPS_TOLERANCES,
) -> EvalReport:
    """Assemble the full evaluation report from out-of-fold predictions.

    predictions maps (target, mode) to {SlotKey: value}. Every eligible
    labeled slot must be predicted exactly (AlignmentError otherwise).
    Distribution exports characterize the ground-truth labels themselves.
    """
    meta_by_id = {s.session_id: s for s in sessions}
    label_by_key: dict[SlotKey, SlotLabels] = {lb.key: lb for lb in labels}
    missing_meta = {lb.key.session_id for lb in labels} - set(meta_by_id)
    if missing_meta:
        raise AlignmentError(f"labels reference unknown sessions: {sorted(missing_meta)[:5]}")
    condition_of = {s.session_id: (s.condition_kind.value if s.condition_kind else "")
                    for s in sessions}

    report = EvalReport()
    for (target, mode), pred_map in sorted(predictions.items()):
        eligible = _eligible_keys(labels, target)
        got = set(pred_map)
        if got != eligible:
            missing = sorted(eligible - got)[:5]
            extra = sorted(got - eligible)[:5]
            raise AlignmentError(
                f"{target}/{mode}: predictions misaligned with labels "
                f"(missing {missing}, unmatched {extra})")
        keys = sorted(eligible)
        preds = [pred_map[k] for k in keys]
        truths = [_label_value(label_by_key[k], target) for k in keys]
        by_condition = _split_by(keys, condition_of)

        if target in ("fps", "brisque", "piqe"):
            pred_arr = np.asarray(preds, dtype=float)
            truth_arr = np.asarray(truths, dtype=float)
            report.overall_mae[(target, mode)] = mae(pred_arr, truth_arr)
            for cond, ix in sorted(by_condition.items()):
                report.mae_by_condition[(cond, target, mode)] = mae(
                    pred_arr[ix], truth_arr[ix])
            if target == "fps":
                for cond, ix in sorted(by_condition.items()):
                    report.tolerance_curves[(cond, mode)] = tolerance_curve(
                        pred_arr[ix], truth_arr[ix], fps_tolerances)
                # per-loss-level curves within the packet-loss condition
                level_of = {s.session_id: s.condition_level or ""
                            for s in sessions
                            if s.condition_kind is ConditionKind.PACKET_LOSS}
                loss_keys = [i for i, k in enumerate(keys)
                             if k.session_id in level_of]
                by_level: dict[str, list[int]] = {}
                for i in loss_keys:
                    by_level.setdefault(level_of[keys[i].session_id], []).append(i)
                for level, ix_list in sorted(by_level.items()):
                    ix = np.array(ix_list)
                    report.tolerance_curves[(level, mode)] = tolerance_curve(
                        pred_arr[ix], truth_arr[ix], fps_tolerances)
        else:
            pred_cls = [str(p) for p in preds]
            truth_cls = [str(t) for t in truths]
            cm = confusion_matrix(pred_cls, truth_cls)
            report.confusion[(target, mode)] = cm
            report.overall_accuracy[(target, mode)] = cm.accuracy
            for cond, ix in sorted(by_condition.items()):
                hits = sum(pred_cls[i] == truth_cls[i] for i in ix)
                report.rating_accuracy[(cond, target, mode)] = hits / len(ix)

    _label_distributions(report, labels, sessions)
    return report


def _eligible_keys(labels: Sequence[SlotLabels], target: str) -> set[SlotKey]:
    if target == "fps":
        return {lb.key for lb in labels}
    return {lb.key for lb in labels if not lb.scores_missing}


def _label_value(lb: SlotLabels, target: str):
    if target == "fps":
        return lb.fps
    if target == "brisque":
        return lb.brisque
    if target == "piqe":
        return lb.piqe
    if target == "brisque_rating":
        return lb.brisque_rating.value
    if target == "piqe_rating":
        return lb.piqe_rating.value
    raise ValueError(f"unknown target {target!r}")


def _label_distributions(
    report: EvalReport, labels: Sequence[SlotLabels], sessions: Sequence[SessionMeta]
) -> None:
    fps = [lb.fps for lb in labels]
    piqe = [lb.piqe for lb in labels if lb.piqe is not None]
    brisque = [lb.brisque for lb in labels if lb.brisque is not None]
    report.distributions["cdf_fps"] = export_distributions(fps, "cdf")
    if piqe:
        report.distributions["cdf_piqe"] = export_distributions(piqe, "cdf")
    if brisque:
        report.distributions["cdf_brisque"] = export_distributions(brisque, "cdf")

    by_session: dict[str, list[SlotLabels]] = {}
    for lb in labels:
        by_session.setdefault(lb.key.session_id, []).append(lb)
    groups: dict[str, list[float]] = {}
    for s in sessions:
        slot_labels = by_session.get(s.session_id)
        if not slot_labels:
            continue
        if s.condition_kind is ConditionKind.BANDWIDTH_LIMIT:
            # spatial quality per bandwidth level
            groups.setdefault(f"density_piqe_{s.condition_level}", []).extend(
                lb.piqe for lb in slot_labels if lb.piqe is not None)
        elif s.condition_kind is ConditionKind.PACKET_LOSS:
            # frame-rate spread per loss level
            groups.setdefault(f"density_fps_{s.condition_level}", []).extend(
                lb.fps for lb in slot_labels)
    for name, vals in groups.items():
        if vals:
            report.distributions[name] = export_distributions(vals, "density")


def write_report_files(report: EvalReport, out_dir) -> None:
    """report.json plus per-table CSVs mirroring the evaluation layouts."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json())

    conditions = sorted({k[0] for k in report.mae_by_condition})
    modes = sorted({k[2] for k in report.mae_by_condition})
    with open(os.path.join(out_dir, "table3_mae.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        cols = [f"{t}_{m}" for t in ("fps", "brisque", "piqe") for m in modes]
        writer.writerow(["condition"] + cols)
        for cond in conditions:
            row = [cond]
            for t in ("fps", "brisque", "piqe"):
                for m in modes:
                    v = report.mae_by_condition.get((cond, t, m))
                    row.append("" if v is None else f"{v:.3f}")
            writer.writerow(row)

    acc_conditions = sorted({k[0] for k in report.rating_accuracy})
    acc_modes = sorted({k[2] for k in report.rating_accuracy})
    with open(os.path.join(out_dir, "table4_rating_acc.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        cols = [f"{t}_{m}" for t in ("brisque_rating", "piqe_rating") for m in acc_modes]
        writer.writerow(["condition"] + cols)
        for cond in acc_conditions:
            row = [cond]
            for t in ("brisque_rating", "piqe_rating"):
                for m in acc_modes:
                    v = report.rating_accuracy.get((cond, t, m))
                    row.append("" if v is None else f"{v * 100:.2f}")
            writer.writerow(row)

    for (target, mode), cm in report.confusion.items():
        if mode != "udp":
            continue  # file layout mirrors the UDP-model table; RTP stays in JSON
        rows, cols, rates = cm.row_rates()
        path = os.path.join(out_dir, f"table5_confusion_{target}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["actual"] + [f"pred_{c}" for c in cols])
            for i, r in enumerate(rows):
                writer.writerow([r] + [f"{v * 100:.1f}" for v in rates[i]])

    with open(os.path.join(out_dir, "fig6_tolerance.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group", "mode", "tolerance", "accuracy"])
        for (group, mode), curve in sorted(report.tolerance_curves.items()):
            for tol, acc in curve:
                writer.writerow([group, mode, repr(tol), repr(acc)])

    for name, table in sorted(report.distributions.items()):
        with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x", "y"])
            for x, y in table:
                writer.writerow([repr(float(x)), repr(float(y))])
