"""End-to-end orchestration: classify traces, featurize, join with labels,
train per-target forests with session-level cross-validation, and collect
out-of-fold predictions for the evaluation report.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .evaluate import EvalReport, per_condition_report
from .featurize import SlotFeatures, SlotKey, feature_columns, featurize_session
from .forest import (
    CLASSIFICATION_TARGETS,
    REGRESSION_TARGETS,
    ForestModel,
    Hyperparams,
    SchemaMismatch,
    fit_forest,
    predict,
    stratified_folds,
)
from .ground_truth import RATING_ORDER, SlotLabels
from .stream_classify import DEFAULT_THRESHOLD, classify_trace
from .trace_ingest import PacketRecord, SessionMeta

ALL_TARGETS = REGRESSION_TARGETS + CLASSIFICATION_TARGETS


@dataclass
class TrainingTable:
    """Feature rows joined to labels, ordered by (session_id, slot_end)."""
    keys: list[SlotKey]
    columns: list[str]
    X: np.ndarray
    labels: dict[SlotKey, SlotLabels]

    def rows_for_target(self, target: str) -> tuple[np.ndarray, list]:
        """Row mask and label vector for one target; slots with missing
        scores are excluded for the spatial-quality targets."""
        mask = []
        values = []
        for k in self.keys:
            lb = self.labels[k]
            if target == "fps":
                mask.append(True)
                values.append(lb.fps)
            elif lb.scores_missing:
                mask.append(False)
            else:
                mask.append(True)
                if target == "brisque":
                    values.append(lb.brisque)
                elif target == "piqe":
                    values.append(lb.piqe)
                elif target == "brisque_rating":
                    values.append(lb.brisque_rating.value)
                elif target == "piqe_rating":
                    values.append(lb.piqe_rating.value)
                else:
                    raise ValueError(f"unknown target {target!r}")
        return np.array(mask, dtype=bool), values


def build_training_table(
    slots: Sequence[SlotFeatures],
    labels: Sequence[SlotLabels],
    mode: str,
) -> TrainingTable:
    """Inner join of features and labels on (session_id, slot_end)."""
    label_map = {lb.key: lb for lb in labels}
    cols = feature_columns(mode)
    keys = []
    rows = []
    for s in sorted(slots, key=lambda s: (s.key.session_id, s.key.slot_end)):
        if s.key not in label_map:
            continue
        if mode == "udp":
            vec = s.udp
        else:
            if s.rtp is None:
                missing = feature_columns("rtp")[len(s.udp):]
                raise SchemaMismatch(
                    f"rtp mode needs RTP feature columns; missing {missing}")
            vec = np.concatenate([s.udp, s.rtp])
        keys.append(s.key)
        rows.append(vec)
    X = np.array(rows) if rows else np.empty((0, len(cols)))
    return TrainingTable(keys=keys, columns=cols, X=X,
                         labels={k: label_map[k] for k in keys})


def featurize_corpus(
    traces: Mapping[str, Sequence[PacketRecord]],
    sessions: Sequence[SessionMeta],
    mode: str,
    threshold: int = DEFAULT_THRESHOLD,
    T: float = 1.0,
) -> list[SlotFeatures]:
    """Classify each session's trace at the size threshold and featurize the
    video stream."""
    meta = {s.session_id: s for s in sessions}
    out: list[SlotFeatures] = []
    for session_id in sorted(traces):
        video, _, _ = classify_trace(traces[session_id], threshold)
        out.extend(featurize_session(
            video, duration=meta[session_id].duration,
            session_id=session_id, T=T, mode=mode))
    return out


def task_of(target: str) -> str:
    return "classification" if target in CLASSIFICATION_TARGETS else "regression"


def cross_val_predict(
    table: TrainingTable,
    folds: Mapping[str, int],
    target: str,
    hyperparams: Hyperparams,
    seed: int = 0,
    n_jobs: int = 1,
) -> dict[SlotKey, object]:
    """Out-of-fold predictions for every eligible slot: each fold's sessions
    are predicted by a forest trained on the remaining folds."""
    mask, values = table.rows_for_target(target)
    keys = [k for k, m in zip(table.keys, mask) if m]
    X = table.X[mask]
    fold_of = np.array([folds[k.session_id] for k in keys])
    task = task_of(target)
    classes = [r.value for r in RATING_ORDER] if task == "classification" else None
    y = np.asarray(values) if task == "regression" else values

    out: dict[SlotKey, object] = {}
    for f in sorted(set(fold_of.tolist())):
        test = fold_of == f
        model = fit_forest(
            X[~test],
            [v for v, t in zip(values, test) if not t] if task == "classification" else y[~test],
            table.columns, task, target, hyperparams, seed=seed,
            classes=classes, n_jobs=n_jobs)
        preds = predict(model, X[test])
        for k, p in zip([k for k, t in zip(keys, test) if t], preds):
            out[k] = float(p) if task == "regression" else p
    return out


def fit_final_model(
    table: TrainingTable,
    target: str,
    hyperparams: Hyperparams,
    seed: int = 0,
    n_jobs: int = 1,
) -> ForestModel:
    mask, values = table.rows_for_target(target)
    task = task_of(target)
    classes = [r.value for r in RATING_ORDER] if task == "classification" else None
    y = values if task == "classification" else np.asarray(values)
    return fit_forest(table.X[mask], y, table.columns, task, target,
                      hyperparams, seed=seed, classes=classes, n_jobs=n_jobs)


def run_evaluation(
    tables: Mapping[str, TrainingTable],
    labels: Sequence[SlotLabels],
    sessions: Sequence[SessionMeta],
    hyperparams: Hyperparams = Hyperparams(),
    targets: Sequence[str] = ALL_TARGETS,
    modes: Sequence[str] = ("udp", "rtp"),
    seed: int = 0,
    k_folds: int = 5,
    n_jobs: int = 1,
) -> tuple[EvalReport, dict[tuple[str, str], dict[SlotKey, object]]]:
    """Cross-validated predictions for every (target, mode) followed by the
    per-condition report. tables maps mode -> TrainingTable."""
    folds = stratified_folds(sessions, k=k_folds, seed=seed)
    predictions: dict[tuple[str, str], dict[SlotKey, object]] = {}
    for mode in modes:
        table = tables[mode]
        for target in targets:
            predictions[(target, mode)] = cross_val_predict(
                table, folds, target, hyperparams, seed=seed, n_jobs=n_jobs)
    report = per_condition_report(predictions, labels, sessions)
    return report, predictions
