"""Per-slot QoE labels: frame rate from deduplicated screen captures,
BRISQUE/PIQE slot averages from per-frame score logs, and the five-class
quality ratings derived from those scores.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

from .featurize import SlotKey, slot_index

log = logging.getLogger(__name__)


class MissingGroundTruth(Exception):
    """A session has no capture log to derive labels from."""


@dataclass(frozen=True)
class CaptureEvent:
    ts: float
    frame_id: str  # hash of the focus-window image bytes


class Rating(str, Enum):
    EXCELLENT = "Excellent"
    GOOD = "Good"
    FAIR = "Fair"
    POOR = "Poor"
    BAD = "Bad"


# canonical class order, also the tie-break order for classifiers
RATING_ORDER = [Rating.EXCELLENT, Rating.GOOD, Rating.FAIR, Rating.POOR, Rating.BAD]

# upper bounds of half-open score intervals per scale
_PIQE_BOUNDS = [(20.0, Rating.EXCELLENT), (35.0, Rating.GOOD), (50.0, Rating.FAIR),
                (80.0, Rating.POOR), (100.0, Rating.BAD)]
_BRISQUE_BOUNDS = [(20.0, Rating.EXCELLENT), (40.0, Rating.GOOD), (60.0, Rating.FAIR),
                   (80.0, Rating.POOR), (100.0, Rating.BAD)]


def map_rating(score: float, scale: str) -> Rating:
    """Map a 0-100 quality score to its rating class (lower = better).

    Scores outside [0, 100] are clamped with a warning; BRISQUE can exceed
    100 on unusual content.
    """
    if scale == "piqe":
        bounds = _PIQE_BOUNDS
    elif scale == "brisque":
        bounds = _BRISQUE_BOUNDS
    else:
        raise ValueError(f"scale must be 'piqe' or 'brisque', got {scale!r}")
    if score < 0.0 or score > 100.0:
        log.warning("clamping %s score %.3f into [0, 100]", scale, score)
        score = min(max(score, 0.0), 100.0)
    for upper, rating in bounds:
        if score <= upper:
            return rating
    return Rating.BAD


@dataclass
class SlotLabels:
    key: SlotKey
    fps: float
    brisque: Optional[float]
    piqe: Optional[float]
    brisque_rating: Optional[Rating]
    piqe_rating: Optional[Rating]
    scores_missing: bool = False


def dedup_captures(captures: Sequence[CaptureEvent]) -> list[CaptureEvent]:
    """Keep only the first capture of each frame: event i survives iff its
    frame_id differs from event i-1's. Non-consecutive repeats are kept;
    sign uniqueness within a slot is the capture schedule's guarantee."""
    kept: list[CaptureEvent] = []
    prev_id: Optional[str] = None
    for ev in captures:
        if ev.frame_id != prev_id:
            kept.append(ev)
        prev_id = ev.frame_id
    return kept


def frame_rate_per_slot(
    captures: Sequence[CaptureEvent],
    end_time_slots: Iterable[int],
    T: float = 1.0,
) -> dict[int, float]:
    """Per-slot frame rate: deduplicate captures, bucket by slot end time,
    divide counts by T. Slots with no unique captures stay 0."""
    rates: dict[int, float] = {slot: 0.0 for slot in end_time_slots}
    for ev in dedup_captures(captures):
        slot = slot_index(ev.ts, T)
        rates[slot] = rates.get(slot, 0.0) + 1.0 / T
    return rates


def avg_scores_per_slot(
    frame_scores: Sequence[tuple[float, float, float]], T: float = 1.0
) -> dict[int, tuple[float, float]]:
    """Mean (brisque, piqe) of the scores whose timestamp falls in each slot;
    slots without scores are absent from the mapping."""
    sums: dict[int, list[float]] = {}
    for ts, brisque, piqe in frame_scores:
        slot = slot_index(ts, T)
        acc = sums.setdefault(slot, [0.0, 0.0, 0.0])
        acc[0] += brisque
        acc[1] += piqe
        acc[2] += 1.0
    return {slot: (b / n, p / n) for slot, (b, p, n) in sums.items()}


def build_labels(
    captures: Sequence[CaptureEvent],
    frame_scores: Sequence[tuple[float, float, float]],
    duration: float,
    session_id: str,
    T: float = 1.0,
) -> list[SlotLabels]:
    """Assemble one SlotLabels per slot of the session. Slots lacking score
    samples are flagged scores_missing and excluded from spatial-quality
    training downstream (their fps is still usable)."""
    if not captures:
        raise MissingGroundTruth(f"session {session_id!r} has no capture log")
    n_slots = max(math.ceil(duration / T), 1)
    slots = range(1, n_slots + 1)
    fps = frame_rate_per_slot(captures, slots, T)
    scores = avg_scores_per_slot(frame_scores, T)
    labels = []
    for slot_end in slots:
        key = SlotKey(session_id=session_id, slot_end=slot_end)
        if slot_end in scores:
            brisque, piqe = scores[slot_end]
            labels.append(SlotLabels(
                key=key, fps=fps.get(slot_end, 0.0),
                brisque=brisque, piqe=piqe,
                brisque_rating=map_rating(brisque, "brisque"),
                piqe_rating=map_rating(piqe, "piqe"),
            ))
        else:
            labels.append(SlotLabels(
                key=key, fps=fps.get(slot_end, 0.0),
                brisque=None, piqe=None,
                brisque_rating=None, piqe_rating=None,
                scores_missing=True,
            ))
    return labels


def read_capture_csv(path) -> list[CaptureEvent]:
    """Capture log: ts,frame_id."""
    events = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["ts", "frame_id"]:
            raise ValueError(f"{path}: expected header ts,frame_id")
        for row in reader:
            events.append(CaptureEvent(ts=float(row[0]), frame_id=row[1]))
    return events


def read_score_csv(path) -> list[tuple[float, float, float]]:
    """Frame-score log: ts,brisque,piqe."""
    scores = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["ts", "brisque", "piqe"]:
            raise ValueError(f"{path}: expected header ts,brisque,piqe")
        for row in reader:
            scores.append((float(row[0]), float(row[1]), float(row[2])))
    return scores


LABEL_COLUMNS = ["session_id", "slot_end", "fps", "brisque", "piqe",
                 "brisque_rating", "piqe_rating", "scores_missing"]


def write_labels_csv(path, labels: Sequence[SlotLabels]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_COLUMNS)
        for lb in labels:
            writer.writerow([
                lb.key.session_id, lb.key.slot_end, repr(lb.fps),
                "" if lb.brisque is None else repr(lb.brisque),
                "" if lb.piqe is None else repr(lb.piqe),
                "" if lb.brisque_rating is None else lb.brisque_rating.value,
                "" if lb.piqe_rating is None else lb.piqe_rating.value,
                int(lb.scores_missing),
            ])


def read_labels_csv(path) -> list[SlotLabels]:
    labels = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != LABEL_COLUMNS:
            raise ValueError(f"{path}: unexpected labels header {header}")
        for row in reader:
            missing = bool(int(row[7]))
            labels.append(SlotLabels(
                key=SlotKey(session_id=row[0], slot_end=int(row[1])),
                fps=float(row[2]),
                brisque=None if row[3] == "" else float(row[3]),
                piqe=None if row[4] == "" else float(row[4]),
                brisque_rating=None if row[5] == "" else Rating(row[5]),
                piqe_rating=None if row[6] == "" else Rating(row[6]),
                scores_missing=missing,
            ))
    return labels
