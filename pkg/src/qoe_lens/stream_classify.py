"""Separate video from non-video packets by payload size.

The video stream is isolated with a single byte threshold (default 275).
When RTP payload types are available they provide ground-truth labels
(97/103 video, 120 audio) used to sweep for the best threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .trace_ingest import PacketRecord

DEFAULT_THRESHOLD = 275

PT_VIDEO = 97
PT_RETX = 103
PT_AUDIO = 120


class MediaClass(str, Enum):
    VIDEO = "Video"
    NON_VIDEO = "NonVideo"


class LabelSource(str, Enum):
    PAYLOAD_TYPE = "PayloadType"
    SIZE_THRESHOLD = "SizeThreshold"


@dataclass(frozen=True)
class MediaLabel:
    value: MediaClass
    source: LabelSource


# retransmissions carry video payload, so PT 103 counts as video
DEFAULT_PT_MAP: dict[int, MediaClass] = {
    PT_VIDEO: MediaClass.VIDEO,
    PT_RETX: MediaClass.VIDEO,
    PT_AUDIO: MediaClass.NON_VIDEO,
}


class SingleClassError(Exception):
    """Threshold sweep needs at least one packet of each class."""


def classify_packet(payload_len: int, threshold: int = DEFAULT_THRESHOLD) -> MediaLabel:
    """Video iff payload_len > threshold; ties go to NonVideo."""
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    value = MediaClass.VIDEO if payload_len > threshold else MediaClass.NON_VIDEO
    return MediaLabel(value=value, source=LabelSource.SIZE_THRESHOLD)


def label_by_payload_type(
    pkt: PacketRecord, pt_map: Optional[Mapping[int, MediaClass]] = None
) -> Optional[MediaLabel]:
    """Ground-truth label from the RTP payload type; None for unmapped PTs."""
    if pkt.rtp is None:
        raise ValueError("packet has no parsed RTP fields")
    mapping = DEFAULT_PT_MAP if pt_map is None else pt_map
    value = mapping.get(pkt.rtp.payload_type)
    if value is None:
        return None
    return MediaLabel(value=value, source=LabelSource.PAYLOAD_TYPE)


@dataclass
class ThresholdReport:
    threshold: int
    accuracy: float
    # rows = actual (non-video, video), cols = classified (non-video, video)
    confusion_rates: list[list[float]]
    confusion_counts: list[list[int]]
    mean_size_video: float
    mean_size_nonvideo: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "threshold": self.threshold,
                "accuracy": self.accuracy,
                "confusion_rates": self.confusion_rates,
                "confusion_counts": self.confusion_counts,
                "mean_size_video": self.mean_size_video,
                "mean_size_nonvideo": self.mean_size_nonvideo,
            },
            indent=2,
        )

    def write_csv(self, path) -> None:
        """Emit the confusion matrix in the actual-class x classified-class
        layout (percentages, raw count, mean size per actual class)."""
        rows = [
            ("Non-video", 0, self.mean_size_nonvideo),
            ("Video", 1, self.mean_size_video),
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["actual", "classified_nonvideo_pct",
                            "classified_video_pct", "packet_count",
                            "avg_packet_size_bytes"])
            for name, i, mean_size in rows:
                writer.writerow([
                    name,
                    f"{self.confusion_rates[i][0] * 100:.4f}",
                    f"{self.confusion_rates[i][1] * 100:.4f}",
                    sum(self.confusion_counts[i]),
                    f"{mean_size:.1f}",
                ])


def optimize_threshold(packets: Sequence[PacketRecord]) -> ThresholdReport:
    """Sweep every integer threshold in [min size - 1, max size] and return
    the one maximizing accuracy against payload-type ground truth (smallest
    threshold on ties)."""
    sizes = np.array([p.payload_len for p in packets], dtype=np.int64)
    flags = []
    for p in packets:
        label = label_by_payload_type(p)
        if label is None:
            raise ValueError(
                f"packet at ts={p.ts} has unmapped payload type "
                f"{p.rtp.payload_type}; cannot derive ground truth")
        flags.append(label.value is MediaClass.VIDEO)
    labels = np.array(flags, dtype=bool)
    n_video = int(labels.sum())
    n_nonvideo = len(labels) - n_video
    if n_video == 0 or n_nonvideo == 0:
        raise SingleClassError("need at least one packet of each class")

    lo, hi = int(sizes.min()) - 1, int(sizes.max())
    thresholds = np.arange(lo, hi + 1)
    # counts of each class at or below every candidate threshold
    video_le = np.cumsum(np.bincount(sizes[labels], minlength=hi + 1))[thresholds.clip(0)]
    nonvideo_le = np.cumsum(np.bincount(sizes[~labels], minlength=hi + 1))[thresholds.clip(0)]
    video_le = np.where(thresholds < 0, 0, video_le)
    nonvideo_le = np.where(thresholds < 0, 0, nonvideo_le)
    correct = nonvideo_le + (n_video - video_le)
    best = int(np.argmax(correct))  # argmax takes the first (smallest) tie
    threshold = int(thresholds[best])

    return build_threshold_report(sizes, labels, threshold)


def build_threshold_report(
    sizes: np.ndarray, is_video: np.ndarray, threshold: int
) -> ThresholdReport:
    classified_video = sizes > threshold
    counts = [
        [int((~is_video & ~classified_video).sum()), int((~is_video & classified_video).sum())],
        [int((is_video & ~classified_video).sum()), int((is_video & classified_video).sum())],
    ]
    rates = [[c / max(sum(row), 1) for c in row] for row in counts]
    accuracy = (counts[0][0] + counts[1][1]) / len(sizes)
    return ThresholdReport(
        threshold=threshold,
        accuracy=float(accuracy),
        confusion_rates=rates,
        confusion_counts=counts,
        mean_size_video=float(sizes[is_video].mean()),
        mean_size_nonvideo=float(sizes[~is_video].mean()),
    )


@dataclass
class ClassifyCounts:
    video: int
    nonvideo: int


def classify_trace(
    packets: Sequence[PacketRecord], threshold: int = DEFAULT_THRESHOLD
) -> tuple[list[PacketRecord], list[PacketRecord], ClassifyCounts]:
    """Order-preserving partition of a trace at the size threshold."""
    video: list[PacketRecord] = []
    nonvideo: list[PacketRecord] = []
    for p in packets:
        if p.payload_len > threshold:
            video.append(p)
        else:
            nonvideo.append(p)
    return video, nonvideo, ClassifyCounts(video=len(video), nonvideo=len(nonvideo))
