"""Bin video packets into T-second slots and compute per-slot feature vectors.

Slot i covers ((i-1)*T, i*T] and is labeled by its end time i*T. The UDP
vector summarizes packet sizes and inter-arrival times (18 features); the
RTP vector adds frame/loss/ordering proxies from RTP headers (11 features).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .trace_ingest import PacketRecord
from .stream_classify import PT_RETX

UDP_FEATURES = [
    "pkt_count", "total_bytes",
    "size_mean", "size_std", "size_min", "size_max",
    "size_median", "size_p10", "size_p90",
    "iat_mean", "iat_std", "iat_min", "iat_max",
    "iat_median", "iat_p10", "iat_p90",
    "burst_count", "active_fraction",
]

RTP_FEATURES = [
    "unique_rtp_ts_count", "marker_count",
    "pkts_per_rtp_ts_mean", "pkts_per_rtp_ts_std",
    "seq_gap_count", "seq_gap_max",
    "out_of_order_count", "duplicate_seq_count",
    "rtp_ts_delta_mean", "rtp_ts_delta_std",
    "retx_pkt_count",
]

BURST_IAT_SECONDS = 0.001  # packets closer than this extend a burst


class MissingRtp(Exception):
    """RTP-mode featurization hit a packet without parsed RTP fields."""


@dataclass(frozen=True, order=True)
class SlotKey:
    session_id: str
    slot_end: int


@dataclass
class SlotFeatures:
    key: SlotKey
    udp: np.ndarray                  # 18 values, UDP_FEATURES order
    rtp: Optional[np.ndarray] = None  # 11 values, RTP_FEATURES order


def slot_index(ts: float, T: float = 1.0) -> int:
    """Slot number covering timestamp ts: ceil(ts / T), with ts=0 -> 1."""
    if ts < 0:
        raise ValueError(f"ts must be >= 0, got {ts}")
    if T <= 0:
        raise ValueError(f"T must be > 0, got {T}")
    return max(math.ceil(ts / T), 1)


def _nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile on an ascending sample (reproducible across
    platforms, unlike interpolating methods)."""
    n = len(sorted_values)
    rank = max(math.ceil(pct / 100.0 * n), 1)
    return float(sorted_values[rank - 1])


def extract_udp_features(packets: Sequence[PacketRecord], T: float = 1.0) -> np.ndarray:
    """18 size/IAT summary features for one slot's packets (sorted by ts).

    Empty slot -> all zeros; single packet -> IAT stats and active_fraction
    zero by convention.
    """
    out = np.zeros(len(UDP_FEATURES))
    n = len(packets)
    if n == 0:
        return out
    sizes = np.array([p.payload_len for p in packets], dtype=float)
    ts = np.array([p.ts for p in packets], dtype=float)
    sorted_sizes = np.sort(sizes)

    out[0] = n
    out[1] = sizes.sum()
    out[2] = sizes.mean()
    out[3] = sizes.std()
    out[4] = sorted_sizes[0]
    out[5] = sorted_sizes[-1]
    out[6] = _nearest_rank(sorted_sizes, 50)
    out[7] = _nearest_rank(sorted_sizes, 10)
    out[8] = _nearest_rank(sorted_sizes, 90)
    if n >= 2:
        iats = np.diff(ts)
        sorted_iats = np.sort(iats)
        out[9] = iats.mean()
        out[10] = iats.std()
        out[11] = sorted_iats[0]
        out[12] = sorted_iats[-1]
        out[13] = _nearest_rank(sorted_iats, 50)
        out[14] = _nearest_rank(sorted_iats, 10)
        out[15] = _nearest_rank(sorted_iats, 90)
        out[16] = float((iats < BURST_IAT_SECONDS).sum())
        out[17] = min(float(ts[-1] - ts[0]) / T, 1.0)
    return out


def _unwrap_seqs(seqs: np.ndarray) -> np.ndarray:
    """Unwrap mod-65536 sequence numbers into a monotone-friendly space."""
    deltas = np.diff(seqs.astype(np.int64))
    deltas = (deltas + 32768) % 65536 - 32768
    return np.concatenate(([seqs[0]], seqs[0] + np.cumsum(deltas)))


def extract_rtp_features(packets: Sequence[PacketRecord]) -> np.ndarray:
    """11 RTP-header features for one slot's packets (sorted by ts)."""
    out = np.zeros(len(RTP_FEATURES))
    if not packets:
        return out
    for p in packets:
        if p.rtp is None:
            raise MissingRtp(f"packet at ts={p.ts} has no RTP fields")

    rtp_ts = np.array([p.rtp.timestamp for p in packets], dtype=np.int64)
    seqs = np.array([p.rtp.seq for p in packets], dtype=np.int64)
    markers = sum(1 for p in packets if p.rtp.marker)

    unique_ts, ts_counts = np.unique(rtp_ts, return_counts=True)
    out[0] = len(unique_ts)
    out[1] = markers
    out[2] = ts_counts.mean()
    out[3] = ts_counts.std()

    unwrapped = _unwrap_seqs(seqs)
    if len(unwrapped) >= 2:
        arrival_deltas = np.diff(unwrapped)
        out[6] = float((arrival_deltas < 0).sum())
    unique_seqs = np.unique(unwrapped)
    out[7] = len(unwrapped) - len(unique_seqs)
    if len(unique_seqs) >= 2:
        # gaps = sequence numbers never seen in the slot
        seq_steps = np.diff(unique_seqs)
        gap_sizes = seq_steps[seq_steps > 1] - 1
        out[4] = len(gap_sizes)
        out[5] = float(gap_sizes.max()) if len(gap_sizes) else 0.0

    if len(unique_ts) >= 2:
        ts_deltas = np.diff(unique_ts).astype(float)
        out[8] = ts_deltas.mean()
        out[9] = ts_deltas.std()
    out[10] = sum(1 for p in packets if p.rtp.payload_type == PT_RETX)
    return out


def featurize_session(
    packets: Sequence[PacketRecord],
    duration: float,
    session_id: str,
    T: float = 1.0,
    mode: str = "udp",
) -> list[SlotFeatures]:
    """One SlotFeatures per slot from 1 to ceil(duration / T), empty slots
    included as zero vectors. Packets are stably ordered by (ts, seq) first
    so equal-timestamp permutations cannot change any feature."""
    if mode not in ("udp", "rtp"):
        raise ValueError(f"mode must be 'udp' or 'rtp', got {mode!r}")
    want_rtp = mode == "rtp"
    if want_rtp:
        for p in packets:
            if p.rtp is None:
                raise MissingRtp(f"packet at ts={p.ts} has no RTP fields")

    ordered = sorted(packets, key=lambda p: (p.ts, p.rtp.seq if p.rtp else 0))
    n_slots = max(math.ceil(duration / T), 1) if duration > 0 else 0
    if ordered:
        n_slots = max(n_slots, slot_index(ordered[-1].ts, T))

    by_slot: dict[int, list[PacketRecord]] = {}
    for p in ordered:
        by_slot.setdefault(slot_index(p.ts, T), []).append(p)

    result = []
    for slot_end in range(1, n_slots + 1):
        slot_pkts = by_slot.get(slot_end, [])
        result.append(SlotFeatures(
            key=SlotKey(session_id=session_id, slot_end=slot_end),
            udp=extract_udp_features(slot_pkts, T),
            rtp=extract_rtp_features(slot_pkts) if want_rtp else None,
        ))
    return result


def feature_columns(mode: str) -> list[str]:
    if mode == "udp":
        return list(UDP_FEATURES)
    if mode == "rtp":
        return UDP_FEATURES + RTP_FEATURES
    raise ValueError(f"mode must be 'udp' or 'rtp', got {mode!r}")


def write_feature_csv(path, slots: Sequence[SlotFeatures], mode: str) -> None:
    """Feature table: session_id,slot_end,<18 udp>[,<11 rtp>] — the contract
    between featurization, training, and evaluation."""
    cols = feature_columns(mode)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["session_id", "slot_end"] + cols)
        for s in slots:
            values = s.udp if s.rtp is None else np.concatenate([s.udp, s.rtp])
            if len(values) != len(cols):
                raise ValueError(f"slot {s.key} does not match mode {mode!r}")
            writer.writerow([s.key.session_id, s.key.slot_end]
                            + [repr(float(v)) for v in values])


def read_feature_csv(path) -> tuple[list[SlotKey], list[str], np.ndarray]:
    """Returns (keys, feature column names, matrix of shape n x d)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["session_id", "slot_end"]:
            raise ValueError(f"{path}: unexpected header {header[:2]}")
        cols = header[2:]
        if cols != feature_columns("udp") and cols != feature_columns("rtp"):
            raise ValueError(f"{path}: feature columns do not match a known mode")
        keys, rows = [], []
        for row in reader:
            keys.append(SlotKey(session_id=row[0], slot_end=int(row[1])))
            rows.append([float(v) for v in row[2:]])
    matrix = np.array(rows) if rows else np.empty((0, len(cols)))
    return keys, cols, matrix
