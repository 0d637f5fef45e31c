"""Synthetic video-call sessions: packet traces plus matched per-slot labels
under the three network conditions (bandwidth limits, bandwidth drops,
packet loss), calibrated against the observed traffic/quality relationships.

Sessions are fully determined by their profile (including the seed), which
makes corpora reproducible byte-for-byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import calibration as cal
from .trace_ingest import (
    BANDWIDTH_LEVELS_KBPS,
    LOSS_LEVELS_PCT,
    ConditionKind,
    PacketRecord,
    RtpFields,
    SessionMeta,
)
from .stream_classify import PT_AUDIO, PT_RETX, PT_VIDEO
from .featurize import SlotKey
from .ground_truth import SlotLabels, map_rating

VIDEO_SRC = "10.0.0.2"
VIDEO_DST = "10.0.0.1"
VIDEO_PORT = 5004
AUDIO_PORT = 5006


class InvalidProfile(Exception):
    """Profile parameters outside the dataset-design vocabulary."""


@dataclass
class ConditionProfile:
    kind: ConditionKind
    session_id: str
    seed: int
    duration: float = 240.0
    limit_kbps: Optional[float] = None          # BandwidthLimit
    drop_to_kbps: Optional[float] = None        # BandwidthDrop
    drop_times_s: tuple[float, ...] = ()        # BandwidthDrop
    drop_initial_kbps: float = 250.0
    loss_pct: float = 0.0                       # PacketLoss

    def validate(self) -> None:
        if self.duration <= 0:
            raise InvalidProfile(f"duration must be > 0, got {self.duration}")
        if self.kind is ConditionKind.BANDWIDTH_LIMIT:
            if self.limit_kbps not in BANDWIDTH_LEVELS_KBPS:
                raise InvalidProfile(
                    f"limit {self.limit_kbps} not in {BANDWIDTH_LEVELS_KBPS}")
        elif self.kind is ConditionKind.PACKET_LOSS:
            if self.loss_pct not in LOSS_LEVELS_PCT:
                raise InvalidProfile(
                    f"loss {self.loss_pct} not in {LOSS_LEVELS_PCT}")
        elif self.kind is ConditionKind.BANDWIDTH_DROP:
            if self.drop_to_kbps is None or not 10 <= self.drop_to_kbps <= 150:
                raise InvalidProfile(
                    f"drop-to {self.drop_to_kbps} outside [10, 150] kBps")
            if not self.drop_times_s:
                raise InvalidProfile("drop profile needs at least one drop time")
            if any(t < 0 or t >= self.duration for t in self.drop_times_s):
                raise InvalidProfile("drop times must lie within the session")

    @property
    def condition_level(self) -> str:
        if self.kind is ConditionKind.BANDWIDTH_LIMIT:
            return f"{int(self.limit_kbps)}kBps"
        if self.kind is ConditionKind.PACKET_LOSS:
            return f"loss{int(self.loss_pct)}pct"
        return f"drop{int(self.drop_to_kbps)}kBps"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "session_id": self.session_id,
            "seed": self.seed,
            "duration": self.duration,
            "limit_kbps": self.limit_kbps,
            "drop_to_kbps": self.drop_to_kbps,
            "drop_times_s": list(self.drop_times_s),
            "drop_initial_kbps": self.drop_initial_kbps,
            "loss_pct": self.loss_pct,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionProfile":
        return cls(
            kind=ConditionKind(d["kind"]),
            session_id=d["session_id"],
            seed=int(d["seed"]),
            duration=float(d.get("duration", 240.0)),
            limit_kbps=d.get("limit_kbps"),
            drop_to_kbps=d.get("drop_to_kbps"),
            drop_times_s=tuple(d.get("drop_times_s", ())),
            drop_initial_kbps=float(d.get("drop_initial_kbps", 250.0)),
            loss_pct=float(d.get("loss_pct", 0.0)),
        )


def bandwidth_profile(
    profile: ConditionProfile, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Utilized bandwidth (kBps) per second of the session; entry i applies
    to the slot ending at i+1 seconds.

    Limits carry +-5% multiplicative noise. Drops step down for ~10 s and
    recover linearly, fast after the first drop and slowly after later ones.
    Packet loss runs at a flat 250 kBps.
    """
    profile.validate()
    n = int(math.ceil(profile.duration))
    if profile.kind is ConditionKind.BANDWIDTH_LIMIT:
        if rng is None:
            rng = np.random.default_rng(profile.seed)
        noise = rng.uniform(1.0 - cal.LIMIT_NOISE_FRAC,
                            1.0 + cal.LIMIT_NOISE_FRAC, size=n)
        return profile.limit_kbps * noise
    if profile.kind is ConditionKind.PACKET_LOSS:
        return np.full(n, 250.0)

    bw = np.full(n, profile.drop_initial_kbps)
    for k, drop_t in enumerate(sorted(profile.drop_times_s)):
        rate = (cal.DROP_RECOVERY_FIRST_KBPS_PER_S if k == 0
                else cal.DROP_RECOVERY_LATER_KBPS_PER_S)
        start = int(drop_t)
        end = start + cal.DROP_WINDOW_S
        for t in range(start, n):
            if t < end:
                bw[t] = min(bw[t], profile.drop_to_kbps)
            else:
                recovered = profile.drop_to_kbps + rate * (t - end)
                if recovered >= bw[t]:
                    break
                bw[t] = recovered
    return bw


@dataclass
class _RtpState:
    """Sequence/clock continuity across the slots of one session."""
    video_ssrc: int
    audio_ssrc: int
    video_seq: int
    audio_seq: int


def _start_state(rng: np.random.Generator) -> _RtpState:
    return _RtpState(
        video_ssrc=int(rng.integers(0, 2**32)),
        audio_ssrc=int(rng.integers(0, 2**32)),
        video_seq=int(rng.integers(0, 2**16)),
        audio_seq=int(rng.integers(0, 2**16)),
    )


def sample_slot_traffic(
    bw_kbps: float,
    loss_pct: float,
    rng: np.random.Generator,
    slot_start: float = 0.0,
    state: Optional[_RtpState] = None,
    stable_quality: bool = False,
) -> tuple[list[PacketRecord], float, float, float]:
    """Generate one slot of traffic and its true (fps, piqe, brisque).

    Video packets are grouped into per-frame bursts; packet count tracks the
    bandwidth linearly and mean size follows the logarithmic size curve.
    Loss removes packets independently and re-injects a fraction as delayed
    PT-103 retransmissions. stable_quality pins the spatial-quality center
    to the Good band irrespective of bandwidth (packet-loss sessions).
    """
    if bw_kbps <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bw_kbps}")
    if state is None:
        state = _start_state(rng)

    size_mean = cal.mean_video_size(bw_kbps)
    n_video = max(int(round(bw_kbps * 1000.0 / size_mean)), 1)

    target = (cal.FPS_TARGET_HIGH if bw_kbps >= cal.FPS_HIGH_BW_KBPS
              else cal.FPS_TARGET_LOW)
    fps_std = cal.FPS_NOISE_STD * (1.0 + cal.FPS_NOISE_WIDEN_PER_LOSS_PCT * loss_pct)
    f_sent = int(round(min(max(target + rng.normal(0.0, fps_std),
                               cal.FPS_MIN), cal.FPS_MAX)))
    f_sent = min(f_sent, n_video)

    # split packets across frames as evenly as possible
    per_frame = np.full(f_sent, n_video // f_sent)
    per_frame[: n_video % f_sent] += 1
    burst_centers = (np.arange(f_sent) + 0.5) / f_sent + rng.uniform(
        -cal.BURST_JITTER_FRAC, cal.BURST_JITTER_FRAC, size=f_sent) / f_sent

    sizes = rng.normal(size_mean, cal.VIDEO_SIZE_STD, size=n_video)
    lo, hi = cal.VIDEO_SIZE_CLAMP
    sizes = np.clip(np.round(sizes), lo, hi).astype(int)

    video: list[PacketRecord] = []
    idx = 0
    for j in range(f_sent):
        count = int(per_frame[j])
        frame_time = slot_start + float(burst_centers[j])
        rtp_ts = int(frame_time * cal.RTP_VIDEO_CLOCK_HZ) % 2**32
        for k in range(count):
            video.append(PacketRecord(
                ts=frame_time + k * cal.BURST_INTRA_GAP_S,
                src_ip=VIDEO_SRC, dst_ip=VIDEO_DST,
                src_port=VIDEO_PORT, dst_port=VIDEO_PORT,
                payload_len=int(sizes[idx]),
                rtp=RtpFields(payload_type=PT_VIDEO,
                              seq=state.video_seq % 65536,
                              timestamp=rtp_ts,
                              marker=(k == count - 1),
                              ssrc=state.video_ssrc),
            ))
            state.video_seq += 1
            idx += 1

    n_audio = cal.AUDIO_PKTS_PER_SEC
    audio_sizes = np.clip(
        np.round(rng.normal(cal.AUDIO_SIZE_MEAN, cal.AUDIO_SIZE_STD, size=n_audio)),
        *cal.AUDIO_SIZE_CLAMP).astype(int)
    audio_offsets = (np.arange(n_audio) + rng.uniform(0.01, 0.99, size=n_audio)) / n_audio
    audio: list[PacketRecord] = []
    for k in range(n_audio):
        t = slot_start + float(audio_offsets[k])
        audio.append(PacketRecord(
            ts=t, src_ip=VIDEO_SRC, dst_ip=VIDEO_DST,
            src_port=AUDIO_PORT, dst_port=AUDIO_PORT,
            payload_len=int(audio_sizes[k]),
            rtp=RtpFields(payload_type=PT_AUDIO,
                          seq=state.audio_seq % 65536,
                          timestamp=int(t * cal.RTP_AUDIO_CLOCK_HZ) % 2**32,
                          marker=False,
                          ssrc=state.audio_ssrc),
        ))
        state.audio_seq += 1

    packets = video + audio
    if loss_pct > 0:
        delivered: list[PacketRecord] = []
        lost: list[PacketRecord] = []
        drops = rng.random(len(packets)) < loss_pct / 100.0
        for p, dropped in zip(packets, drops):
            (lost if dropped else delivered).append(p)
        retx_pick = rng.random(len(lost)) < cal.RETX_FRACTION
        delays = rng.uniform(*cal.RETX_DELAY_RANGE_S, size=len(lost))
        for p, again, delay in zip(lost, retx_pick, delays):
            if again and p.rtp is not None and p.rtp.payload_type == PT_VIDEO:
                delivered.append(PacketRecord(
                    ts=p.ts + float(delay), src_ip=p.src_ip, dst_ip=p.dst_ip,
                    src_port=p.src_port, dst_port=p.dst_port,
                    payload_len=p.payload_len,
                    rtp=RtpFields(payload_type=PT_RETX, seq=p.rtp.seq,
                                  timestamp=p.rtp.timestamp, marker=p.rtp.marker,
                                  ssrc=p.rtp.ssrc),
                ))
        packets = delivered

    # displayed frame rate: decode failures under loss freeze extra frames
    # beyond what the traffic itself shows
    fps_true = float(f_sent)
    if loss_pct > 0:
        freeze = rng.exponential(cal.FPS_FREEZE_MEAN_PER_LOSS_PCT * loss_pct)
        fps_true = max(fps_true - freeze, cal.FPS_MIN)

    if stable_quality:
        center = cal.PIQE_LOSS_CONDITION_CENTER
    else:
        center = cal.piqe_center(bw_kbps)
    piqe = float(np.clip(rng.normal(center, cal.PIQE_STD), 0.0, 100.0))
    brisque = float(np.clip(
        cal.BRISQUE_OFFSET + cal.BRISQUE_SLOPE * piqe + rng.normal(0.0, cal.BRISQUE_STD),
        0.0, 100.0))

    packets.sort(key=lambda p: p.ts)
    return packets, fps_true, piqe, brisque


def generate_session(
    profile: ConditionProfile,
) -> tuple[list[PacketRecord], list[SlotLabels], SessionMeta]:
    """Full session: per-slot traffic over the bandwidth profile, labels
    aligned by slot end, deterministic per seed."""
    profile.validate()
    rng = np.random.default_rng(profile.seed)
    bw = bandwidth_profile(profile, rng)
    loss = profile.loss_pct if profile.kind is ConditionKind.PACKET_LOSS else 0.0
    stable = profile.kind is ConditionKind.PACKET_LOSS
    state = _start_state(rng)

    packets: list[PacketRecord] = []
    labels: list[SlotLabels] = []
    for i in range(len(bw)):
        slot_pkts, fps, piqe, brisque = sample_slot_traffic(
            float(bw[i]), loss, rng, slot_start=float(i), state=state,
            stable_quality=stable)
        # retransmissions delayed past the end of the capture never arrive
        packets.extend(p for p in slot_pkts if p.ts <= profile.duration)
        labels.append(SlotLabels(
            key=SlotKey(session_id=profile.session_id, slot_end=i + 1),
            fps=fps, brisque=brisque, piqe=piqe,
            brisque_rating=map_rating(brisque, "brisque"),
            piqe_rating=map_rating(piqe, "piqe"),
        ))
    packets.sort(key=lambda p: p.ts)
    meta = SessionMeta(
        session_id=profile.session_id,
        condition_kind=profile.kind,
        condition_level=profile.condition_level,
        duration=profile.duration,
    )
    return packets, labels, meta


@dataclass
class CorpusSpec:
    profiles: list[ConditionProfile] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"profiles": [p.to_dict() for p in self.profiles]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CorpusSpec":
        data = json.loads(text)
        return cls(profiles=[ConditionProfile.from_dict(d) for d in data["profiles"]])


def _session_seed(root: np.random.SeedSequence, index: int) -> int:
    return int(np.random.SeedSequence(
        entropy=root.entropy, spawn_key=(index,)).generate_state(1)[0])


def default_corpus_spec(
    seed: int = 7,
    duration: float = 240.0,
    limit_per_level: int = cal.CORPUS_LIMIT_SESSIONS_PER_LEVEL,
    drop_sessions: int = cal.CORPUS_DROP_SESSIONS,
    loss_per_level: int = cal.CORPUS_LOSS_SESSIONS_PER_LEVEL,
) -> CorpusSpec:
    """Corpus layout mirroring the dataset design: bandwidth levels evenly
    distributed among limit sessions, loss percentages uniform among loss
    sessions, drop targets spread across 10-150 kBps. The default counts
    (55/22/30) weight limits most heavily, which is what lands the PIQE
    rating marginals on their calibration targets."""
    root = np.random.SeedSequence(seed)
    param_rng = np.random.default_rng(root.generate_state(4))
    profiles: list[ConditionProfile] = []
    idx = 0

    for level in BANDWIDTH_LEVELS_KBPS:
        for _ in range(limit_per_level):
            profiles.append(ConditionProfile(
                kind=ConditionKind.BANDWIDTH_LIMIT,
                session_id=f"s{idx:03d}_bw{level}",
                seed=_session_seed(root, idx),
                duration=duration, limit_kbps=float(level)))
            idx += 1

    drop_targets = np.rint(np.linspace(10, 150, drop_sessions)).astype(int)
    lo1 = max(1, int(duration * 0.10))
    hi1 = max(lo1 + 1, int(duration * 0.45))
    lo2 = max(hi1, int(duration * 0.55))
    hi2 = max(lo2 + 1, int(duration) - cal.DROP_WINDOW_S - 1)
    for target in drop_targets:
        t1 = float(param_rng.integers(lo1, hi1))
        t2 = float(param_rng.integers(lo2, hi2))
        profiles.append(ConditionProfile(
            kind=ConditionKind.BANDWIDTH_DROP,
            session_id=f"s{idx:03d}_drop{int(target)}",
            seed=_session_seed(root, idx),
            duration=duration, drop_to_kbps=float(target),
            drop_times_s=(t1, t2)))
        idx += 1

    for level in LOSS_LEVELS_PCT:
        for _ in range(loss_per_level):
            profiles.append(ConditionProfile(
                kind=ConditionKind.PACKET_LOSS,
                session_id=f"s{idx:03d}_loss{level}",
                seed=_session_seed(root, idx),
                duration=duration, loss_pct=float(level)))
            idx += 1

    return CorpusSpec(profiles=profiles)


def generate_corpus(
    spec: CorpusSpec,
) -> list[tuple[list[PacketRecord], list[SlotLabels], SessionMeta]]:
    return [generate_session(p) for p in spec.profiles]
