"""Parse packet traces (libpcap files or packet-log CSV) into PacketRecord sequences.

Only UDP traffic is extracted; timestamps are rebased so the first returned
packet sits at t=0. RTP header fields are pulled heuristically from the UDP
payload when the fixed 12-byte header layout is plausible.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

__all__ = [
    "RtpFields",
    "PacketRecord",
    "ConditionKind",
    "SessionMeta",
    "ParseSummary",
    "MalformedPcap",
    "SchemaError",
    "RowError",
    "parse_rtp_heuristic",
    "parse_pcap",
    "parse_packet_csv",
    "write_packet_csv",
    "ip_pair_filter",
]

# Closed vocabulary of the dataset design (kBps limits / loss percentages).
BANDWIDTH_LEVELS_KBPS = (250, 125, 60, 30, 15)
LOSS_LEVELS_PCT = (0, 1, 2, 5, 10)
DROP_TO_RANGE_KBPS = (10, 150)


class MalformedPcap(Exception):
    """Bad magic number or truncated pcap record."""


class SchemaError(Exception):
    """Packet CSV header does not match the expected schema."""


class RowError(Exception):
    """A CSV row holds an unparsable or invariant-violating value."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class RtpFields:
    payload_type: int  # 7 bits
    seq: int           # 16 bits
    timestamp: int     # 32-bit media clock
    marker: bool
    ssrc: int          # 32 bits


@dataclass(frozen=True)
class PacketRecord:
    ts: float          # seconds since session start
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    payload_len: int   # UDP length field minus the 8-byte UDP header
    rtp: Optional[RtpFields] = None


class ConditionKind(str, Enum):
    BANDWIDTH_LIMIT = "BandwidthLimit"
    BANDWIDTH_DROP = "BandwidthDrop"
    PACKET_LOSS = "PacketLoss"


@dataclass
class SessionMeta:
    session_id: str
    condition_kind: Optional[ConditionKind] = None
    condition_level: Optional[str] = None
    duration: float = 0.0
    start_time: Optional[float] = None  # absolute epoch of the first packet

    def validate(self) -> None:
        if self.condition_kind is None:
            return
        level = self.condition_level or ""
        if self.condition_kind is ConditionKind.BANDWIDTH_LIMIT:
            allowed = {f"{v}kBps" for v in BANDWIDTH_LEVELS_KBPS}
            if level not in allowed:
                raise ValueError(f"bandwidth level {level!r} not in {sorted(allowed)}")
        elif self.condition_kind is ConditionKind.PACKET_LOSS:
            allowed = {f"loss{v}pct" for v in LOSS_LEVELS_PCT}
            if level not in allowed:
                raise ValueError(f"loss level {level!r} not in {sorted(allowed)}")
        elif self.condition_kind is ConditionKind.BANDWIDTH_DROP:
            if not (level.startswith("drop") and level.endswith("kBps")):
                raise ValueError(f"drop level {level!r} must look like 'drop50kBps'")
            lo, hi = DROP_TO_RANGE_KBPS
            value = int(level[len("drop"):-len("kBps")])
            if not lo <= value <= hi:
                raise ValueError(f"drop-to bandwidth {value} outside [{lo}, {hi}] kBps")


@dataclass
class ParseSummary:
    udp: int = 0
    skipped: int = 0    # non-UDP packets
    filtered: int = 0   # UDP packets rejected by the caller's filter


def parse_rtp_heuristic(payload: bytes) -> Optional[RtpFields]:
    """Read RTP fields from the fixed 12-byte header, or None if implausible.

    Only bytes 0..11 are ever inspected: the remainder of the payload is
    encrypted. Header extensions and CSRC lists are tolerated because every
    field we need sits at a fixed offset before them.
    """
    if len(payload) < 12:
        return None
    if payload[0] >> 6 != 2:  # RTP version must be 2
        return None
    marker = bool(payload[1] & 0x80)
    payload_type = payload[1] & 0x7F
    seq, timestamp, ssrc = struct.unpack_from("!HII", payload, 2)
    return RtpFields(payload_type=payload_type, seq=seq, timestamp=timestamp,
                     marker=marker, ssrc=ssrc)


# libpcap magic numbers: (byte order, timestamp resolution divisor)
_PCAP_MAGICS = {
    0xA1B2C3D4: (">", 1_000_000),
    0xD4C3B2A1: ("<", 1_000_000),
    0xA1B23C4D: (">", 1_000_000_000),
    0x4D3CB2A1: ("<", 1_000_000_000),
}

_LINKTYPE_ETHERNET = 1
_LINKTYPE_RAW = 101

PacketFilter = Callable[[PacketRecord], bool]


def ip_pair_filter(ip_a: str, ip_b: str) -> PacketFilter:
    """Keep packets exchanged between two addresses, either direction."""
    pair = {ip_a, ip_b}
    return lambda pkt: {pkt.src_ip, pkt.dst_ip} == pair


def parse_pcap(
    path, packet_filter: Optional[PacketFilter] = None
) -> tuple[list[PacketRecord], SessionMeta, ParseSummary]:
    """Extract UDP packets from a classic libpcap file.

    Returns the records (timestamps rebased so the first kept packet is 0),
    a SessionMeta stub carrying the absolute start time, and a parse summary
    with skip counts. Raises MalformedPcap on a bad global header or a
    truncated packet record.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24:
        raise MalformedPcap(f"{path}: file shorter than pcap global header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in _PCAP_MAGICS:
        raise MalformedPcap(f"{path}: unknown magic 0x{magic:08x}")
    bo, ts_div = _PCAP_MAGICS[magic]
    linktype = struct.unpack(bo + "I", data[20:24])[0]
    if linktype not in (_LINKTYPE_ETHERNET, _LINKTYPE_RAW):
        raise MalformedPcap(f"{path}: unsupported linktype {linktype}")

    records: list[PacketRecord] = []
    summary = ParseSummary()
    offset = 24
    rec_hdr = struct.Struct(bo + "IIII")
    while offset < len(data):
        if offset + 16 > len(data):
            raise MalformedPcap(f"{path}: truncated record header at {offset}")
        ts_sec, ts_frac, incl_len, orig_len = rec_hdr.unpack_from(data, offset)
        offset += 16
        if offset + incl_len > len(data):
            raise MalformedPcap(f"{path}: truncated packet data at {offset}")
        frame = data[offset:offset + incl_len]
        offset += incl_len
        ts = ts_sec + ts_frac / ts_div
        pkt = _decode_frame(frame, linktype, ts)
        if pkt is None:
            summary.skipped += 1
            continue
        if packet_filter is not None and not packet_filter(pkt):
            summary.filtered += 1
            continue
        summary.udp += 1
        records.append(pkt)

    start_time = records[0].ts if records else None
    if records:
        t0 = records[0].ts
        records = [
            PacketRecord(ts=p.ts - t0, src_ip=p.src_ip, dst_ip=p.dst_ip,
                         src_port=p.src_port, dst_port=p.dst_port,
                         payload_len=p.payload_len, rtp=p.rtp)
            for p in records
        ]
    duration = records[-1].ts if records else 0.0
    meta = SessionMeta(session_id="", duration=duration, start_time=start_time)
    return records, meta, summary


def _decode_frame(frame: bytes, linktype: int, ts: float) -> Optional[PacketRecord]:
    """Decode one captured frame down to UDP; None for anything else."""
    if linktype == _LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return None
        ethertype = struct.unpack_from("!H", frame, 12)[0]
        ip_off = 14
        if ethertype == 0x8100:  # single 802.1Q tag
            if len(frame) < 18:
                return None
            ethertype = struct.unpack_from("!H", frame, 16)[0]
            ip_off = 18
        if ethertype == 0x0800:
            return _decode_ipv4(frame, ip_off, ts)
        if ethertype == 0x86DD:
            return _decode_ipv6(frame, ip_off, ts)
        return None
    # raw IP: version nibble picks the decoder
    if not frame:
        return None
    version = frame[0] >> 4
    if version == 4:
        return _decode_ipv4(frame, 0, ts)
    if version == 6:
        return _decode_ipv6(frame, 0, ts)
    return None


def _decode_ipv4(frame: bytes, off: int, ts: float) -> Optional[PacketRecord]:
    if len(frame) < off + 20:
        return None
    ihl = (frame[off] & 0x0F) * 4
    proto = frame[off + 9]
    frag = struct.unpack_from("!H", frame, off + 6)[0] & 0x1FFF
    if proto != 17 or frag != 0 or len(frame) < off + ihl + 8:
        return None
    src = ".".join(str(b) for b in frame[off + 12:off + 16])
    dst = ".".join(str(b) for b in frame[off + 16:off + 20])
    return _decode_udp(frame, off + ihl, src, dst, ts)


def _decode_ipv6(frame: bytes, off: int, ts: float) -> Optional[PacketRecord]:
    # basic address extraction only: UDP must be the immediate next header
    if len(frame) < off + 40 or frame[off + 6] != 17:
        return None
    src = _ipv6_str(frame[off + 8:off + 24])
    dst = _ipv6_str(frame[off + 24:off + 40])
    return _decode_udp(frame, off + 40, src, dst, ts)


def _ipv6_str(raw: bytes) -> str:
    return ":".join(f"{raw[i] << 8 | raw[i + 1]:x}" for i in range(0, 16, 2))


def _decode_udp(frame: bytes, off: int, src: str, dst: str, ts: float) -> Optional[PacketRecord]:
    if len(frame) < off + 8:
        return None
    sport, dport, udp_len = struct.unpack_from("!HHH", frame, off)
    payload_len = max(udp_len - 8, 0)
    payload = frame[off + 8:off + 8 + payload_len]  # may be snaplen-truncated
    return PacketRecord(ts=ts, src_ip=src, dst_ip=dst, src_port=sport,
                        dst_port=dport, payload_len=payload_len,
                        rtp=parse_rtp_heuristic(payload))


_CSV_BASE = ["ts", "src_ip", "dst_ip", "src_port", "dst_port", "payload_len"]
_CSV_RTP = ["rtp_pt", "rtp_seq", "rtp_ts", "rtp_marker", "rtp_ssrc"]


def parse_packet_csv(path) -> list[PacketRecord]:
    """Read a packet-log CSV; rows keep file order, ts rebased to start at 0.

    The header must be exactly the base schema, optionally followed by all
    five RTP columns. Raises SchemaError on a header mismatch and RowError
    (with the 1-based line number) on a bad value.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header == _CSV_BASE:
            with_rtp = False
        elif header == _CSV_BASE + _CSV_RTP:
            with_rtp = True
        else:
            raise SchemaError(f"{path}: header {header!r} does not match "
                              f"{_CSV_BASE}[+{_CSV_RTP}]")
        records = []
        for line_no, row in enumerate(reader, start=2):
            records.append(_parse_row(row, line_no, with_rtp))
    if records and records[0].ts != 0.0:
        t0 = records[0].ts
        records = [
            PacketRecord(ts=p.ts - t0, src_ip=p.src_ip, dst_ip=p.dst_ip,
                         src_port=p.src_port, dst_port=p.dst_port,
                         payload_len=p.payload_len, rtp=p.rtp)
            for p in records
        ]
    return records


def _parse_row(row: list[str], line_no: int, with_rtp: bool) -> PacketRecord:
    expected = 11 if with_rtp else 6
    if len(row) != expected:
        raise RowError(line_no, f"expected {expected} fields, got {len(row)}")
    try:
        ts = float(row[0])
        src_port, dst_port, payload_len = int(row[3]), int(row[4]), int(row[5])
    except ValueError as exc:
        raise RowError(line_no, str(exc)) from None
    if ts < 0:
        raise RowError(line_no, f"negative ts {ts}")
    if payload_len < 0:
        raise RowError(line_no, f"negative payload_len {payload_len}")
    if not (0 <= src_port <= 65535 and 0 <= dst_port <= 65535):
        raise RowError(line_no, "port outside [0, 65535]")
    rtp = None
    if with_rtp and any(cell != "" for cell in row[6:]):
        # a packet with no parsed RTP header leaves all five cells empty
        if any(cell == "" for cell in row[6:]):
            raise RowError(line_no, "RTP cells must be all set or all empty")
        try:
            pt, seq, rtp_ts = int(row[6]), int(row[7]), int(row[8])
            marker, ssrc = int(row[9]), int(row[10])
        except ValueError as exc:
            raise RowError(line_no, str(exc)) from None
        if not 0 <= pt <= 127:
            raise RowError(line_no, f"payload type {pt} outside [0, 127]")
        if not 0 <= seq <= 65535:
            raise RowError(line_no, f"seq {seq} outside [0, 65535]")
        rtp = RtpFields(payload_type=pt, seq=seq, timestamp=rtp_ts,
                        marker=bool(marker), ssrc=ssrc)
    return PacketRecord(ts=ts, src_ip=row[1], dst_ip=row[2],
                        src_port=src_port, dst_port=dst_port,
                        payload_len=payload_len, rtp=rtp)


def write_packet_csv(path, packets: Sequence[PacketRecord]) -> None:
    """Write packets in the parse_packet_csv schema. The RTP columns appear
    iff any packet carries RTP fields; packets without them leave those
    cells empty."""
    with_rtp = any(p.rtp is not None for p in packets)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_BASE + _CSV_RTP if with_rtp else _CSV_BASE)
        for p in packets:
            row = [repr(float(p.ts)), p.src_ip, p.dst_ip, p.src_port,
                   p.dst_port, p.payload_len]
            if with_rtp:
                if p.rtp is None:
                    row += ["", "", "", "", ""]
                else:
                    row += [p.rtp.payload_type, p.rtp.seq, p.rtp.timestamp,
                            int(p.rtp.marker), p.rtp.ssrc]
            writer.writerow(row)
