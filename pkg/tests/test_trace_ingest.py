import struct

import numpy as np
import pytest

from qoe_lens.trace_ingest import (
    ConditionKind,
    MalformedPcap,
    PacketRecord,
    RowError,
    RtpFields,
    SchemaError,
    SessionMeta,
    ip_pair_filter,
    parse_packet_csv,
    parse_pcap,
    parse_rtp_heuristic,
    write_packet_csv,
)

from conftest import pcap_bytes, rtp_header, udp_frame


class TestParsePcap:
    def test_mixed_udp_tcp_counts(self, golden_pcap):
        records, meta, summary = parse_pcap(golden_pcap)
        assert len(records) == 3
        assert summary.udp == 3
        assert summary.skipped == 2

    def test_timestamps_rebased_to_first_udp(self, golden_pcap):
        records, meta, _ = parse_pcap(golden_pcap)
        assert records[0].ts == 0.0
        assert records[1].ts == pytest.approx(0.5)
        assert meta.start_time == pytest.approx(1699000000.5)
        assert meta.duration == pytest.approx(1.0)

    def test_golden_rtp_fields(self, golden_pcap):
        records, _, _ = parse_pcap(golden_pcap)
        first = records[0]
        assert first.src_ip == "10.0.0.2"
        assert first.dst_ip == "10.0.0.1"
        assert first.src_port == 5004
        assert first.payload_len == 52  # 12-byte RTP header + 40 payload
        assert first.rtp == RtpFields(payload_type=97, seq=100, timestamp=1000,
                                      marker=True, ssrc=42)
        # the 150-byte non-RTP payload must not sprout RTP fields
        assert records[1].rtp is None

    @pytest.mark.parametrize("magic", [0xD4C3B2A1, 0xA1B23C4D, 0x4D3CB2A1])
    def test_endianness_and_nanosecond_variants(self, tmp_path, magic):
        rtp = rtp_header(pt=97, seq=7, timestamp=50, ssrc=9)
        frames = [(100.000002, udp_frame("1.2.3.4", "5.6.7.8", 10, 20, rtp)),
                  (100.500002, udp_frame("1.2.3.4", "5.6.7.8", 10, 20, rtp))]
        path = tmp_path / "v.pcap"
        path.write_bytes(pcap_bytes(frames, magic=magic))
        records, _, _ = parse_pcap(path)
        assert len(records) == 2
        assert records[1].ts == pytest.approx(0.5, abs=1e-6)
        assert records[0].rtp.payload_type == 97

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pcap"
        path.write_bytes(b"\x00" * 40)
        with pytest.raises(MalformedPcap):
            parse_pcap(path)

    def test_truncated_record_rejected(self, tmp_path, golden_pcap):
        data = golden_pcap.read_bytes()
        path = tmp_path / "trunc.pcap"
        path.write_bytes(data[:-10])
        with pytest.raises(MalformedPcap):
            parse_pcap(path)

    def test_ip_pair_filter(self, golden_pcap):
        records, _, summary = parse_pcap(
            golden_pcap, ip_pair_filter("10.0.0.1", "10.0.0.2"))
        assert len(records) == 2
        assert summary.filtered == 1
        assert all({p.src_ip, p.dst_ip} == {"10.0.0.1", "10.0.0.2"}
                   for p in records)


class TestRtpHeuristic:
    def test_hand_assembled_header(self):
        # RFC 3550 layout: V=2 P=0 X=0 CC=0 | M=1 PT=97 | seq | ts | ssrc
        payload = bytes([0x80, 0xE1]) + struct.pack("!HII", 4660, 305419896, 1)
        fields = parse_rtp_heuristic(payload)
        assert fields == RtpFields(payload_type=97, seq=4660,
                                   timestamp=305419896, marker=True, ssrc=1)

    def test_marker_bit_clear(self):
        fields = parse_rtp_heuristic(rtp_header(pt=120, seq=1, marker=False))
        assert fields.payload_type == 120
        assert fields.marker is False

    def test_below_minimum_length(self):
        assert parse_rtp_heuristic(b"\x80" * 8) is None

    def test_wrong_version_bits(self):
        assert parse_rtp_heuristic(rtp_header(version=0)) is None
        assert parse_rtp_heuristic(rtp_header(version=1)) is None
        assert parse_rtp_heuristic(rtp_header(version=3)) is None

    def test_only_first_twelve_bytes_matter(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            payload = bytes(rng.integers(0, 256, size=rng.integers(12, 80)))
            assert parse_rtp_heuristic(payload) == parse_rtp_heuristic(payload[:12])


def _random_records(rng, n, with_rtp):
    records = []
    ts = 0.0
    for i in range(n):
        rtp = None
        if with_rtp:
            rtp = RtpFields(payload_type=int(rng.integers(0, 128)),
                            seq=int(rng.integers(0, 65536)),
                            timestamp=int(rng.integers(0, 2**32)),
                            marker=bool(rng.integers(0, 2)),
                            ssrc=int(rng.integers(0, 2**32)))
        records.append(PacketRecord(
            ts=ts, src_ip="10.0.0.2", dst_ip="10.0.0.1",
            src_port=int(rng.integers(0, 65536)), dst_port=5004,
            payload_len=int(rng.integers(0, 1500)), rtp=rtp))
        ts += float(rng.uniform(0, 0.01))
    return records


class TestPacketCsv:
    def test_example_row_with_rtp(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text(
            "ts,src_ip,dst_ip,src_port,dst_port,payload_len,"
            "rtp_pt,rtp_seq,rtp_ts,rtp_marker,rtp_ssrc\n"
            "0.0,10.0.0.1,10.0.0.2,5004,5004,1054,97,1,1000,0,42\n")
        (rec,) = parse_packet_csv(path)
        assert rec.payload_len == 1054
        assert rec.rtp == RtpFields(97, 1, 1000, False, 42)

    def test_no_rtp_columns_gives_no_rtp(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("ts,src_ip,dst_ip,src_port,dst_port,payload_len\n"
                        "0.0,a,b,1,2,100\n0.5,a,b,1,2,200\n")
        records = parse_packet_csv(path)
        assert all(r.rtp is None for r in records)

    def test_negative_payload_len_is_row_error(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("ts,src_ip,dst_ip,src_port,dst_port,payload_len\n"
                        "0.0,a,b,1,2,-5\n")
        with pytest.raises(RowError) as err:
            parse_packet_csv(path)
        assert err.value.line == 2

    def test_header_mismatch_is_schema_error(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("ts,src,dst\n0,a,b\n")
        with pytest.raises(SchemaError):
            parse_packet_csv(path)

    def test_rebases_when_first_ts_nonzero(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("ts,src_ip,dst_ip,src_port,dst_port,payload_len\n"
                        "3.5,a,b,1,2,100\n4.0,a,b,1,2,200\n")
        records = parse_packet_csv(path)
        assert [r.ts for r in records] == [0.0, 0.5]

    @pytest.mark.parametrize("with_rtp", [False, True])
    def test_roundtrip_identity(self, tmp_path, with_rtp):
        rng = np.random.default_rng(11 if with_rtp else 12)
        records = _random_records(rng, 50, with_rtp)
        path = tmp_path / "rt.csv"
        write_packet_csv(path, records)
        assert parse_packet_csv(path) == records

    def test_pcap_and_csv_export_agree(self, tmp_path, golden_pcap):
        records, _, _ = parse_pcap(golden_pcap)
        path = tmp_path / "export.csv"
        write_packet_csv(path, records)
        assert parse_packet_csv(path) == records


class TestSessionMeta:
    def test_valid_levels(self):
        SessionMeta("a", ConditionKind.BANDWIDTH_LIMIT, "250kBps", 240).validate()
        SessionMeta("b", ConditionKind.PACKET_LOSS, "loss5pct", 240).validate()
        SessionMeta("c", ConditionKind.BANDWIDTH_DROP, "drop50kBps", 240).validate()

    @pytest.mark.parametrize("kind,level", [
        (ConditionKind.BANDWIDTH_LIMIT, "100kBps"),
        (ConditionKind.PACKET_LOSS, "loss3pct"),
        (ConditionKind.BANDWIDTH_DROP, "drop500kBps"),
        (ConditionKind.BANDWIDTH_DROP, "50kBps"),
    ])
    def test_out_of_vocabulary_levels(self, kind, level):
        with pytest.raises(ValueError):
            SessionMeta("x", kind, level, 240).validate()

    def test_stub_without_condition_passes(self):
        SessionMeta("stub").validate()
