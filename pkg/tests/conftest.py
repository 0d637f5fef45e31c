"""Shared test fixtures: hand-assembled pcap/packet builders.

The builders construct frames field-by-field from the RFC wire layouts
(libpcap file format, RFC 791 IPv4, RFC 768 UDP, RFC 3550 RTP), giving the
parser tests a construction route independent of the parsing code.
"""

import struct

import pytest

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rtp_header(pt=97, seq=100, timestamp=1000, marker=False, ssrc=42,
               version=2, payload=b""):
    b0 = (version << 6)
    b1 = (0x80 if marker else 0) | (pt & 0x7F)
    return bytes([b0, b1]) + struct.pack("!HII", seq, timestamp, ssrc) + payload


def udp_datagram(sport, dport, payload):
    length = 8 + len(payload)
    return struct.pack("!HHHH", sport, dport, length, 0) + payload


def ipv4_packet(src, dst, proto, body):
    def ip(addr):
        return bytes(int(x) for x in addr.split("."))
    total = 20 + len(body)
    header = struct.pack("!BBHHHBBH", 0x45, 0, total, 0, 0, 64, proto, 0)
    return header + ip(src) + ip(dst) + body


def ethernet_frame(body, ethertype=0x0800):
    return b"\x02" * 6 + b"\x04" * 6 + struct.pack("!H", ethertype) + body


def udp_frame(src, dst, sport, dport, payload):
    return ethernet_frame(ipv4_packet(src, dst, 17, udp_datagram(sport, dport, payload)))


def tcp_frame(src, dst):
    # 20-byte TCP header, enough for the parser to identify and skip it
    tcp = struct.pack("!HHIIBBHHH", 1234, 80, 0, 0, 0x50, 0, 1024, 0, 0)
    return ethernet_frame(ipv4_packet(src, dst, 6, tcp))


def pcap_bytes(frames_with_times, magic=0xA1B2C3D4, linktype=1):
    """frames_with_times: [(abs_seconds, frame_bytes)]; classic pcap layout."""
    if magic in (0xA1B2C3D4, 0xA1B23C4D):
        bo = ">"
    else:
        bo = "<"
        magic = struct.unpack(">I", struct.pack("<I", magic))[0]
    nano = magic == 0xA1B23C4D
    out = struct.pack(bo + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)
    for ts, frame in frames_with_times:
        sec = int(ts)
        frac = round((ts - sec) * (1_000_000_000 if nano else 1_000_000))
        out += struct.pack(bo + "IIII", sec, frac, len(frame), len(frame))
        out += frame
    return out


@pytest.fixture
def golden_pcap(tmp_path):
    """3 UDP + 2 TCP packets; first UDP payload is an RTP header PT=97
    seq=100. Field values chosen so every parsed attribute is checkable
    against the construction arguments."""
    rtp = rtp_header(pt=97, seq=100, timestamp=1000, marker=True, ssrc=42,
                     payload=b"\xAA" * 40)
    frames = [
        (1699000000.5, udp_frame("10.0.0.2", "10.0.0.1", 5004, 5004, rtp)),
        (1699000000.7, tcp_frame("10.0.0.2", "10.0.0.1")),
        (1699000001.0, udp_frame("10.0.0.2", "10.0.0.1", 5006, 5006, b"\x01" * 150)),
        (1699000001.2, tcp_frame("10.0.0.1", "10.0.0.2")),
        (1699000001.5, udp_frame("10.0.0.9", "10.0.0.1", 9999, 53, b"\x02" * 30)),
    ]
    path = tmp_path / "golden.pcap"
    path.write_bytes(pcap_bytes(frames))
    return path
