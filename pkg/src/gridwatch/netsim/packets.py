"""Ethernet / ARP / IPv4 / TCP frame building and parsing."""

from __future__ import annotations

import struct
import sys
from array import array
from dataclasses import dataclass

ETH_IPV4 = 0x0800
ETH_ARP = 0x0806
IPPROTO_TCP = 6
MIN_FRAME = 60  # without FCS

FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10

BROADCAST = b"\xff" * 6
ZERO_MAC = b"\x00" * 6

_ETH = struct.Struct("!6s6sH")
_ARP = struct.Struct("!HHBBH6s4s6s4s")
_IP = struct.Struct("!BBHHHBBH4s4s")
_TCP = struct.Struct("!HHIIBBHHH")


def internet_checksum(data: bytes) -> int:
    """One's complement of the one's complement sum of 16-bit words."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    total = sum(array("H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    total = ~total & 0xFFFF
    if sys.byteorder == "little":
        total = ((total >> 8) | (total << 8)) & 0xFFFF
    return total


def mac_to_str(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def mac_from_str(text: str) -> bytes:
    return bytes(int(part, 16) for part in text.split(":"))


def ip_to_str(ip: bytes) -> str:
    return ".".join(str(b) for b in ip)


def ip_from_str(text: str) -> bytes:
    return bytes(int(part) for part in text.split("."))


def ethernet(dst: bytes, src: bytes, ethertype: int, payload: bytes) -> bytes:
    frame = _ETH.pack(dst, src, ethertype) + payload
    if len(frame) < MIN_FRAME:
        frame += b"\x00" * (MIN_FRAME - len(frame))
    return frame


def arp_packet(op: int, sha: bytes, spa: bytes, tha: bytes, tpa: bytes) -> bytes:
    return _ARP.pack(1, ETH_IPV4, 6, 4, op, sha, spa, tha, tpa)


def arp_frame(op: int, src_mac: bytes, dst_mac: bytes, sha: bytes, spa: bytes, tha: bytes, tpa: bytes) -> bytes:
    return ethernet(dst_mac, src_mac, ETH_ARP, arp_packet(op, sha, spa, tha, tpa))


def ipv4_header(src: bytes, dst: bytes, payload_len: int, ident: int = 0, ttl: int = 64,
                proto: int = IPPROTO_TCP) -> bytes:
    header = _IP.pack(0x45, 0, 20 + payload_len, ident & 0xFFFF, 0x4000, ttl, proto, 0, src, dst)
    csum = internet_checksum(header)
    return header[:10] + csum.to_bytes(2, "big") + header[12:]


def tcp_checksum(src_ip: bytes, dst_ip: bytes, segment: bytes) -> int:
    pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, IPPROTO_TCP, len(segment))
    return internet_checksum(pseudo + segment)


def tcp_segment(src_ip: bytes, dst_ip: bytes, sport: int, dport: int, seq: int, ack: int,
                flags: int, window: int, payload: bytes = b"") -> bytes:
    header = _TCP.pack(sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF, 5 << 4, flags, window, 0, 0)
    csum = tcp_checksum(src_ip, dst_ip, header + payload)
    return header[:16] + csum.to_bytes(2, "big") + header[18:] + payload


def tcp_frame(src_mac: bytes, dst_mac: bytes, src_ip: bytes, dst_ip: bytes, sport: int, dport: int,
              seq: int, ack: int, flags: int, window: int, payload: bytes = b"", ident: int = 0) -> bytes:
    segment = tcp_segment(src_ip, dst_ip, sport, dport, seq, ack, flags, window, payload)
    return ethernet(dst_mac, src_mac, ETH_IPV4, ipv4_header(src_ip, dst_ip, len(segment), ident) + segment)


@dataclass(slots=True)
class ArpInfo:
    op: int
    sha: bytes
    spa: bytes
    tha: bytes
    tpa: bytes


@dataclass(slots=True)
class IpInfo:
    src: bytes
    dst: bytes
    total_length: int
    ident: int
    ttl: int
    proto: int
    checksum: int
    header_len: int


@dataclass(slots=True)
class TcpInfo:
    sport: int
    dport: int
    seq: int
    ack: int
    flags: int
    window: int
    checksum: int
    header_len: int


@dataclass(slots=True)
class Frame:
    """Decoded view of an Ethernet frame."""

    dst: bytes
    src: bytes
    ethertype: int
    arp: ArpInfo | None = None
    ip: IpInfo | None = None
    tcp: TcpInfo | None = None
    payload: bytes = b""


class MalformedFrame(ValueError):
    pass


def parse_frame(frame: bytes) -> Frame:
    if len(frame) < 14:
        raise MalformedFrame("frame shorter than an Ethernet header")
    dst, src, ethertype = _ETH.unpack_from(frame, 0)
    out = Frame(dst, src, ethertype)
    if ethertype == ETH_ARP:
        if len(frame) < 42:
            raise MalformedFrame("truncated ARP")
        _, _, _, _, op, sha, spa, tha, tpa = _ARP.unpack_from(frame, 14)
        out.arp = ArpInfo(op, sha, spa, tha, tpa)
    elif ethertype == ETH_IPV4:
        if len(frame) < 34:
            raise MalformedFrame("truncated IPv4")
        vihl, _, total, ident, _, ttl, proto, csum, s, d = _IP.unpack_from(frame, 14)
        ihl = (vihl & 0x0F) * 4
        if len(frame) < 14 + total or total < ihl:
            raise MalformedFrame("IPv4 total length exceeds frame")
        out.ip = IpInfo(s, d, total, ident, ttl, proto, csum, ihl)
        if proto == IPPROTO_TCP:
            start = 14 + ihl
            sport, dport, seq, ack, off, flags, win, tcsum, _ = _TCP.unpack_from(frame, start)
            thl = (off >> 4) * 4
            out.tcp = TcpInfo(sport, dport, seq, ack, flags, win, tcsum, thl)
            out.payload = bytes(frame[start + thl:14 + total])
    return out


def checksums_valid(frame: bytes) -> bool:
    """Independent re-verification of IPv4 and TCP checksums (ARP frames pass)."""
    f = parse_frame(frame)
    if f.ip is None:
        return True
    header = frame[14:14 + f.ip.header_len]
    if internet_checksum(header) != 0:
        return False
    if f.tcp is None:
        return True
    segment = frame[14 + f.ip.header_len:14 + f.ip.total_length]
    return tcp_checksum(f.ip.src, f.ip.dst, segment) == 0


def rewrite_tcp(frame: bytes, *, src_mac: bytes | None = None, dst_mac: bytes | None = None,
                seq: int | None = None, ack: int | None = None, flags: int | None = None,
                payload: bytes | None = None) -> bytes:
    """Return a copy of a TCP frame with fields replaced and lengths/checksums repaired."""
    f = parse_frame(frame)
    if f.tcp is None:
        raise MalformedFrame("not a TCP frame")
    t = f.tcp
    segment = tcp_segment(f.ip.src, f.ip.dst, t.sport, t.dport,
                          t.seq if seq is None else seq, t.ack if ack is None else ack,
                          t.flags if flags is None else flags, t.window,
                          f.payload if payload is None else payload)
    ip = ipv4_header(f.ip.src, f.ip.dst, len(segment), f.ip.ident, f.ip.ttl)
    return ethernet(f.dst if dst_mac is None else dst_mac, f.src if src_mac is None else src_mac,
                    ETH_IPV4, ip + segment)


def rewrite_l2(frame: bytes, src_mac: bytes, dst_mac: bytes) -> bytes:
    return dst_mac + src_mac + frame[12:]
