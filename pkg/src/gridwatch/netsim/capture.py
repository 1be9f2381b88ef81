"""Captured frames with ground-truth labels, PCAP export and JSONL form."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

from .packets import Frame, parse_frame

PCAP_MAGIC = 0xA1B2C3D4
PCAP_SNAPLEN = 65535
LINKTYPE_ETHERNET = 1

_GLOBAL = struct.Struct("<IHHiIII")
_RECORD = struct.Struct("<IIII")


@dataclass(frozen=True, slots=True)
class CaptureRecord:
    ts_us: int
    frame: bytes
    phase: str | None = None
    ttp: str | None = None

    @property
    def ts(self) -> float:
        return self.ts_us / 1e6

    @property
    def label(self) -> tuple[str, str] | None:
        return None if self.phase is None else (self.phase, self.ttp)

    def decode(self) -> Frame:
        return parse_frame(self.frame)


@dataclass
class Capture:
    records: list[CaptureRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[CaptureRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def label_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            key = r.ttp or "normal"
            counts[key] = counts.get(key, 0) + 1
        return dict(sorted(counts.items()))

    def to_jsonl(self) -> str:
        lines = [json.dumps({"ts_us": r.ts_us, "frame": r.frame.hex(), "phase": r.phase, "ttp": r.ttp})
                 for r in self.records]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str) -> Capture:
        records = []
        for line in text.splitlines():
            if line.strip():
                obj = json.loads(line)
                records.append(CaptureRecord(obj["ts_us"], bytes.fromhex(obj["frame"]), obj["phase"], obj["ttp"]))
        return cls(records)


def write_pcap(capture: Capture | list[CaptureRecord], stream: BinaryIO) -> int:
    """Write classic libpcap (microsecond, Ethernet). Returns bytes written."""
    written = stream.write(_GLOBAL.pack(PCAP_MAGIC, 2, 4, 0, 0, PCAP_SNAPLEN, LINKTYPE_ETHERNET))
    for r in capture:
        sec, usec = divmod(r.ts_us, 1_000_000)
        data = r.frame[:PCAP_SNAPLEN]
        written += stream.write(_RECORD.pack(sec, usec, len(data), len(r.frame)))
        written += stream.write(data)
    return written


def export_pcap(capture: Capture | list[CaptureRecord], destination: str | Path) -> bytes:
    """Write ``capture`` to ``destination`` and return the file contents."""
    import io

    buf = io.BytesIO()
    write_pcap(capture, buf)
    data = buf.getvalue()
    Path(destination).write_bytes(data)
    return data


def read_pcap(source: str | Path | bytes) -> Capture:
    """Read a classic pcap file written by ``write_pcap`` (labels are not stored)."""
    data = source if isinstance(source, bytes) else Path(source).read_bytes()
    magic, major, minor, _, _, _, linktype = _GLOBAL.unpack_from(data, 0)
    if magic != PCAP_MAGIC or (major, minor) != (2, 4) or linktype != LINKTYPE_ETHERNET:
        raise ValueError("not a little-endian microsecond Ethernet pcap")
    pos = _GLOBAL.size
    records = []
    while pos < len(data):
        sec, usec, incl, _ = _RECORD.unpack_from(data, pos)
        pos += _RECORD.size
        records.append(CaptureRecord(sec * 1_000_000 + usec, bytes(data[pos:pos + incl])))
        pos += incl
    return Capture(records)
