"""Dissection of labeled captures into categorized indicator events.

Each captured frame becomes one event with the fields below, each tagged
Global, IT, OT or ET. Derived features (sequence deltas, rtt, trailing-window
rates, IEC-104 counter deltas, value sigma) are filled in a second pass.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import iec104 as iec
from .attacks import Phase, class_of
from .netsim import packets as pk
from .netsim.apps import IEC104_PORT, SSH_PORT
from .netsim.capture import Capture

GLOBAL, IT, OT, ET = "Global", "IT", "OT", "ET"

FIELDS: tuple[tuple[str, str], ...] = (
    ("timestamp", GLOBAL), ("categorization", GLOBAL), ("priority", GLOBAL), ("phase", GLOBAL),
    ("ttp", GLOBAL), ("id", GLOBAL),
    ("src_mac", IT), ("dst_mac", IT), ("src_ip", IT), ("dst_ip", IT), ("packet_length", IT),
    ("protocol", IT), ("sport", IT), ("dport", IT), ("window_size", IT), ("payload_size", IT),
    ("diff_seq", IT), ("diff_ack", IT), ("flag", IT), ("rtt", IT), ("frequency_general", IT),
    ("frequency_proto", IT), ("throughput", IT),
    ("iec104_frame", OT), ("diff_tx", OT), ("diff_rx", OT), ("iec104_type_id", OT), ("iec104_oa", OT),
    ("iec104_numix", OT), ("iec104_coa", OT), ("iec104_ioa", OT), ("iec104_cot", OT),
    ("iec104_value_sigma", OT),
    ("iec104_io_value", ET), ("iec104_control", ET), ("iec104_status", ET),
)
FIELD_NAMES = tuple(name for name, _ in FIELDS)
CATEGORY = dict(FIELDS)
LABEL_FIELDS = frozenset({"phase", "ttp", "id"})
# Time of day would let a model memorise the attack timeline, so it stays out too.
NON_FEATURES = LABEL_FIELDS | {"timestamp"}
CATEGORICAL = ("categorization", "src_mac", "dst_mac", "src_ip", "dst_ip", "protocol", "iec104_frame")
ALWAYS_PRESENT = frozenset({"timestamp", "categorization", "priority", "id", "src_mac", "dst_mac",
                            "packet_length", "protocol", "payload_size"})

CLASSES = ("Normal", "ArpSpoofing", "DoS", "ValueManipulation", "Replay", "SshBruteforce", "Discovery")

PHASE_PRIORITY = {
    Phase.Impact: 1, Phase.CommandAndControl: 1,
    Phase.CredentialAccess: 2, Phase.LateralMovement: 2, Phase.PrivilegeEscalation: 2,
    Phase.Execution: 3, Phase.Discovery: 3, Phase.Collection: 3, Phase.DefenseEvasion: 3,
}
NORMAL_PRIORITY = 4

# Detector rules match on link/transport observables only, so the
# categorization field never smuggles OT information into an IT-only mask.
RULE_PHASE = {
    "arp.binding-change": Phase.LateralMovement,
    "tcp.rst": Phase.Impact,
    "tcp.syn": Phase.Discovery,
    "ssh.session": Phase.CredentialAccess,
}

WINDOW_S = 1.0
SIGMA_SAMPLES = 10


def priority_for(phase: str | Phase | None) -> int:
    if phase is None:
        return NORMAL_PRIORITY
    return PHASE_PRIORITY.get(Phase(phase), NORMAL_PRIORITY)


@dataclass(slots=True)
class Event:
    timestamp: float
    categorization: str
    priority: int
    phase: str | None
    ttp: str | None
    id: int
    src_mac: str
    dst_mac: str
    src_ip: str | None = None
    dst_ip: str | None = None
    packet_length: int = 0
    protocol: str = ""
    sport: int | None = None
    dport: int | None = None
    window_size: int | None = None
    payload_size: int = 0
    diff_seq: int | None = None
    diff_ack: int | None = None
    flag: int | None = None
    rtt: float | None = None
    frequency_general: float | None = None
    frequency_proto: float | None = None
    throughput: float | None = None
    iec104_frame: str | None = None
    diff_tx: int | None = None
    diff_rx: int | None = None
    iec104_type_id: int | None = None
    iec104_oa: int | None = None
    iec104_numix: int | None = None
    iec104_coa: int | None = None
    iec104_ioa: int | None = None
    iec104_cot: int | None = None
    iec104_value_sigma: float | None = None
    iec104_io_value: float | None = None
    iec104_control: float | None = None
    iec104_status: int | None = None

    @property
    def label(self) -> str:
        return class_of(self.phase, self.ttp)

    def to_dict(self) -> dict:
        return asdict(self)


assert tuple(f.name for f in fields(Event)) == FIELD_NAMES


# -- dissect -------------------------------------------------------------------


class _Tracker:
    """State shared by the rule matcher while walking a capture."""

    def __init__(self) -> None:
        self.bindings: dict[bytes, bytes] = {}

    def categorize(self, f: pk.Frame) -> str:
        if f.arp is not None:
            if f.arp.op == 2:
                known = self.bindings.setdefault(f.arp.spa, f.arp.sha)
                if known != f.arp.sha:
                    return "arp.binding-change"
                return "arp.reply"
            return "arp.request"
        if f.tcp is None:
            return "ip.other"
        flags = f.tcp.flags
        if SSH_PORT in (f.tcp.sport, f.tcp.dport):
            return "ssh.session"
        if flags & pk.RST:
            return "tcp.rst"
        if flags & pk.SYN:
            return "tcp.synack" if flags & pk.ACK else "tcp.syn"
        if flags & pk.FIN:
            return "tcp.fin"
        if f.payload:
            return "iec104.apdu" if IEC104_PORT in (f.tcp.sport, f.tcp.dport) else "tcp.data"
        return "tcp.ack"


def _fill_iec104(ev: Event, payload: bytes) -> None:
    try:
        frames, rest = iec.split_apdus(payload)
    except iec.Iec104Error:
        ev.iec104_frame = "malformed"
        return
    if not frames:
        ev.iec104_frame = "malformed"
        return
    chosen = next((a for a in frames if isinstance(a.control, iec.IFrame)), frames[0])
    control = chosen.control
    if isinstance(control, iec.UFrame):
        ev.iec104_frame = "U"
        return
    if isinstance(control, iec.SFrame):
        ev.iec104_frame = "S"
        return
    ev.iec104_frame = "I"
    asdu = chosen.asdu
    ev.iec104_type_id = int(asdu.type_id)
    ev.iec104_oa = asdu.origin_address
    ev.iec104_numix = asdu.num_objects
    ev.iec104_coa = asdu.common_address
    ev.iec104_cot = int(asdu.cot)
    if not asdu.objects:
        return
    obj = asdu.objects[0]
    ev.iec104_ioa = obj.ioa
    value = obj.value
    if isinstance(value, (iec.SingleCommand, iec.SetpointFloat)):
        ev.iec104_control = float(value.value)
    else:
        ev.iec104_io_value = float(value.value)
        ev.iec104_status = int(value.quality)


def dissect(capture: Capture | Iterable) -> list[Event]:
    """One event per captured frame, fields straight from the headers."""
    tracker = _Tracker()
    events = []
    for i, record in enumerate(capture):
        try:
            f = pk.parse_frame(record.frame)
        except pk.MalformedFrame:
            f = None
        if f is None:
            events.append(Event(record.ts, "eth.malformed", NORMAL_PRIORITY, record.phase, record.ttp, i,
                                "", "", packet_length=len(record.frame), protocol="ETH"))
            continue
        rule = tracker.categorize(f)
        ev = Event(record.ts, rule, priority_for(RULE_PHASE.get(rule)), record.phase, record.ttp, i,
                   pk.mac_to_str(f.src), pk.mac_to_str(f.dst), packet_length=len(record.frame))
        if f.arp is not None:
            ev.protocol = "ARP"
            ev.src_ip = pk.ip_to_str(f.arp.spa)
            ev.dst_ip = pk.ip_to_str(f.arp.tpa)
        elif f.ip is not None:
            ev.src_ip = pk.ip_to_str(f.ip.src)
            ev.dst_ip = pk.ip_to_str(f.ip.dst)
            ev.protocol = "IP"
            t = f.tcp
            if t is not None:
                ev.protocol = "TCP"
                ev.sport, ev.dport = t.sport, t.dport
                ev.window_size = t.window
                ev.flag = t.flags
                ev.payload_size = len(f.payload)
                if IEC104_PORT in (t.sport, t.dport):
                    ev.protocol = "IEC104"
                    if f.payload:
                        _fill_iec104(ev, f.payload)
                elif SSH_PORT in (t.sport, t.dport):
                    ev.protocol = "SSH"
        else:
            ev.protocol = f"ETH-{f.ethertype:04x}"
        events.append(ev)
    return events


# -- derive --------------------------------------------------------------------


def _signed32(x: int) -> int:
    x &= 0xFFFFFFFF
    return x - (1 << 32) if x & 0x80000000 else x


def derive_features(events: list[Event], capture: Capture | Sequence | None = None) -> list[Event]:
    """Fill the stateful fields in place (and return the list).

    ``capture`` supplies the raw TCP and IEC-104 counters that events do not
    carry; without it the sequence, rtt and tx/rx fields stay null.
    """
    records = list(capture) if capture is not None else None
    last_seq: dict[tuple, tuple[int, int]] = {}
    pending: dict[tuple, list[tuple[int, float]]] = defaultdict(list)
    last_ctl: dict[tuple, tuple[int, int]] = {}
    values: dict[tuple[int, int], deque] = defaultdict(lambda: deque(maxlen=SIGMA_SAMPLES))
    window: deque = deque()
    proto_count: dict[str, int] = defaultdict(int)
    octets = 0

    for i, ev in enumerate(events):
        t = ev.timestamp
        window.append(ev)
        proto_count[ev.protocol] += 1
        octets += ev.packet_length
        while window and window[0].timestamp <= t - WINDOW_S:
            old = window.popleft()
            proto_count[old.protocol] -= 1
            octets -= old.packet_length
        ev.frequency_general = len(window) / WINDOW_S
        ev.frequency_proto = proto_count[ev.protocol] / WINDOW_S
        ev.throughput = octets / WINDOW_S

        if records is not None and ev.sport is not None:
            f = pk.parse_frame(records[i].frame)
            tcp = f.tcp
            flow = (ev.src_ip, ev.sport, ev.dst_ip, ev.dport)
            reverse = (ev.dst_ip, ev.dport, ev.src_ip, ev.sport)
            prev = last_seq.get(flow)
            if prev is not None:
                ev.diff_seq = _signed32(tcp.seq - prev[0])
                ev.diff_ack = _signed32(tcp.ack - prev[1])
            last_seq[flow] = (tcp.seq, tcp.ack)

            if tcp.flags & pk.ACK and pending[reverse]:
                covered = [(end, ts) for end, ts in pending[reverse] if _signed32(tcp.ack - end) >= 0]
                if covered:
                    ev.rtt = t - covered[-1][1]
                    pending[reverse] = [p for p in pending[reverse] if _signed32(tcp.ack - p[0]) < 0]
            length = len(f.payload) + (1 if tcp.flags & (pk.SYN | pk.FIN) else 0)
            if length:
                end = (tcp.seq + length) & 0xFFFFFFFF
                if not any(e == end for e, _ in pending[flow]):
                    pending[flow].append((end, t))

            if ev.iec104_frame == "I":
                try:
                    apdus, _ = iec.split_apdus(f.payload)
                    ctl = next(a.control for a in apdus if isinstance(a.control, iec.IFrame))
                except (iec.Iec104Error, StopIteration):
                    ctl = None
                if ctl is not None:
                    prev_ctl = last_ctl.get(flow)
                    if prev_ctl is not None:
                        ev.diff_tx = (ctl.tx_seq - prev_ctl[0]) % 32768
                        ev.diff_rx = (ctl.rx_seq - prev_ctl[1]) % 32768
                    last_ctl[flow] = (ctl.tx_seq, ctl.rx_seq)

        if ev.iec104_io_value is not None and ev.iec104_coa is not None:
            series = values[(ev.iec104_coa, ev.iec104_ioa)]
            series.append(ev.iec104_io_value)
            if len(series) >= 2 and all(math.isfinite(v) for v in series):
                ev.iec104_value_sigma = float(np.std(np.fromiter(series, float)))
    return events


def events_from_capture(capture: Capture) -> list[Event]:
    return derive_features(dissect(capture), capture)


# -- persistence ---------------------------------------------------------------


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def to_jsonl(events: Iterable[Event]) -> str:
    out = io.StringIO()
    for ev in events:
        row = {name: _clean(getattr(ev, name)) for name in FIELD_NAMES}
        out.write(json.dumps(row, separators=(",", ":")) + "\n")
    return out.getvalue()


def write_jsonl(events: Iterable[Event], path: str | Path) -> None:
    Path(path).write_text(to_jsonl(events), encoding="utf-8")


class SchemaError(ValueError):
    pass


def from_jsonl(text: str) -> list[Event]:
    events = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {n}: {exc.msg}") from None
        if not isinstance(row, dict) or set(row) != set(FIELD_NAMES):
            raise SchemaError(f"line {n}: fields do not match the event schema")
        events.append(Event(**row))
    return events


def read_jsonl(path: str | Path) -> list[Event]:
    return from_jsonl(Path(path).read_text(encoding="utf-8"))


# -- masks and datasets --------------------------------------------------------

ALL_MASKS: tuple[frozenset[str], ...] = tuple(
    frozenset(c) for r in (1, 2, 3) for c in itertools.combinations((IT, OT, ET), r)
)


def mask_name(mask: Iterable[str]) -> str:
    return "+".join(c for c in (IT, OT, ET) if c in set(mask))


def parse_mask(text: str) -> frozenset[str]:
    parts = frozenset(p.strip().upper() for p in text.replace(",", "+").split("+") if p.strip())
    if not parts or not parts <= {IT, OT, ET}:
        raise ValueError(f"invalid mask {text!r}: use a non-empty combination of IT, OT, ET")
    return parts


def feature_fields(mask: Iterable[str]) -> list[str]:
    mask = set(mask)
    if not mask or not mask <= {IT, OT, ET}:
        raise ValueError(f"invalid mask {sorted(mask)}")
    return [name for name, cat in FIELDS
            if name not in NON_FEATURES and (cat == GLOBAL or cat in mask)]


def build_vocabulary(events: Sequence[Event]) -> dict[str, list[str]]:
    return {name: sorted({getattr(ev, name) for ev in events if getattr(ev, name) is not None})
            for name in CATEGORICAL}


class EmptyClass(ValueError):
    def __init__(self, name: str):
        super().__init__(f"class {name} has no instances")
        self.name = name


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray  # class names
    columns: list[str]
    classes: tuple[str, ...] = CLASSES
    mask: frozenset[str] = frozenset({IT, OT, ET})
    ids: np.ndarray | None = None
    timestamps: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, rows) -> LabeledDataset:
        rows = np.asarray(rows, dtype=int)
        return LabeledDataset(self.X[rows], self.y[rows], list(self.columns), self.classes, self.mask,
                              None if self.ids is None else self.ids[rows],
                              None if self.timestamps is None else self.timestamps[rows])

    def class_counts(self) -> dict[str, int]:
        return {c: int(np.sum(self.y == c)) for c in self.classes}

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(list(self.columns) + ["label"])
        for row, label in zip(self.X, self.y):
            writer.writerow([repr(float(v)) for v in row] + [label])
        return out.getvalue()


def apply_mask(events: Sequence[Event], mask: Iterable[str],
               vocabulary: dict[str, list[str]] | None = None,
               classes: tuple[str, ...] = CLASSES) -> LabeledDataset:
    """Encode the events' masked fields into a numeric matrix.

    Categoricals become their index in the sorted vocabulary; nulls become -1
    and every nullable field gets a companion ``<name>__present`` column.
    """
    mask = frozenset(mask)
    names = feature_fields(mask)
    vocab = vocabulary if vocabulary is not None else build_vocabulary(events)
    lookup = {k: {v: i for i, v in enumerate(vs)} for k, vs in vocab.items()}
    columns: list[str] = []
    for name in names:
        columns.append(name)
        if name not in ALWAYS_PRESENT:
            columns.append(name + "__present")
    X = np.empty((len(events), len(columns)), dtype=float)
    for r, ev in enumerate(events):
        c = 0
        for name in names:
            value = getattr(ev, name)
            if name in lookup:
                value = None if value is None else lookup[name].get(value, len(lookup[name]))
            X[r, c] = -1.0 if value is None or (isinstance(value, float) and not math.isfinite(value)) \
                else float(value)
            c += 1
            if name not in ALWAYS_PRESENT:
                X[r, c] = 0.0 if value is None else 1.0
                c += 1
    y = np.array([ev.label for ev in events], dtype=object)
    ids = np.array([ev.id for ev in events], dtype=int)
    ts = np.array([ev.timestamp for ev in events], dtype=float)
    return LabeledDataset(X, y, columns, classes, mask, ids, ts)


def balance_sample(dataset: LabeledDataset, seed: int) -> LabeledDataset:
    """Downsample every class, without replacement, to the smallest class size."""
    counts = dataset.class_counts()
    for name in dataset.classes:
        if counts[name] == 0:
            raise EmptyClass(name)
    n = min(counts.values())
    rng = np.random.default_rng(seed)
    rows = []
    for name in dataset.classes:
        idx = np.flatnonzero(dataset.y == name)
        rows.append(np.sort(rng.choice(idx, size=n, replace=False)))
    order = np.concatenate(rows)
    return dataset.subset(order[rng.permutation(len(order))])


def binarize_labels(dataset: LabeledDataset) -> dict[str, np.ndarray]:
    return {c: (dataset.y == c).astype(int) for c in dataset.classes}
