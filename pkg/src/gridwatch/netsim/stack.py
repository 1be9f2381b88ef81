"""Host network stack: ARP cache and a simplified TCP.

The TCP keeps only what the scenario exercises: three-way handshake, in-order
delivery with immediate ACKs, go-back-N retransmission on a fixed 1 s timer
with at most three retries, FIN teardown and RST handling. There is no
congestion control and the advertised window is a per-role constant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Protocol

from . import packets as pk
from .engine import US, Timer

if TYPE_CHECKING:
    from .sim import Simulation

MSS = 536
RTO_US = US
MAX_RETRIES = 3
ARP_RETRY_US = US
ARP_MAX_TRIES = 3
EPHEMERAL = (49152, 65535)

Label = "tuple[str, str] | None"


class Role(str, enum.Enum):
    MTU = "mtu"
    RTU = "rtu"
    SWITCH = "switch"
    FIREWALL = "firewall"
    ATTACKER = "attacker"


WINDOW = {Role.MTU: 8192, Role.RTU: 2048, Role.ATTACKER: 512, Role.SWITCH: 1024, Role.FIREWALL: 1024}


class TcpState(str, enum.Enum):
    CLOSED = "CLOSED"
    SYN_SENT = "SYN_SENT"
    SYN_RCVD = "SYN_RCVD"
    ESTABLISHED = "ESTABLISHED"
    RESET = "RESET"
    CLOSED_FIN = "CLOSED_FIN"


def seq_lt(a: int, b: int) -> bool:
    return ((a - b) & 0xFFFFFFFF) > 0x7FFFFFFF


def seq_le(a: int, b: int) -> bool:
    return a == b or seq_lt(a, b)


class App(Protocol):
    def on_established(self, tcb: Tcb) -> None: ...
    def on_data(self, tcb: Tcb, data: bytes) -> None: ...
    def on_reset(self, tcb: Tcb) -> None: ...
    def on_close(self, tcb: Tcb) -> None: ...


class BaseApp:
    def on_established(self, tcb):
        pass

    def on_data(self, tcb, data):
        pass

    def on_reset(self, tcb):
        pass

    def on_close(self, tcb):
        pass


@dataclass
class ArpEntry:
    mac: bytes
    learned_us: int
    label: tuple[str, str] | None = None  # set when learned from an attacker's frame

    @property
    def poisoned(self) -> bool:
        return self.label is not None


@dataclass
class _Seg:
    seq: int
    flags: int
    payload: bytes
    sent_us: int
    retransmitted: bool = False

    @property
    def end(self) -> int:
        return (self.seq + len(self.payload) + (1 if self.flags & (pk.SYN | pk.FIN) else 0)) & 0xFFFFFFFF


class Tcb:
    """One end of a TCP connection."""

    def __init__(self, host: Host, lport: int, rip: bytes, rport: int, app: App | None,
                 label=None) -> None:
        self.host = host
        self.lport = lport
        self.rip = rip
        self.rport = rport
        self.app = app
        self.label = label
        self.state = TcpState.CLOSED
        self.iss = host.sim.rng.getrandbits(32)
        self.snd_una = self.iss
        self.snd_nxt = self.iss
        self.rcv_nxt = 0
        self.unacked: list[_Seg] = []
        self.retries = 0
        self.timer: Timer | None = None
        self.srtt: float | None = None
        self.fin_sent = False
        self.fin_received = False
        self._acked = False

    @property
    def key(self) -> tuple[int, bytes, int]:
        return (self.lport, self.rip, self.rport)

    # -- output --------------------------------------------------------------

    def _emit(self, seq: int, flags: int, payload: bytes = b"") -> None:
        ack = self.rcv_nxt if flags & pk.ACK else 0
        if flags & pk.ACK:
            self._acked = True
        segment = pk.tcp_segment(self.host.ip, self.rip, self.lport, self.rport, seq, ack, flags,
                                 self.host.window, payload)
        self.host.send_ip(self.rip, segment, self.label)

    def _send_tracked(self, flags: int, payload: bytes = b"") -> None:
        seg = _Seg(self.snd_nxt, flags, payload, self.host.sim.queue.now)
        self.snd_nxt = seg.end
        self.unacked.append(seg)
        self._emit(seg.seq, flags, payload)
        self._arm()

    def send(self, data: bytes) -> None:
        if self.state is not TcpState.ESTABLISHED or self.fin_sent:
            return
        for i in range(0, len(data), MSS):
            self._send_tracked(pk.PSH | pk.ACK, data[i:i + MSS])

    def send_ack(self) -> None:
        self._emit(self.snd_nxt, pk.ACK)

    def close(self) -> None:
        if self.state is TcpState.ESTABLISHED and not self.fin_sent:
            self.fin_sent = True
            self._send_tracked(pk.FIN | pk.ACK)
            self.state = TcpState.CLOSED_FIN

    def abort(self) -> None:
        if self.state in (TcpState.RESET, TcpState.CLOSED):
            return
        self._emit(self.snd_nxt, pk.RST | pk.ACK)
        self._teardown(TcpState.RESET)

    def _teardown(self, state: TcpState) -> None:
        self.state = state
        if self.timer:
            self.timer.cancel()
            self.timer = None
        self.unacked.clear()
        self.host.conns.pop(self.key, None)

    # -- timers --------------------------------------------------------------

    def _arm(self) -> None:
        if self.timer is None and self.unacked:
            self.timer = self.host.sim.queue.after(RTO_US, self._on_timeout)

    def _on_timeout(self) -> None:
        self.timer = None
        if not self.unacked:
            return
        self.retries += 1
        if self.retries > MAX_RETRIES:
            app = self.app
            self.abort()
            if app:
                app.on_reset(self)
            return
        for seg in self.unacked:
            seg.retransmitted = True
            self._emit(seg.seq, seg.flags, seg.payload)
        self._arm()

    # -- input ---------------------------------------------------------------

    def _process_ack(self, ack: int) -> None:
        if not (seq_lt(self.snd_una, ack) and seq_le(ack, self.snd_nxt)):
            return
        now = self.host.sim.queue.now
        sample = None
        while self.unacked and seq_le(self.unacked[0].end, ack):
            seg = self.unacked.pop(0)
            if not seg.retransmitted:
                sample = (now - seg.sent_us) / US
        if sample is not None:
            self.srtt = sample if self.srtt is None else 0.875 * self.srtt + 0.125 * sample
        self.snd_una = ack
        self.retries = 0
        if self.timer:
            self.timer.cancel()
            self.timer = None
        self._arm()

    def on_segment(self, t: pk.TcpInfo, payload: bytes) -> None:
        if t.flags & pk.RST:
            app = self.app
            self._teardown(TcpState.RESET)
            if app:
                app.on_reset(self)
            return

        if self.state is TcpState.SYN_SENT:
            if t.flags & pk.SYN and t.flags & pk.ACK and t.ack == (self.iss + 1) & 0xFFFFFFFF:
                self.rcv_nxt = (t.seq + 1) & 0xFFFFFFFF
                self._process_ack(t.ack)
                self.state = TcpState.ESTABLISHED
                self.send_ack()
                if self.app:
                    self.app.on_established(self)
            return

        if self.state is TcpState.SYN_RCVD:
            if t.flags & pk.SYN and not t.flags & pk.ACK:
                return  # retransmitted SYN; our SYN-ACK timer covers it
            if not (t.flags & pk.ACK and t.ack == (self.iss + 1) & 0xFFFFFFFF):
                return
            self._process_ack(t.ack)
            self.state = TcpState.ESTABLISHED
            factory = self.host.listeners.get(self.lport)
            self.app = factory(self) if factory else None
            if self.app:
                self.app.on_established(self)

        if t.flags & pk.ACK:
            self._process_ack(t.ack)

        fin = bool(t.flags & pk.FIN)
        if not payload and not fin:
            return
        if t.seq != self.rcv_nxt:
            self.send_ack()  # duplicate or out of order
            return
        self._acked = False
        if payload:
            self.rcv_nxt = (self.rcv_nxt + len(payload)) & 0xFFFFFFFF
            if self.app and not self.fin_received:
                self.app.on_data(self, payload)
        if fin and not self.fin_received:
            self.fin_received = True
            self.rcv_nxt = (self.rcv_nxt + 1) & 0xFFFFFFFF
            if not self.fin_sent:
                self.fin_sent = True
                self._send_tracked(pk.FIN | pk.ACK)
                self.state = TcpState.CLOSED_FIN
                if self.app:
                    self.app.on_close(self)
        if not self._acked:
            self.send_ack()
        if self.fin_sent and self.fin_received and not self.unacked:
            self._teardown(TcpState.CLOSED_FIN)


class Host:
    """A node with an IPv4 address, ARP cache and TCP stack."""

    def __init__(self, node_id: str, role: Role, mac: bytes, ip: bytes, sim: Simulation,
                 station: int | None = None, backlog: int = 64, arp_timeout_us: int = 30 * US) -> None:
        self.id = node_id
        self.role = role
        self.mac = mac
        self.ip = ip
        self.sim = sim
        self.station = station
        self.window = WINDOW[role]
        self.backlog = backlog
        self.arp_timeout_us = arp_timeout_us
        self.arp_table: dict[bytes, ArpEntry] = {}
        self.listeners: dict[int, Callable[[Tcb], App]] = {}
        self.conns: dict[tuple[int, bytes, int], Tcb] = {}
        self.raw_handlers: dict[int, Callable[[pk.Frame], None]] = {}
        self.arp_listeners: list[Callable[[pk.ArpInfo], None]] = []
        self.forward_hook: Callable[[bytes], None] | None = None
        # attack tools must not answer stray SYN-ACKs with RST, a kernel would
        self.silent_on_unknown = role is Role.ATTACKER
        self._ident = 0
        self._pending: dict[bytes, list[tuple[bytes, object]]] = {}
        self._used_ports: set[int] = set()
        self._cause = None

    # -- ARP -----------------------------------------------------------------

    def lookup(self, ip: bytes) -> bytes | None:
        entry = self.arp_table.get(ip)
        if entry is None or self.sim.queue.now - entry.learned_us >= self.arp_timeout_us:
            return None
        return entry.mac

    def _learn(self, ip: bytes, mac: bytes, label) -> None:
        if ip == self.ip or ip == b"\x00\x00\x00\x00":
            return
        entry = ArpEntry(mac, self.sim.queue.now, label)
        self.arp_table[ip] = entry
        pending = self._pending.pop(ip, None)
        if pending:
            for packet, plabel in pending:
                self.sim.transmit(self, pk.ethernet(mac, self.mac, pk.ETH_IPV4, packet), plabel or entry.label)

    def _arp_request(self, ip: bytes, tries: int, label=None) -> None:
        if ip not in self._pending:
            return
        if tries >= ARP_MAX_TRIES:
            del self._pending[ip]
            return
        self.send_arp_request(ip, label)
        self.sim.queue.after(ARP_RETRY_US, self._arp_request, ip, tries + 1, label)

    def send_arp_request(self, ip: bytes, label=None) -> None:
        frame = pk.arp_frame(1, self.mac, pk.BROADCAST, self.mac, self.ip, pk.ZERO_MAC, ip)
        self.sim.transmit(self, frame, label)

    def send_ip(self, dst: bytes, transport: bytes, label=None) -> None:
        self._ident = (self._ident + 1) & 0xFFFF
        packet = pk.ipv4_header(self.ip, dst, len(transport), self._ident) + transport
        if label is None:
            label = self._cause
        entry = self.arp_table.get(dst)
        if entry is not None and self.sim.queue.now - entry.learned_us < self.arp_timeout_us:
            # a frame steered to the attacker by a poisoned entry counts as attack traffic
            self.sim.transmit(self, pk.ethernet(entry.mac, self.mac, pk.ETH_IPV4, packet), label or entry.label)
            return
        first = dst not in self._pending
        self._pending.setdefault(dst, []).append((packet, label))
        if first:
            self._arp_request(dst, 0, label)

    def _on_arp(self, arp: pk.ArpInfo, label) -> None:
        for listener in self.arp_listeners:
            listener(arp)
        # only requests aimed at us and replies update the cache; overheard
        # broadcasts are ignored so an established poisoning is not undone
        if arp.op == 1:
            if arp.tpa == self.ip:
                self._learn(arp.spa, arp.sha, label)
                reply = pk.arp_frame(2, self.mac, arp.sha, self.mac, self.ip, arp.sha, arp.spa)
                self.sim.transmit(self, reply, self._cause)
        elif arp.op == 2 and arp.tpa == self.ip:
            self._learn(arp.spa, arp.sha, label)

    # -- TCP -----------------------------------------------------------------

    def ephemeral_port(self) -> int:
        while True:
            port = self.sim.rng.randint(*EPHEMERAL)
            if port not in self._used_ports:
                self._used_ports.add(port)
                return port

    def listen(self, port: int, factory: Callable[[Tcb], App]) -> None:
        self.listeners[port] = factory

    def connect(self, rip: bytes, rport: int, app: App, label=None) -> Tcb:
        tcb = Tcb(self, self.ephemeral_port(), rip, rport, app, label)
        self.conns[tcb.key] = tcb
        tcb.state = TcpState.SYN_SENT
        tcb._send_tracked(pk.SYN)
        return tcb

    def _half_open(self, port: int) -> int:
        return sum(1 for c in self.conns.values() if c.lport == port and c.state is TcpState.SYN_RCVD)

    def _on_tcp(self, f: pk.Frame) -> None:
        t = f.tcp
        handler = self.raw_handlers.get(t.dport)
        if handler is not None:
            handler(f)
            return
        tcb = self.conns.get((t.dport, f.ip.src, t.sport))
        if tcb is not None:
            tcb.on_segment(t, f.payload)
            return
        if t.flags & pk.RST:
            return
        if t.flags & pk.SYN and not t.flags & pk.ACK and t.dport in self.listeners:
            if self._half_open(t.dport) >= self.backlog:
                return
            tcb = Tcb(self, t.dport, f.ip.src, t.sport, None, self._cause)
            tcb.state = TcpState.SYN_RCVD
            tcb.rcv_nxt = (t.seq + 1) & 0xFFFFFFFF
            self.conns[tcb.key] = tcb
            tcb._send_tracked(pk.SYN | pk.ACK)
            return
        if self.silent_on_unknown:
            return
        seg_len = len(f.payload) + (1 if t.flags & (pk.SYN | pk.FIN) else 0)
        if t.flags & pk.ACK:
            rst = pk.tcp_segment(self.ip, f.ip.src, t.dport, t.sport, t.ack, 0, pk.RST, self.window)
        else:
            rst = pk.tcp_segment(self.ip, f.ip.src, t.dport, t.sport, 0, t.seq + seg_len,
                                 pk.RST | pk.ACK, self.window)
        self.send_ip(f.ip.src, rst, self._cause)

    # -- input ---------------------------------------------------------------

    def receive(self, frame: bytes, label) -> None:
        try:
            f = pk.parse_frame(frame)
        except pk.MalformedFrame:
            return
        if f.dst != self.mac and f.dst != pk.BROADCAST:
            return
        # direct responses to attacker-originated frames inherit their label
        origin = f.arp.spa if f.arp is not None else (f.ip.src if f.ip is not None else None)
        self._cause = label if label is not None and origin == self.sim.attacker_ip else None
        try:
            self._dispatch(f, frame, label)
        finally:
            self._cause = None

    def _dispatch(self, f: pk.Frame, frame: bytes, label) -> None:
        if f.arp is not None:
            self._on_arp(f.arp, label)
            return
        if f.ip is None:
            return
        if f.ip.dst != self.ip:
            if f.dst == self.mac and self.forward_hook is not None:
                self.forward_hook(frame)
            return
        if f.tcp is None or not pk.checksums_valid(frame):
            return
        self._on_tcp(f)
