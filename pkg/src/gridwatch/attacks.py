"""Single-agent multi-stage attack scripts and the engine that plays them.

A script is an ordered list of stages, each a technique active over a
fraction of the run. The attacker node relays traffic for spoofed victims
through a forwarding hook; mutation, RST injection and replay act on that
relay, so they need an active ARP spoof and must not overlap one another.
Every frame an attack creates or alters carries its stage's (phase, ttp).
"""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass
from typing import Iterable, Union

from . import iec104 as iec
from .netsim import packets as pk
from .netsim.apps import IEC104_PORT, SSH_PORT
from .netsim.capture import Capture
from .netsim.engine import to_us
from .netsim.sim import LinkFailure, ScheduledCommand, Simulation, Topology
from .netsim.stack import BaseApp, Role, Tcb
from .process import GridModel

FORWARD_DELAY_US = 150
SCAN_SPORT = 61000


class Phase(str, enum.Enum):
    """ATT&CK tactics for ICS, in canonical kill-chain order."""

    InitialAccess = "InitialAccess"
    Execution = "Execution"
    Persistence = "Persistence"
    PrivilegeEscalation = "PrivilegeEscalation"
    DefenseEvasion = "DefenseEvasion"
    CredentialAccess = "CredentialAccess"
    Discovery = "Discovery"
    LateralMovement = "LateralMovement"
    Collection = "Collection"
    CommandAndControl = "CommandAndControl"
    Exfiltration = "Exfiltration"
    Impact = "Impact"


PHASE_ORDER: tuple[Phase, ...] = tuple(Phase)


class AttackError(ValueError):
    pass


class NotOnSegment(AttackError):
    pass


class MitmNotActive(AttackError):
    pass


class TargetIsSpoofed(AttackError):
    pass


class NothingRecorded(AttackError):
    pass


class ScriptError(AttackError):
    pass


# -- mutation rules ------------------------------------------------------------


@dataclass(frozen=True)
class SetCot:
    cot: int


@dataclass(frozen=True)
class StaticValue:
    value: float


@dataclass(frozen=True)
class MutationRule:
    action: Union[SetCot, StaticValue]
    direction: str = "to_mtu"  # or "to_rtu"
    coa: int | None = None
    ioa: int | None = None
    type_ids: tuple[int, ...] = (int(iec.TypeId.M_ME_NF_1),)

    def __post_init__(self):
        if self.direction not in ("to_mtu", "to_rtu"):
            raise ValueError("direction must be 'to_mtu' or 'to_rtu'")

    def apply(self, asdu: iec.Asdu) -> iec.Asdu:
        if int(asdu.type_id) not in self.type_ids:
            return asdu
        if self.coa is not None and asdu.common_address != self.coa:
            return asdu
        if isinstance(self.action, SetCot):
            if self.ioa is not None and not any(o.ioa == self.ioa for o in asdu.objects):
                return asdu
            return iec.Asdu(asdu.type_id, iec.Cot(self.action.cot), asdu.common_address, asdu.objects,
                            asdu.origin_address, asdu.sq)
        objects = []
        for obj in asdu.objects:
            if isinstance(obj.value, iec.ShortFloat) and (self.ioa is None or obj.ioa == self.ioa):
                obj = iec.InformationObject(obj.ioa, iec.ShortFloat(self.action.value, obj.value.quality))
            objects.append(obj)
        return iec.Asdu(asdu.type_id, asdu.cot, asdu.common_address, tuple(objects),
                        asdu.origin_address, asdu.sq)


# -- techniques ----------------------------------------------------------------


@dataclass(frozen=True)
class ArpSpoof:
    victims: tuple[tuple[str, str], ...]
    interval: float = 2.0


@dataclass(frozen=True)
class MitmMutate:
    rules: tuple[MutationRule, ...]


@dataclass(frozen=True)
class RstInjection:
    targets: tuple[str, ...] | None = None  # spoofed RTUs; None = every spoofed peer of the MTU


@dataclass(frozen=True)
class SynFlood:
    target: str = "mtu"
    port: int = IEC104_PORT
    rate: float = 100.0


@dataclass(frozen=True)
class Replay:
    record_window: tuple[float, float]


@dataclass(frozen=True)
class EnumerateNetwork:
    subnet: str = "10.0.0.0/24"
    ports: tuple[int, ...] = (22, 102, 502, 2404, 20000)
    rate: float = 100.0


@dataclass(frozen=True)
class SshBruteforce:
    target: str
    attempts: int = 20
    rate: float = 2.0


Technique = Union[ArpSpoof, MitmMutate, RstInjection, SynFlood, Replay, EnumerateNetwork, SshBruteforce]
MITM_TECHNIQUES = (MitmMutate, RstInjection, Replay)


@dataclass(frozen=True)
class AttackStage:
    phase: Phase
    ttp: str
    window: tuple[float, float]
    technique: Technique

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        start, end = self.window
        if not 0.0 <= start < end <= 1.0:
            raise ScriptError(f"stage window {self.window} must satisfy 0 <= start < end <= 1")

    @property
    def label(self) -> tuple[str, str]:
        return (self.phase.value, self.ttp)


@dataclass(frozen=True)
class AttackScript:
    stages: tuple[AttackStage, ...] = ()
    attacker: str = "attacker"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))


# Class vocabulary used for detection, keyed by technique label.
TTP_CLASS = {
    "T0830 AitM": "ArpSpoofing",
    "T0814": "DoS",
    "T1499 DoS": "DoS",
    "T0832 Manipulation of View": "ValueManipulation",
    "T0856 replay": "Replay",
    "T0822/T1110": "SshBruteforce",
    "T0846": "Discovery",
}
TECHNIQUE_CLASS = {
    ArpSpoof: "ArpSpoofing", RstInjection: "DoS", SynFlood: "DoS", MitmMutate: "ValueManipulation",
    Replay: "Replay", SshBruteforce: "SshBruteforce", EnumerateNetwork: "Discovery",
}
_PHASE_FALLBACK = {
    Phase.Impact: "DoS", Phase.DefenseEvasion: "Replay", Phase.CredentialAccess: "SshBruteforce",
    Phase.Discovery: "Discovery", Phase.LateralMovement: "ArpSpoofing",
}


def class_of(phase: str | None, ttp: str | None) -> str:
    """Detection class for a ground-truth label; unlabeled traffic is Normal."""
    if phase is None:
        return "Normal"
    if ttp in TTP_CLASS:
        return TTP_CLASS[ttp]
    try:
        return _PHASE_FALLBACK[Phase(phase)]
    except (KeyError, ValueError):
        raise ScriptError(f"no detection class for label ({phase}, {ttp})") from None


def paper_scenario(topology: Topology) -> AttackScript:
    """Default campaign: spoof two RTUs, disrupt, scan, flood, manipulate, replay, brute-force."""
    rtus = [n.id for n in topology.by_role(Role.RTU)]
    if len(rtus) < 3:
        raise ScriptError("the preset needs at least three RTUs")
    victims = tuple(rtus[:2])
    target = rtus[4] if len(rtus) > 4 else rtus[-1]
    pairs = tuple((v, "mtu") for v in victims)
    return AttackScript((
        AttackStage(Phase.LateralMovement, "T0830 AitM", (0.0, 0.8), ArpSpoof(pairs, 2.0)),
        AttackStage(Phase.Impact, "T0814", (0.0, 0.1), RstInjection(victims)),
        AttackStage(Phase.Discovery, "T0846", (0.10, 0.12), EnumerateNetwork()),
        AttackStage(Phase.Impact, "T1499 DoS", (0.12, 0.14), SynFlood("mtu", IEC104_PORT, 100.0)),
        AttackStage(Phase.Impact, "T0832 Manipulation of View", (0.2, 0.35),
                    MitmMutate((MutationRule(SetCot(int(iec.Cot.SPONTANEOUS))),))),
        AttackStage(Phase.Impact, "T0832 Manipulation of View", (0.35, 0.5),
                    MitmMutate((MutationRule(StaticValue(0.0)),))),
        AttackStage(Phase.DefenseEvasion, "T0856 replay", (0.5, 0.8), Replay((0.14, 0.2))),
        AttackStage(Phase.CredentialAccess, "T0822/T1110", (0.8, 1.0), SshBruteforce(target, 20, 2.0)),
    ))


PRESETS = {"paper-scenario": paper_scenario}


def _overlap(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def validate_script(script: AttackScript, topology: Topology) -> None:
    ids = {n.id for n in topology.nodes}
    if script.stages and script.attacker not in ids:
        raise NotOnSegment(f"attacker {script.attacker} is not in the topology")
    if script.stages and topology.node(script.attacker).role is not Role.ATTACKER:
        raise ScriptError(f"{script.attacker} is not an attacker node")
    spoofs = [s for s in script.stages if isinstance(s.technique, ArpSpoof)]
    spoofed: set[str] = set()
    for s in spoofs:
        for a, b in s.technique.victims:
            for v in (a, b):
                if v not in ids or topology.node(v).role in (Role.SWITCH, Role.ATTACKER):
                    raise NotOnSegment(f"victim {v} is not a host on the attacker's segment")
            if a == b:
                raise ScriptError("a victim pair needs two distinct hosts")
            spoofed.update((a, b))
        if s.technique.interval <= 0:
            raise ScriptError("spoof interval must be positive")
    mitm = [s for s in script.stages if isinstance(s.technique, MITM_TECHNIQUES)]
    for i, s in enumerate(mitm):
        if not any(sp.window[0] <= s.window[0] and s.window[1] <= sp.window[1]
                   and sp.technique.victims for sp in spoofs):
            raise MitmNotActive(f"{type(s.technique).__name__} at {s.window} has no active ARP spoof")
        for other in mitm[i + 1:]:
            if _overlap(s.window, other.window):
                raise ScriptError(f"MITM stages {s.window} and {other.window} contend for the channel")
        t = s.technique
        if isinstance(t, RstInjection) and t.targets:
            for target in t.targets:
                if target not in spoofed:
                    raise MitmNotActive(f"RST injection target {target} is not spoofed")
        if isinstance(t, Replay):
            r0, r1 = t.record_window
            if not 0.0 <= r0 <= r1 <= s.window[0]:
                raise ScriptError("the record window must precede the replay window")
            if not any(sp.window[0] <= r0 and r1 <= sp.window[1] for sp in spoofs):
                raise MitmNotActive("recording needs an active ARP spoof")
    for s in script.stages:
        t = s.technique
        if isinstance(t, SshBruteforce):
            if t.target in spoofed:
                raise TargetIsSpoofed(f"{t.target} is an ARP-spoof victim")
            if t.target not in ids:
                raise NotOnSegment(f"unknown brute-force target {t.target}")
            if t.attempts < 0 or t.rate <= 0:
                raise ScriptError("attempts must be >= 0 and rate > 0")
        elif isinstance(t, SynFlood):
            if t.rate <= 0:
                raise ScriptError("flood rate must be positive")
            if t.target not in ids:
                raise NotOnSegment(f"unknown flood target {t.target}")
        elif isinstance(t, EnumerateNetwork):
            if t.rate <= 0:
                raise ScriptError("scan rate must be positive")
            ipaddress.ip_network(t.subnet)


# -- engine --------------------------------------------------------------------


class _BruteForceSession(BaseApp):
    def __init__(self, guess: int) -> None:
        self.guess = guess
        self.sent = False

    def on_data(self, tcb: Tcb, data: bytes) -> None:
        if not self.sent:
            self.sent = True
            tcb.send(b"LOGIN root " + f"guess-{self.guess:04d}".encode() + b"\r\n")
        else:
            tcb.close()


@dataclass
class _Flow:
    offset: int = 0  # octets added by the relay to this direction's stream


class AttackEngine:
    """Plays an :class:`AttackScript` against a :class:`Simulation`."""

    def __init__(self, script: AttackScript, sim: Simulation) -> None:
        validate_script(script, sim.topology)
        self.script = script
        self.sim = sim
        self.host = sim.hosts.get(script.attacker) if script.stages else None
        self.known: dict[bytes, bytes] = {}
        self.recorded: dict[bytes, list[iec.Asdu]] = {}
        self.replay_cursor: dict[bytes, int] = {}
        self.replayed = 0
        self.mutated = 0
        self.open_ports: set[tuple[bytes, int]] = set()
        self.responders: list[bytes] = []
        self._flows: dict[tuple, _Flow] = {}
        self._spoof_label: tuple[str, str] | None = None
        self._spoofed_ips: set[bytes] = set()
        if self.host is None:
            return
        self.host.forward_hook = self._forward
        self.host.arp_listeners.append(self._on_arp)
        for stage in script.stages:
            self._schedule(stage)

    def _window_us(self, window: tuple[float, float]) -> tuple[int, int]:
        return to_us(window[0] * self.sim.duration), to_us(window[1] * self.sim.duration)

    def _ip(self, node: str) -> bytes:
        return self.sim.hosts[node].ip

    def _schedule(self, stage: AttackStage) -> None:
        t = stage.technique
        start, end = self._window_us(stage.window)
        q = self.sim.queue
        if isinstance(t, ArpSpoof):
            if t.victims:
                self._spoof_label = self._spoof_label or stage.label
                q.at(start, self._spoof_begin, stage, end)
        elif isinstance(t, SynFlood):
            q.at(start, self._flood, stage, end)
        elif isinstance(t, EnumerateNetwork):
            q.at(start, self._scan_arp, stage, end)
        elif isinstance(t, SshBruteforce):
            for i in range(t.attempts):
                at = start + to_us(i / t.rate)
                if at < end:
                    q.at(at, self._ssh_attempt, stage, i)
        elif isinstance(t, Replay):
            q.at(start, self._replay_check)

    def _active(self, kind: type) -> AttackStage | None:
        now = self.sim.queue.now
        for stage in self.script.stages:
            if isinstance(stage.technique, kind):
                start, end = self._window_us(stage.window)
                if start <= now < end:
                    return stage
        return None

    def _recording(self) -> bool:
        now = self.sim.queue.now
        for stage in self.script.stages:
            if isinstance(stage.technique, Replay):
                r0, r1 = self._window_us(stage.technique.record_window)
                if r0 <= now < r1:
                    return True
        return False

    # -- ARP ---------------------------------------------------------------

    def _on_arp(self, arp: pk.ArpInfo) -> None:
        if arp.op == 2 and arp.tpa == self.host.ip:
            self.known[arp.spa] = arp.sha
            if arp.spa not in self.responders:
                self.responders.append(arp.spa)

    def _spoof_begin(self, stage: AttackStage, end: int) -> None:
        ips = []
        for a, b in stage.technique.victims:
            for v in (a, b):
                ip = self._ip(v)
                if ip not in ips:
                    ips.append(ip)
        self._spoofed_ips.update(ips)
        for ip in ips:
            if ip not in self.known:
                self.host.send_arp_request(ip, stage.label)
        self.sim.queue.after(10_000, self._poison, stage, end)

    def _poison(self, stage: AttackStage, end: int) -> None:
        if self.sim.queue.now >= end:
            return
        mac = self.host.mac
        for a, b in stage.technique.victims:
            for victim, impersonated in ((a, b), (b, a)):
                vip = self._ip(victim)
                vmac = self.known.get(vip)
                if vmac is None:
                    continue
                frame = pk.arp_frame(2, mac, vmac, mac, self._ip(impersonated), vmac, vip)
                self.sim.transmit(self.host, frame, stage.label)
        self.sim.queue.after(to_us(stage.technique.interval), self._poison, stage, end)

    # -- relay -------------------------------------------------------------

    def _forward(self, frame: bytes) -> None:
        f = pk.parse_frame(frame)
        dst_mac = self.known.get(f.ip.dst)
        if dst_mac is None or not pk.checksums_valid(frame):
            return
        label = self._spoof_label
        out = None
        t = f.tcp
        if t is not None and IEC104_PORT in (t.sport, t.dport):
            out, mlabel = self._tamper(f, frame)
            if mlabel is not None:
                label = mlabel
        if out is None:
            out = self._adjust(f, frame, dst_mac)
        else:
            out = pk.rewrite_l2(out, self.host.mac, dst_mac)
        self.sim.queue.after(FORWARD_DELAY_US, self.sim.transmit, self.host, out, label)

    def _flow(self, f: pk.Frame) -> _Flow:
        key = (f.ip.src, f.tcp.sport, f.ip.dst, f.tcp.dport)
        return self._flows.setdefault(key, _Flow())

    def _reverse_flow(self, f: pk.Frame) -> _Flow:
        key = (f.ip.dst, f.tcp.dport, f.ip.src, f.tcp.sport)
        return self._flows.setdefault(key, _Flow())

    def _adjust(self, f: pk.Frame, frame: bytes, dst_mac: bytes, payload: bytes | None = None,
                flags: int | None = None) -> bytes:
        """Forward with L2 rewritten, fixing seq/ack for any earlier length changes."""
        if f.tcp is None:
            return pk.rewrite_l2(frame, self.host.mac, dst_mac)
        fwd, rev = self._flow(f), self._reverse_flow(f)
        if payload is None and flags is None and fwd.offset == 0 and rev.offset == 0:
            return pk.rewrite_l2(frame, self.host.mac, dst_mac)
        seq = (f.tcp.seq + fwd.offset) & 0xFFFFFFFF
        ack = (f.tcp.ack - rev.offset) & 0xFFFFFFFF if f.tcp.flags & pk.ACK else f.tcp.ack
        if payload is not None:
            fwd.offset += len(payload) - len(f.payload)
        return pk.rewrite_tcp(frame, src_mac=self.host.mac, dst_mac=dst_mac, seq=seq, ack=ack,
                              flags=flags, payload=payload)

    def _tamper(self, f: pk.Frame, frame: bytes):
        t = f.tcp
        to_mtu = t.dport == IEC104_PORT
        dst_mac = self.known[f.ip.dst]
        rst = self._active(RstInjection)
        if rst is not None and not to_mtu:
            targets = rst.technique.targets
            if targets is None or f.ip.dst in {self._ip(n) for n in targets}:
                flags = pk.RST | pk.ACK
                return self._adjust(f, frame, dst_mac, payload=f.payload, flags=flags), rst.label
        if not f.payload:
            return None, None
        try:
            frames, rest = iec.split_apdus(f.payload)
        except iec.Iec104Error:
            return None, None
        if rest:
            return None, None
        if to_mtu and self._recording():
            for apdu in frames:
                if isinstance(apdu.control, iec.IFrame) and apdu.asdu.type_id == iec.TypeId.M_ME_NF_1:
                    self.recorded.setdefault(f.ip.src, []).append(apdu.asdu)
        mutate = self._active(MitmMutate)
        replay = self._active(Replay)
        changed = False
        out = []
        for apdu in frames:
            new = apdu
            if isinstance(apdu.control, iec.IFrame):
                if mutate is not None:
                    asdu = apdu.asdu
                    for rule in mutate.technique.rules:
                        if (rule.direction == "to_mtu") == to_mtu:
                            asdu = rule.apply(asdu)
                    new = iec.Apdu(apdu.control, asdu)
                elif replay is not None and to_mtu and apdu.asdu.type_id == iec.TypeId.M_ME_NF_1:
                    stored = self.recorded.get(f.ip.src)
                    if stored:
                        i = self.replay_cursor.get(f.ip.src, 0)
                        self.replay_cursor[f.ip.src] = i + 1
                        new = iec.Apdu(apdu.control, stored[i % len(stored)])
                        self.replayed += 1
            changed |= new != apdu
            out.append(new)
        if not changed:
            return None, None
        payload = b"".join(iec.encode_apdu(a) for a in out)
        stage = mutate if mutate is not None else replay
        if stage is mutate:
            self.mutated += 1
        return self._adjust(f, frame, dst_mac, payload=payload), stage.label

    def _replay_check(self) -> None:
        if not any(self.recorded.values()):
            raise NothingRecorded("no I-frames were captured during the record window")

    # -- flood -------------------------------------------------------------

    def _flood(self, stage: AttackStage, end: int) -> None:
        if self.sim.queue.now >= end:
            return
        t = stage.technique
        sport = self.sim.rng.randint(1024, 65535)
        seq = self.sim.rng.getrandbits(32)
        seg = pk.tcp_segment(self.host.ip, self._ip(t.target), sport, t.port, seq, 0, pk.SYN, self.host.window)
        self.host.send_ip(self._ip(t.target), seg, stage.label)
        self.sim.queue.after(to_us(1.0 / t.rate), self._flood, stage, end)

    # -- discovery ---------------------------------------------------------

    def _scan_arp(self, stage: AttackStage, end: int) -> None:
        t = stage.technique
        targets = [h.packed for h in ipaddress.ip_network(t.subnet, strict=False).hosts()
                   if h.packed != self.host.ip]
        step = to_us(1.0 / t.rate)
        now = self.sim.queue.now
        self.responders = []
        for i, ip in enumerate(targets):
            if now + i * step < end:
                self.sim.queue.at(now + i * step, self.host.send_arp_request, ip, stage.label)
        probe_start = now + len(targets) * step + to_us(0.5)
        self.host.raw_handlers[SCAN_SPORT] = lambda fr: self._scan_reply(fr, stage)
        self.sim.queue.at(min(probe_start, end), self._scan_syn, stage, end, step)

    def _scan_syn(self, stage: AttackStage, end: int, step: int) -> None:
        now = self.sim.queue.now
        probes = [(ip, port) for ip in self.responders for port in stage.technique.ports]
        for i, (ip, port) in enumerate(probes):
            at = now + i * step
            if at < end:
                self.sim.queue.at(at, self._probe, ip, port, stage)

    def _probe(self, ip: bytes, port: int, stage: AttackStage) -> None:
        seq = self.sim.rng.getrandbits(32)
        seg = pk.tcp_segment(self.host.ip, ip, SCAN_SPORT, port, seq, 0, pk.SYN, self.host.window)
        self.host.send_ip(ip, seg, stage.label)

    def _scan_reply(self, f: pk.Frame, stage: AttackStage) -> None:
        t = f.tcp
        if t.flags & pk.SYN and t.flags & pk.ACK:
            self.open_ports.add((f.ip.src, t.sport))
            rst = pk.tcp_segment(self.host.ip, f.ip.src, SCAN_SPORT, t.sport, t.ack, 0, pk.RST, self.host.window)
            self.host.send_ip(f.ip.src, rst, stage.label)

    # -- credential access -------------------------------------------------

    def _ssh_attempt(self, stage: AttackStage, i: int) -> None:
        self.host.connect(self._ip(stage.technique.target), SSH_PORT, _BruteForceSession(i), stage.label)


def prepare(topology: Topology, model: GridModel, duration: float, seed: int,
            script: AttackScript | None = None, *, cyclic_period: float = 1.0,
            link_failures: Iterable[LinkFailure] = (),
            commands: Iterable[ScheduledCommand] = ()) -> tuple[Simulation, AttackEngine]:
    sim = Simulation(topology, model, duration, seed, cyclic_period=cyclic_period, commands=commands)
    for f in link_failures:
        sim.inject_link_failure(f.link, f.t0, f.t1)
    engine = AttackEngine(script or AttackScript(), sim)
    return sim, engine


def run_script(script: AttackScript, topology: Topology, model: GridModel, duration: float, seed: int,
               **kwargs) -> Capture:
    """Simulate with the attack script active and return the labeled capture."""
    sim, _ = prepare(topology, model, duration, seed, script, **kwargs)
    return sim.run()
