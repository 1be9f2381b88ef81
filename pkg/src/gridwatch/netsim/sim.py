"""OT network simulation: star topology around one learning switch.

Every host hangs off the switch by its own link. The switch is the capture
point, so each forwarded frame is recorded exactly once, at the instant the
switch forwards it. Frames lost on a failed link before reaching the switch
never appear in the capture.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Iterable

from ..process import GridModel, ProcessState, apply_command, initial_state, step
from . import packets as pk
from .apps import MtuApp, RtuApp, SshServer, rtu_connect_time
from .capture import Capture, CaptureRecord
from .engine import US, EventQueue, to_us
from .stack import Host, Role

FIREWALL_PORTS = frozenset({2404, 22})


class TopologyError(ValueError):
    pass


class UnknownLink(LookupError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    id: str
    role: Role
    mac: str
    ip: str
    station: int | None = None


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NodeSpec, ...]
    latency_us: int = 2000
    jitter_us: int = 500

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def links(self) -> list[str]:
        """Links are named after the host they attach to the switch."""
        return [n.id for n in self.nodes if n.role is not Role.SWITCH]

    def by_role(self, role: Role) -> list[NodeSpec]:
        return [n for n in self.nodes if n.role is role]

    def validate(self) -> None:
        for attr in ("id", "mac", "ip"):
            seen = set()
            for n in self.nodes:
                value = getattr(n, attr)
                if value in seen:
                    raise TopologyError(f"duplicate {attr} {value}")
                seen.add(value)
        if len(self.by_role(Role.MTU)) != 1:
            raise TopologyError("topology needs exactly one MTU")
        if len(self.by_role(Role.SWITCH)) != 1:
            raise TopologyError("the MTU is not connected: topology needs exactly one switch")
        if len(self.by_role(Role.ATTACKER)) > 1:
            raise TopologyError("at most one attacker (single-agent scenarios)")
        if self.latency_us <= 0 or not 0 <= self.jitter_us < self.latency_us:
            raise TopologyError("latency must be positive and exceed the jitter")


MTU_IP = "10.0.0.1"
ATTACKER_IP = "10.0.0.200"


def build_topology(n_rtus: int, *, attacker: bool = True, firewall: bool = True,
                   latency_us: int = 2000, jitter_us: int = 500) -> Topology:
    """Default plant: MTU, switch, firewall, RTU k (station k-1, COA k) and an attacker."""
    if not 0 <= n_rtus <= 180:
        raise TopologyError("between 0 and 180 RTUs fit in the addressing plan")
    nodes = [
        NodeSpec("mtu", Role.MTU, "02:00:00:00:00:01", MTU_IP),
        NodeSpec("switch", Role.SWITCH, "02:00:00:00:00:02", "10.0.0.2"),
    ]
    if firewall:
        nodes.append(NodeSpec("firewall", Role.FIREWALL, "02:00:00:00:00:03", "10.0.0.3"))
    for k in range(1, n_rtus + 1):
        nodes.append(NodeSpec(f"rtu{k}", Role.RTU, f"02:00:00:00:01:{k:02x}", f"10.0.0.{10 + k}", k - 1))
    if attacker:
        nodes.append(NodeSpec("attacker", Role.ATTACKER, "02:00:00:00:ff:00", ATTACKER_IP))
    return Topology(tuple(nodes), latency_us, jitter_us)


@dataclass(frozen=True)
class LinkFailure:
    link: str
    t0: float
    t1: float


@dataclass(frozen=True)
class ScheduledCommand:
    at: float
    coa: int
    command: object


class Simulation:
    """Wires hosts, the switch, the process model and the capture together."""

    def __init__(self, topology: Topology, model: GridModel, duration: float, seed: int, *,
                 cyclic_period: float = 1.0, commands: Iterable[ScheduledCommand] = ()) -> None:
        if duration <= 0:
            raise ValueError("duration must be positive")
        if cyclic_period <= 0:
            raise ValueError("cyclic period must be positive")
        topology.validate()
        self.topology = topology
        self.model = model
        self.duration = duration
        self.duration_us = to_us(duration)
        self.seed = seed
        self.rng = random.Random(seed)
        self.queue = EventQueue()
        self.capture = Capture()
        self.state: ProcessState = initial_state(model)
        self.period_us = to_us(cyclic_period)
        self.failures: list[tuple[str, int, int]] = []
        self.hosts: dict[str, Host] = {}
        self.mac_table: dict[bytes, str] = {}
        self._link_free: dict[tuple[str, str], int] = {}
        self.frame_hooks: list[Callable[[CaptureRecord], None]] = []

        attackers = topology.by_role(Role.ATTACKER)
        self.attacker_ip = pk.ip_from_str(attackers[0].ip) if attackers else None
        self.firewall_port: str | None = None
        for spec in topology.nodes:
            if spec.role is Role.SWITCH:
                continue
            host = Host(spec.id, spec.role, pk.mac_from_str(spec.mac), pk.ip_from_str(spec.ip), self,
                        station=spec.station)
            self.hosts[spec.id] = host
        if topology.by_role(Role.FIREWALL):
            self.firewall_port = topology.by_role(Role.MTU)[0].id

        mtu_spec = topology.by_role(Role.MTU)[0]
        self.mtu = self.hosts[mtu_spec.id]
        self.mtu_app = MtuApp(self.mtu)
        self.rtu_apps: dict[str, RtuApp] = {}
        rtus = topology.by_role(Role.RTU)
        for index, spec in enumerate(rtus):
            if spec.station is None or spec.station >= len(model.stations):
                raise TopologyError(f"{spec.id} monitors unknown station {spec.station}")
            host = self.hosts[spec.id]
            SshServer(host)
            self.rtu_apps[spec.id] = RtuApp(host, self.mtu.ip, spec.station, spec.station + 1,
                                            self.period_us, rtu_connect_time(index))
        self.queue.at(self.period_us, self._process_tick)
        for cmd in commands:
            self.queue.at(to_us(cmd.at), self._issue, cmd)

    @property
    def now(self) -> float:
        return self.queue.now / US

    def host_by_ip(self, ip: bytes) -> Host | None:
        for host in self.hosts.values():
            if host.ip == ip:
                return host
        return None

    # -- process -------------------------------------------------------------

    def _process_tick(self) -> None:
        self.state = step(self.model, self.state, self.period_us / US)
        for app in self.rtu_apps.values():
            app.on_process_step()
        self.queue.after(self.period_us, self._process_tick)

    def apply_command(self, station: int, command) -> None:
        self.state = apply_command(self.model, self.state, station, command)

    def _issue(self, cmd: ScheduledCommand) -> None:
        self.mtu_app.command(cmd.coa, cmd.command)

    # -- links ---------------------------------------------------------------

    def inject_link_failure(self, link: str, t0: float, t1: float) -> None:
        if link not in self.topology.links:
            raise UnknownLink(link)
        if not 0 <= t0 <= t1 <= self.duration:
            raise ValueError("failure interval must satisfy 0 <= t0 <= t1 <= duration")
        if t0 < t1:
            self.failures.append((link, to_us(t0), to_us(t1)))

    def link_up(self, link: str, at_us: int) -> bool:
        return not any(name == link and t0 <= at_us < t1 for name, t0, t1 in self.failures)

    def _hop(self, link: str, direction: str) -> int:
        """Arrival time of a frame entering ``link`` now; FIFO per direction."""
        jitter = self.topology.jitter_us
        delay = self.topology.latency_us // 2 + self.rng.randint(-jitter // 2, jitter // 2)
        key = (link, direction)
        arrival = max(self.queue.now + delay, self._link_free.get(key, 0))
        self._link_free[key] = arrival
        return arrival

    def _firewall_allows(self, frame: bytes) -> bool:
        if len(frame) < 38 or frame[12:14] != b"\x08\x00" or frame[23] != pk.IPPROTO_TCP:
            return True
        ihl = (frame[14] & 0x0F) * 4
        start = 14 + ihl
        sport = int.from_bytes(frame[start:start + 2], "big")
        dport = int.from_bytes(frame[start + 2:start + 4], "big")
        return sport in FIREWALL_PORTS or dport in FIREWALL_PORTS

    def transmit(self, host: Host, frame: bytes, label) -> None:
        """Put a frame on the sender's uplink toward the switch."""
        if not self.link_up(host.id, self.queue.now):
            return
        if host.id == self.firewall_port and not self._firewall_allows(frame):
            return
        self.queue.at(self._hop(host.id, "up"), self._switch, host.id, frame, label)

    def _switch(self, ingress: str, frame: bytes, label) -> None:
        dst, src = frame[0:6], frame[6:12]
        self.mac_table[src] = ingress
        if dst == pk.BROADCAST or dst not in self.mac_table:
            egress = [h for h in self.hosts if h != ingress]
        else:
            target = self.mac_table[dst]
            egress = [] if target == ingress else [target]
        now = self.queue.now
        egress = [e for e in egress if self.link_up(e, now)]
        if not egress:
            return
        record = CaptureRecord(now, frame, *(label or (None, None)))
        self.capture.records.append(record)
        for hook in self.frame_hooks:
            hook(record)
        for e in egress:
            if e == self.firewall_port and not self._firewall_allows(frame):
                continue
            self.queue.at(self._hop(e, "down"), self._deliver, e, frame, label)

    def _deliver(self, node: str, frame: bytes, label) -> None:
        if self.link_up(node, self.queue.now):
            self.hosts[node].receive(frame, label)

    # -- driver --------------------------------------------------------------

    def run(self) -> Capture:
        self.queue.run(self.duration_us)
        return self.capture


def run(topology: Topology, model: GridModel, duration: float, seed: int, *,
        cyclic_period: float = 1.0, link_failures: Iterable[LinkFailure] = (),
        commands: Iterable[ScheduledCommand] = ()) -> Capture:
    """Simulate normal operation (no attacker activity) and return the capture."""
    sim = Simulation(topology, model, duration, seed, cyclic_period=cyclic_period, commands=commands)
    for f in link_failures:
        sim.inject_link_failure(f.link, f.t0, f.t1)
    return sim.run()


def default_commands(model: GridModel, duration: float, seed: int, every: float = 60.0) -> list[ScheduledCommand]:
    """Operator schedule: DER setpoints and brief switching operations, seeded."""
    rng = random.Random(seed * 7919 + 17)
    out: list[ScheduledCommand] = []
    from ..process import SetpointCommand, SwitchCommand

    t = every / 2
    der_stations = [s.id for s in model.stations if s.der is not None]
    leaves = [s.id for s in model.stations[1:]]
    while t < duration:
        if der_stations and rng.random() < 0.5:
            sid = rng.choice(der_stations)
            mw = round(rng.uniform(0.0, model.stations[sid].der.base_mw), 3)
            out.append(ScheduledCommand(t, sid + 1, SetpointCommand(mw)))
        elif leaves:
            sid = rng.choice(leaves)
            out.append(ScheduledCommand(t, sid + 1, SwitchCommand(False)))
            if t + 10 < duration:
                out.append(ScheduledCommand(t + 10, sid + 1, SwitchCommand(True)))
        t += every
    return sorted(out, key=lambda c: c.at)
