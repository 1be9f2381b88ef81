"""Applications running on simulated hosts: IEC-104 master and outstations, SSH stub."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .. import iec104 as iec
from ..process import SetpointCommand, SwitchCommand, UnknownStation
from .engine import US, to_us
from .stack import BaseApp, Tcb

if TYPE_CHECKING:
    from .sim import Simulation
    from .stack import Host

IEC104_PORT = 2404
SSH_PORT = 22
IOA_P = 100
IOA_V = 101
IOA_SWITCH = 200
IOA_SWITCH_CMD = 300
IOA_SETPOINT_CMD = 400
ACK_EVERY = 8  # the "w" parameter: acknowledge after this many I-frames
RECONNECT_US = US


class _Session:
    """Sequence-number bookkeeping for one side of an IEC-104 link."""

    def __init__(self, tcb: Tcb) -> None:
        self.tcb = tcb
        self.vs = 0
        self.vr = 0
        self.unacked_rx = 0
        self.started = False
        self.buffer = b""

    def send_i(self, asdu: iec.Asdu) -> None:
        apdu = iec.Apdu(iec.IFrame(self.vs, self.vr), asdu)
        self.vs = (self.vs + 1) % 32768
        self.unacked_rx = 0
        self.tcb.send(iec.encode_apdu(apdu))

    def send_s(self) -> None:
        self.unacked_rx = 0
        self.tcb.send(iec.encode_apdu(iec.Apdu(iec.SFrame(self.vr))))

    def send_u(self, fn: iec.UFunction) -> None:
        self.tcb.send(iec.encode_apdu(iec.Apdu(iec.UFrame(fn))))

    def feed(self, data: bytes) -> list[iec.Apdu]:
        try:
            frames, self.buffer = iec.split_apdus(self.buffer + data)
        except iec.Iec104Error:
            # a garbled stream cannot be resynchronised; drop it
            self.buffer = b""
            return []
        for apdu in frames:
            if isinstance(apdu.control, iec.IFrame):
                self.vr = (apdu.control.tx_seq + 1) % 32768
                self.unacked_rx += 1
        return frames


@dataclass(frozen=True)
class Delivered:
    """A measurement as it reached the master's application layer."""

    time_us: int
    coa: int
    ioa: int
    value: float
    cot: int
    quality: int


class MtuApp(BaseApp):
    """SCADA master: accepts outstation connections and logs their reports."""

    def __init__(self, host: Host) -> None:
        self.host = host
        self.sessions: dict[Tcb, _Session] = {}
        self.by_coa: dict[int, _Session] = {}
        self.delivered: list[Delivered] = []
        self.confirmations: list[tuple[int, int, int]] = []
        host.listen(IEC104_PORT, lambda tcb: self)

    def on_established(self, tcb: Tcb) -> None:
        session = _Session(tcb)
        self.sessions[tcb] = session
        session.send_u(iec.UFunction.STARTDT_ACT)

    def on_data(self, tcb: Tcb, data: bytes) -> None:
        session = self.sessions.get(tcb)
        if session is None:
            return
        now = self.host.sim.queue.now
        for apdu in session.feed(data):
            control = apdu.control
            if isinstance(control, iec.UFrame):
                if control.function == iec.UFunction.STARTDT_CON:
                    session.started = True
                elif control.function == iec.UFunction.TESTFR_ACT:
                    session.send_u(iec.UFunction.TESTFR_CON)
                continue
            if not isinstance(control, iec.IFrame) or not session.started:
                continue
            asdu = apdu.asdu
            self.by_coa[asdu.common_address] = session
            if asdu.type_id in (iec.TypeId.C_SC_NA_1, iec.TypeId.C_SE_NC_1):
                self.confirmations.append((now, asdu.common_address, int(asdu.cot)))
            for obj in asdu.objects:
                value = obj.value
                quality = getattr(value, "quality", 0)
                self.delivered.append(Delivered(now, asdu.common_address, obj.ioa,
                                                float(value.value), int(asdu.cot), quality))
        if session.unacked_rx >= ACK_EVERY:
            session.send_s()

    def _drop(self, tcb: Tcb) -> None:
        session = self.sessions.pop(tcb, None)
        for coa, s in list(self.by_coa.items()):
            if s is session:
                del self.by_coa[coa]

    def on_reset(self, tcb: Tcb) -> None:
        self._drop(tcb)

    def on_close(self, tcb: Tcb) -> None:
        self._drop(tcb)

    def command(self, coa: int, command: SwitchCommand | SetpointCommand) -> bool:
        """Send a control command to the outstation with ``coa``; False if not connected."""
        session = self.by_coa.get(coa)
        if session is None or not session.started:
            return False
        if isinstance(command, SwitchCommand):
            obj = iec.InformationObject(IOA_SWITCH_CMD, iec.SingleCommand(command.closed))
            type_id = iec.TypeId.C_SC_NA_1
        else:
            obj = iec.InformationObject(IOA_SETPOINT_CMD, iec.SetpointFloat(command.mw))
            type_id = iec.TypeId.C_SE_NC_1
        session.send_i(iec.Asdu(type_id, iec.Cot.ACTIVATION, coa, (obj,)))
        return True


class RtuApp(BaseApp):
    """Outstation: dials the master, reports cyclically, executes commands."""

    def __init__(self, host: Host, mtu_ip: bytes, station: int, coa: int,
                 period_us: int, connect_at_us: int) -> None:
        self.host = host
        self.sim: Simulation = host.sim
        self.mtu_ip = mtu_ip
        self.station = station
        self.coa = coa
        self.period_us = period_us
        self.session: _Session | None = None
        self.tcb: Tcb | None = None
        self._report_timer = None
        self._last_switch: bool | None = None
        self.reports_sent = 0
        self.sim.queue.at(connect_at_us, self.connect)

    def connect(self) -> None:
        self.session = None
        self.tcb = self.host.connect(self.mtu_ip, IEC104_PORT, self)

    def on_established(self, tcb: Tcb) -> None:
        self.session = _Session(tcb)

    def on_data(self, tcb: Tcb, data: bytes) -> None:
        session = self.session
        if session is None or tcb is not self.tcb:
            return
        for apdu in session.feed(data):
            control = apdu.control
            if isinstance(control, iec.UFrame):
                if control.function == iec.UFunction.STARTDT_ACT and not session.started:
                    session.send_u(iec.UFunction.STARTDT_CON)
                    session.started = True
                    self._report()
                elif control.function == iec.UFunction.TESTFR_ACT:
                    session.send_u(iec.UFunction.TESTFR_CON)
            elif isinstance(control, iec.IFrame) and session.started:
                self._on_command(session, apdu.asdu)
        if session.unacked_rx >= ACK_EVERY:
            session.send_s()

    def _on_command(self, session: _Session, asdu: iec.Asdu) -> None:
        if asdu.type_id not in (iec.TypeId.C_SC_NA_1, iec.TypeId.C_SE_NC_1) or asdu.cot != iec.Cot.ACTIVATION:
            return
        session.send_i(iec.Asdu(asdu.type_id, iec.Cot.ACT_CON, self.coa, asdu.objects))
        value = asdu.objects[0].value
        if asdu.type_id == iec.TypeId.C_SC_NA_1:
            command = SwitchCommand(bool(value.value))
        else:
            command = SetpointCommand(float(value.value))
        try:
            self.sim.apply_command(self.station, command)
        except (UnknownStation, ValueError):
            pass
        session.send_i(iec.Asdu(asdu.type_id, iec.Cot.ACT_TERM, self.coa, asdu.objects))

    def _report(self) -> None:
        self._report_timer = None
        session = self.session
        if session is None or not session.started or session.tcb.state.value != "ESTABLISHED":
            return
        m = self.sim.state.measurements[self.station]
        quality = iec.QUALITY_NT if m.isolated else 0
        session.send_i(iec.Asdu(iec.TypeId.M_ME_NF_1, iec.Cot.CYCLIC, self.coa, (
            iec.InformationObject(IOA_P, iec.ShortFloat(m.p_mw, quality)),
            iec.InformationObject(IOA_V, iec.ShortFloat(m.v_pu, quality)),
        )))
        self.reports_sent += 1
        self._report_timer = self.sim.queue.after(self.period_us, self._report)

    def on_process_step(self) -> None:
        """Emit a spontaneous status report when this station's switch changed."""
        closed = self.sim.state.switch_closed[self.station]
        changed = self._last_switch is not None and closed != self._last_switch
        self._last_switch = closed
        session = self.session
        if changed and session is not None and session.started:
            session.send_i(iec.Asdu(iec.TypeId.M_SP_NA_1, iec.Cot.SPONTANEOUS, self.coa, (
                iec.InformationObject(IOA_SWITCH, iec.SinglePoint(closed)),
            )))

    def _lost(self, tcb: Tcb) -> None:
        if tcb is not self.tcb:
            return
        self.session = None
        self.tcb = None
        if self._report_timer is not None:
            self._report_timer.cancel()
            self._report_timer = None
        self.sim.queue.after(RECONNECT_US, self.connect)

    def on_reset(self, tcb: Tcb) -> None:
        self._lost(tcb)

    def on_close(self, tcb: Tcb) -> None:
        self._lost(tcb)


SSH_BANNER = b"SSH-2.0-OpenSSH_8.9\r\n"
SSH_DENIED = b"Permission denied (password).\r\n"


class SshServer(BaseApp):
    """Maintenance login on port 22 that refuses every password."""

    def __init__(self, host: Host) -> None:
        self.host = host
        self.attempts = 0
        host.listen(SSH_PORT, lambda tcb: self)

    def on_established(self, tcb: Tcb) -> None:
        tcb.send(SSH_BANNER)

    def on_data(self, tcb: Tcb, data: bytes) -> None:
        self.attempts += 1
        tcb.send(SSH_DENIED)
        tcb.close()


def rtu_connect_time(index: int) -> int:
    """Staggered dial-in so 26 outstations do not all SYN in the same microsecond."""
    return to_us(0.01 + 0.01 * index)
