"""Discrete-event OT network: hosts, TCP, IEC-104 sessions, capture."""

from .capture import Capture, CaptureRecord, export_pcap, read_pcap, write_pcap
from .packets import internet_checksum
from .sim import (
    LinkFailure, NodeSpec, ScheduledCommand, Simulation, Topology, TopologyError, UnknownLink,
    build_topology, default_commands, run,
)

__all__ = [
    "Capture", "CaptureRecord", "LinkFailure", "NodeSpec", "ScheduledCommand", "Simulation",
    "Topology", "TopologyError", "UnknownLink", "build_topology", "default_commands",
    "export_pcap", "internet_checksum", "read_pcap", "run", "write_pcap",
]
