"""Linearized radial distribution feeder.

Power flow is DC-style: the flow on a line is the net load of every energized
station downstream of it, and the voltage drop across a line is its flow
times a fixed impedance factor. Good enough to give RTU measurements a
physical structure that manipulated values will violate.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

DEFAULT_IMPEDANCE = 0.002  # pu per MW
DEFAULT_NOISE_FRACTION = 0.02

RESIDENTIAL_SHAPE = (
    0.55, 0.50, 0.48, 0.47, 0.48, 0.55, 0.70, 0.85, 0.90, 0.88, 0.86, 0.87,
    0.90, 0.88, 0.85, 0.86, 0.92, 1.00, 1.00, 0.97, 0.90, 0.80, 0.70, 0.60,
)
PV_SHAPE = (
    0.0, 0.0, 0.0, 0.0, 0.0, 0.02, 0.10, 0.25, 0.45, 0.65, 0.80, 0.92,
    1.00, 0.97, 0.88, 0.72, 0.52, 0.30, 0.12, 0.03, 0.0, 0.0, 0.0, 0.0,
)


class UnknownStation(LookupError):
    pass


@dataclass(frozen=True)
class LoadProfile:
    base_mw: float
    daily_shape: tuple[float, ...] = RESIDENTIAL_SHAPE
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.base_mw < 0:
            raise ValueError("base_mw must be non-negative")
        if len(self.daily_shape) != 24:
            raise ValueError("daily_shape needs 24 hourly multipliers")

    def sample(self, hour: float, step: int) -> float:
        h0 = int(hour) % 24
        frac = hour - int(hour)
        shape = self.daily_shape[h0] * (1 - frac) + self.daily_shape[(h0 + 1) % 24] * frac
        value = self.base_mw * shape
        if self.noise_sigma:
            value += self.noise_sigma * _noise(self.seed, step)
        return value


_BLOCK = 1024


@functools.lru_cache(maxsize=4096)
def _noise_block(seed: int, block: int) -> np.ndarray:
    return np.random.default_rng([seed, block]).standard_normal(_BLOCK)


def _noise(seed: int, step: int) -> float:
    return float(_noise_block(seed, step // _BLOCK)[step % _BLOCK])


@dataclass(frozen=True)
class Station:
    id: int
    parent: int | None
    impedance: float = DEFAULT_IMPEDANCE  # of the line feeding this station
    load: LoadProfile = LoadProfile(0.0)
    der: LoadProfile | None = None
    controllable: bool = True


@dataclass(frozen=True)
class GridModel:
    stations: tuple[Station, ...]
    start_hour: float = 12.0

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(self.stations))
        if not self.stations:
            raise ValueError("a feeder needs at least one station")
        ids = [s.id for s in self.stations]
        if ids != list(range(len(ids))):
            raise ValueError("station ids must be 0..n-1 in order")
        roots = [s.id for s in self.stations if s.parent is None]
        if roots != [0]:
            raise ValueError("station 0 must be the only root")
        # parents precede children, which also rules out cycles
        for s in self.stations[1:]:
            if not 0 <= s.parent < s.id:
                raise ValueError(f"station {s.id} has invalid parent {s.parent}")

    @property
    def lines(self) -> list[int]:
        """Lines are identified by the station they feed."""
        return [s.id for s in self.stations if s.parent is not None]

    def station(self, sid: int) -> Station:
        if not 0 <= sid < len(self.stations):
            raise UnknownStation(sid)
        return self.stations[sid]

    def path_to_root(self, sid: int) -> list[int]:
        path = []
        while self.stations[sid].parent is not None:
            path.append(sid)
            sid = self.stations[sid].parent
        return path


@dataclass(frozen=True)
class Measurement:
    p_mw: float
    v_pu: float
    switch_closed: bool
    isolated: bool = False


@dataclass(frozen=True)
class ProcessState:
    time: float
    step: int
    switch_closed: tuple[bool, ...]
    line_flow_mw: tuple[float, ...]  # indexed by station; 0.0 for the root
    bus_voltage_pu: tuple[float, ...]
    measurements: tuple[Measurement, ...]
    setpoints: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SwitchCommand:
    closed: bool


@dataclass(frozen=True)
class SetpointCommand:
    mw: float


Command = Union[SwitchCommand, SetpointCommand]


def build_feeder(n_stations: int = 26, seed: int = 0, *, impedance: float = DEFAULT_IMPEDANCE,
                 noise_fraction: float = DEFAULT_NOISE_FRACTION, der_share: float = 0.3,
                 start_hour: float = 12.0) -> GridModel:
    """Deterministic random radial feeder rooted at the substation (station 0)."""
    if n_stations < 1:
        raise ValueError("n_stations must be >= 1")
    rng = np.random.default_rng(seed)
    stations = [Station(0, None, impedance, LoadProfile(0.0, seed=seed * 1000))]
    for i in range(1, n_stations):
        parent = int(rng.integers(max(0, i - 3), i))
        base = round(float(rng.uniform(0.2, 1.2)), 3)
        load = LoadProfile(base, RESIDENTIAL_SHAPE, noise_fraction * base, seed * 1000 + 2 * i)
        der = None
        if rng.random() < der_share:
            peak = round(float(rng.uniform(0.1, 0.8)), 3)
            der = LoadProfile(peak, PV_SHAPE, noise_fraction * peak, seed * 1000 + 2 * i + 1)
        stations.append(Station(i, parent, impedance, load, der))
    return GridModel(tuple(stations), start_hour)


def initial_state(model: GridModel) -> ProcessState:
    n = len(model.stations)
    blank = ProcessState(0.0, -1, (True,) * n, (0.0,) * n, (1.0,) * n,
                         tuple(Measurement(0.0, 1.0, True) for _ in range(n)))
    return _solve(model, blank, 0.0, 0)


def step(model: GridModel, state: ProcessState, dt: float) -> ProcessState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return _solve(model, state, state.time + dt, state.step + 1)


def _solve(model: GridModel, state: ProcessState, t: float, k: int) -> ProcessState:
    stations = model.stations
    n = len(stations)
    hour = model.start_hour + t / 3600.0
    net = [0.0] * n
    for s in stations:
        load = s.load.sample(hour, k)
        if s.id in state.setpoints:
            gen = state.setpoints[s.id]
        elif s.der is not None:
            gen = s.der.sample(hour, k)
        else:
            gen = 0.0
        net[s.id] = load - gen

    closed = state.switch_closed
    energized = [True] * n
    for s in stations[1:]:
        energized[s.id] = energized[s.parent] and closed[s.id]

    flow = [0.0] * n
    subtree = [net[i] if energized[i] else 0.0 for i in range(n)]
    for s in reversed(stations[1:]):
        if energized[s.id]:
            flow[s.id] = subtree[s.id]
            subtree[s.parent] += subtree[s.id]

    volt = [0.0] * n
    volt[0] = 1.0
    for s in stations[1:]:
        if energized[s.id]:
            volt[s.id] = max(0.0, volt[s.parent] - flow[s.id] * s.impedance)

    meas = []
    for s in stations:
        if energized[s.id]:
            p = subtree[0] if s.parent is None else flow[s.id]
            meas.append(Measurement(p, volt[s.id], closed[s.id]))
        else:
            prev = state.measurements[s.id]
            meas.append(Measurement(prev.p_mw, prev.v_pu, closed[s.id], isolated=True))
    return ProcessState(t, k, closed, tuple(flow), tuple(volt), tuple(meas), dict(state.setpoints))


def apply_command(model: GridModel, state: ProcessState, station: int, command: Command) -> ProcessState:
    """Queue a control action; flows reflect it after the next ``step``."""
    s = model.station(station)
    if isinstance(command, SwitchCommand):
        if s.parent is None:
            raise ValueError("the substation has no feeding line to switch")
        if not s.controllable:
            raise ValueError(f"line {station} is not remotely controllable")
        if state.switch_closed[station] == command.closed:
            return state
        closed = list(state.switch_closed)
        closed[station] = command.closed
        return replace(state, switch_closed=tuple(closed))
    if isinstance(command, SetpointCommand):
        return replace(state, setpoints={**state.setpoints, station: command.mw})
    raise TypeError(f"unknown command {command!r}")
