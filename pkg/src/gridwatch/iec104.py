"""IEC 60870-5-104 APDU encoding and decoding.

Only the subset of ASDU types used by the simulated substation traffic is
supported (see ``TypeId``). Multi-octet fields are little-endian, the common
address is two octets and information object addresses are three octets.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Union

START_BYTE = 0x68
MAX_APDU_LENGTH = 253
SEQ_MODULO = 1 << 15


class Iec104Error(ValueError):
    """Base class for codec errors."""


class NeedMoreData(Iec104Error):
    pass


class BadStartByte(Iec104Error):
    pass


class UnsupportedTypeId(Iec104Error):
    pass


class MalformedControl(Iec104Error):
    pass


class MalformedAsdu(Iec104Error):
    pass


class FrameTooLarge(Iec104Error):
    pass


class UFunction(enum.IntEnum):
    STARTDT_ACT = 0x04
    STARTDT_CON = 0x08
    STOPDT_ACT = 0x10
    STOPDT_CON = 0x20
    TESTFR_ACT = 0x40
    TESTFR_CON = 0x80


class TypeId(enum.IntEnum):
    M_SP_NA_1 = 1
    M_ME_NB_1 = 11
    M_ME_NF_1 = 13
    C_SC_NA_1 = 45
    C_SE_NC_1 = 50


class Cot(enum.IntEnum):
    CYCLIC = 1
    SPONTANEOUS = 3
    ACTIVATION = 6
    ACT_CON = 7
    ACT_TERM = 10


# -- control field -----------------------------------------------------------


@dataclass(frozen=True)
class IFrame:
    tx_seq: int
    rx_seq: int

    def __post_init__(self):
        _check_seq(self.tx_seq)
        _check_seq(self.rx_seq)


@dataclass(frozen=True)
class SFrame:
    rx_seq: int

    def __post_init__(self):
        _check_seq(self.rx_seq)


@dataclass(frozen=True)
class UFrame:
    function: UFunction


ControlField = Union[IFrame, SFrame, UFrame]


def _check_seq(value: int) -> None:
    if not 0 <= value < SEQ_MODULO:
        raise ValueError(f"sequence number out of range: {value}")


def encode_control_field(cf: ControlField) -> bytes:
    if isinstance(cf, IFrame):
        return bytes(((cf.tx_seq << 1) & 0xFE, cf.tx_seq >> 7,
                      (cf.rx_seq << 1) & 0xFE, cf.rx_seq >> 7))
    if isinstance(cf, SFrame):
        return bytes((0x01, 0x00, (cf.rx_seq << 1) & 0xFE, cf.rx_seq >> 7))
    if isinstance(cf, UFrame):
        return bytes((0x03 | int(cf.function), 0x00, 0x00, 0x00))
    raise TypeError(f"not a control field: {cf!r}")


def decode_control_field(octets: bytes) -> ControlField:
    if len(octets) != 4:
        raise MalformedControl(f"control field needs 4 octets, got {len(octets)}")
    o1, o2, o3, o4 = octets
    if o1 & 0x01 == 0:
        return IFrame((o2 << 7) | (o1 >> 1), (o4 << 7) | (o3 >> 1))
    if o1 & 0x03 == 0x01:
        if o1 != 0x01 or o2 != 0x00 or o3 & 0x01:
            raise MalformedControl(f"bad S-format octets {octets.hex()}")
        return SFrame((o4 << 7) | (o3 >> 1))
    bits = o1 & 0xFC
    if bits == 0 or bits & (bits - 1):
        raise MalformedControl(f"U-format needs exactly one function bit, got 0x{o1:02x}")
    if o2 or o3 or o4:
        raise MalformedControl(f"bad U-format octets {octets.hex()}")
    return UFrame(UFunction(bits))


# -- information elements ----------------------------------------------------


@dataclass(frozen=True)
class SinglePoint:
    value: bool
    quality: int = 0  # upper nibble of SIQ: BL 0x10, SB 0x20, NT 0x40, IV 0x80


@dataclass(frozen=True)
class ScaledValue:
    value: int
    quality: int = 0


@dataclass(frozen=True)
class ShortFloat:
    value: float
    quality: int = 0


@dataclass(frozen=True)
class SingleCommand:
    value: bool
    qualifier: int = 0  # SCO bits 1..7 (QU and S/E)


@dataclass(frozen=True)
class SetpointFloat:
    value: float
    qualifier: int = 0  # QOS octet


ElementValue = Union[SinglePoint, ScaledValue, ShortFloat, SingleCommand, SetpointFloat]

QUALITY_NT = 0x40
QUALITY_IV = 0x80

_ELEMENT_TYPES = {
    TypeId.M_SP_NA_1: SinglePoint,
    TypeId.M_ME_NB_1: ScaledValue,
    TypeId.M_ME_NF_1: ShortFloat,
    TypeId.C_SC_NA_1: SingleCommand,
    TypeId.C_SE_NC_1: SetpointFloat,
}

ELEMENT_SIZE = {
    TypeId.M_SP_NA_1: 1,
    TypeId.M_ME_NB_1: 3,
    TypeId.M_ME_NF_1: 5,
    TypeId.C_SC_NA_1: 1,
    TypeId.C_SE_NC_1: 5,
}

_F32 = struct.Struct("<fB")
_I16 = struct.Struct("<hB")


def _encode_element(type_id: TypeId, v: ElementValue) -> bytes:
    if type_id == TypeId.M_SP_NA_1:
        return bytes(((v.quality & 0xF0) | int(bool(v.value)),))
    if type_id == TypeId.M_ME_NB_1:
        return _I16.pack(v.value, v.quality)
    if type_id == TypeId.M_ME_NF_1:
        return _F32.pack(v.value, v.quality)
    if type_id == TypeId.C_SC_NA_1:
        return bytes((((v.qualifier & 0x7F) << 1) | int(bool(v.value)),))
    return _F32.pack(v.value, v.qualifier)


def _decode_element(type_id: TypeId, data: bytes, pos: int) -> ElementValue:
    if type_id == TypeId.M_SP_NA_1:
        siq = data[pos]
        return SinglePoint(bool(siq & 0x01), siq & 0xF0)
    if type_id == TypeId.M_ME_NB_1:
        return ScaledValue(*_I16.unpack_from(data, pos))
    if type_id == TypeId.M_ME_NF_1:
        return ShortFloat(*_F32.unpack_from(data, pos))
    if type_id == TypeId.C_SC_NA_1:
        sco = data[pos]
        return SingleCommand(bool(sco & 0x01), sco >> 1)
    return SetpointFloat(*_F32.unpack_from(data, pos))


@dataclass(frozen=True)
class InformationObject:
    ioa: int
    value: ElementValue

    def __post_init__(self):
        if not 0 <= self.ioa <= 0xFFFFFF:
            raise ValueError(f"IOA out of range: {self.ioa}")


@dataclass(frozen=True)
class Asdu:
    type_id: TypeId
    cot: Cot
    common_address: int
    objects: tuple[InformationObject, ...]
    origin_address: int = 0
    sq: bool = False

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if not 1 <= len(self.objects) <= 127:
            raise ValueError(f"ASDU must carry 1..127 objects, got {len(self.objects)}")
        if not 1 <= self.common_address <= 65534:
            raise ValueError(f"common address out of range: {self.common_address}")
        if not 0 <= self.origin_address <= 255:
            raise ValueError(f"origin address out of range: {self.origin_address}")
        expected = _ELEMENT_TYPES[TypeId(self.type_id)]
        for obj in self.objects:
            if type(obj.value) is not expected:
                raise ValueError(f"{type(obj.value).__name__} does not match type id {self.type_id}")
        if self.sq:
            first = self.objects[0].ioa
            if any(o.ioa != first + i for i, o in enumerate(self.objects)):
                raise ValueError("SQ=1 requires contiguous IOAs")

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def encoded_length(self) -> int:
        size = ELEMENT_SIZE[self.type_id]
        if self.sq:
            return 6 + 3 + size * len(self.objects)
        return 6 + (3 + size) * len(self.objects)


@dataclass(frozen=True)
class Apdu:
    control: ControlField
    asdu: Asdu | None = field(default=None)

    def __post_init__(self):
        if isinstance(self.control, IFrame) != (self.asdu is not None):
            raise ValueError("an ASDU is carried by I-format frames only")


def encode_asdu(asdu: Asdu) -> bytes:
    out = bytearray((int(asdu.type_id), (0x80 if asdu.sq else 0) | len(asdu.objects),
                     int(asdu.cot), asdu.origin_address))
    out += asdu.common_address.to_bytes(2, "little")
    for i, obj in enumerate(asdu.objects):
        if i == 0 or not asdu.sq:
            out += obj.ioa.to_bytes(3, "little")
        out += _encode_element(asdu.type_id, obj.value)
    return bytes(out)


def decode_asdu(data: bytes) -> Asdu:
    if len(data) < 6:
        raise MalformedAsdu("ASDU header truncated")
    try:
        type_id = TypeId(data[0])
    except ValueError:
        raise UnsupportedTypeId(f"type id {data[0]} is not supported") from None
    sq = bool(data[1] & 0x80)
    count = data[1] & 0x7F
    try:
        cot = Cot(data[2])
    except ValueError:
        raise MalformedAsdu(f"unknown cause of transmission octet 0x{data[2]:02x}") from None
    oa = data[3]
    coa = int.from_bytes(data[4:6], "little")
    size = ELEMENT_SIZE[type_id]
    expected = 6 + (3 + size * count if sq else (3 + size) * count)
    if count == 0 or len(data) != expected:
        raise MalformedAsdu(f"{count} objects of type {type_id.name} need {expected} octets, got {len(data)}")
    objects = []
    pos = 6
    ioa = 0
    for i in range(count):
        if i == 0 or not sq:
            ioa = int.from_bytes(data[pos:pos + 3], "little")
            pos += 3
        else:
            ioa += 1
        objects.append(InformationObject(ioa, _decode_element(type_id, data, pos)))
        pos += size
    try:
        return Asdu(type_id, cot, coa, tuple(objects), origin_address=oa, sq=sq)
    except ValueError as exc:
        raise MalformedAsdu(str(exc)) from None


def encode_apdu(apdu: Apdu) -> bytes:
    body = encode_control_field(apdu.control)
    if apdu.asdu is not None:
        body += encode_asdu(apdu.asdu)
    if len(body) > MAX_APDU_LENGTH:
        raise FrameTooLarge(f"APDU length {len(body)} exceeds {MAX_APDU_LENGTH}")
    return bytes((START_BYTE, len(body))) + body


def decode_apdu(data: bytes) -> tuple[Apdu, int]:
    """Decode one APDU from the front of ``data``.

    Returns the frame and the number of octets consumed. Raises
    ``NeedMoreData`` for any truncated input so callers can buffer a TCP
    stream and retry.
    """
    if len(data) < 1:
        raise NeedMoreData("empty input")
    if data[0] != START_BYTE:
        raise BadStartByte(f"expected 0x68, got 0x{data[0]:02x}")
    if len(data) < 2:
        raise NeedMoreData("length octet missing")
    length = data[1]
    if len(data) < 2 + length:
        raise NeedMoreData(f"need {2 + length} octets, have {len(data)}")
    if length < 4:
        raise MalformedControl(f"APDU length {length} is shorter than the control field")
    control = decode_control_field(bytes(data[2:6]))
    asdu = None
    if isinstance(control, IFrame):
        asdu = decode_asdu(bytes(data[6:2 + length]))
    elif length != 4:
        raise MalformedControl("S- and U-format frames carry no ASDU")
    return Apdu(control, asdu), 2 + length


def split_apdus(stream: bytes) -> tuple[list[Apdu], bytes]:
    """Decode every complete APDU in a stream buffer, returning the remainder."""
    frames = []
    pos = 0
    while pos < len(stream):
        try:
            apdu, used = decode_apdu(stream[pos:])
        except NeedMoreData:
            break
        frames.append(apdu)
        pos += used
    return frames, stream[pos:]
