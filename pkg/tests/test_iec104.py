import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridwatch import iec104
from gridwatch.iec104 import (
    Apdu, Asdu, BadStartByte, Cot, FrameTooLarge, IFrame, InformationObject,
    MalformedControl, NeedMoreData, SFrame, ShortFloat, TypeId, UFrame, UFunction,
    UnsupportedTypeId, decode_apdu, decode_control_field, encode_apdu,
    encode_control_field,
)

MEASUREMENT_FRAME = bytes.fromhex(
    "6812"            # start, length 18
    "00000000"        # I(tx=0, rx=0)
    "0d010300"        # M_ME_NF_1, 1 object, COT 3, OA 0
    "0100"            # COA 1
    "640000"          # IOA 100
    "00000000" "00"   # 0.0f, QDS 0
)


def measurement_apdu(value=0.0, objects=1):
    asdu = Asdu(TypeId.M_ME_NF_1, Cot.SPONTANEOUS, 1,
                tuple(InformationObject(100 + i, ShortFloat(value)) for i in range(objects)))
    return Apdu(IFrame(0, 0), asdu)


class TestControlField:
    def test_startdt_act(self):
        assert encode_control_field(UFrame(UFunction.STARTDT_ACT)) == bytes([0x07, 0, 0, 0])

    def test_s_frame(self):
        assert encode_control_field(SFrame(1)) == bytes([0x01, 0x00, 0x02, 0x00])

    def test_i_frame_zero(self):
        assert encode_control_field(IFrame(0, 0)) == bytes(4)

    def test_decode_startdt_con(self):
        assert decode_control_field(bytes([0x0B, 0, 0, 0])) == UFrame(UFunction.STARTDT_CON)

    def test_decode_zero(self):
        assert decode_control_field(bytes(4)) == IFrame(0, 0)

    def test_u_without_function_bit(self):
        with pytest.raises(MalformedControl):
            decode_control_field(bytes([0x03, 0, 0, 0]))

    def test_u_with_two_function_bits(self):
        with pytest.raises(MalformedControl):
            decode_control_field(bytes([0x0F, 0, 0, 0]))

    def test_sequence_layout(self):
        # 15-bit numbers: low 7 bits shifted left by one, high 8 bits in the next octet
        assert encode_control_field(IFrame(32767, 200)) == bytes([0xFE, 0xFF, 0x90, 0x01])
        assert decode_control_field(bytes([0xFE, 0xFF, 0x90, 0x01])) == IFrame(32767, 200)

    def test_sequence_range(self):
        with pytest.raises(ValueError):
            IFrame(32768, 0)


class TestApdu:
    def test_startdt_act_frame(self):
        assert encode_apdu(Apdu(UFrame(UFunction.STARTDT_ACT))) == bytes.fromhex("680407000000")

    def test_measurement_frame_bytes(self):
        encoded = encode_apdu(measurement_apdu())
        assert encoded == MEASUREMENT_FRAME
        assert encoded[1] == 0x12

    def test_decode_measurement_round_trip(self):
        apdu, used = decode_apdu(MEASUREMENT_FRAME)
        assert apdu == measurement_apdu()
        assert used == len(MEASUREMENT_FRAME)

    def test_decode_startdt_con(self):
        apdu, used = decode_apdu(bytes.fromhex("68040b000000"))
        assert apdu == Apdu(UFrame(UFunction.STARTDT_CON))
        assert used == 6

    def test_truncated(self):
        with pytest.raises(NeedMoreData):
            decode_apdu(bytes.fromhex("68040b"))

    def test_bad_start(self):
        with pytest.raises(BadStartByte):
            decode_apdu(bytes.fromhex("69040b000000"))

    def test_unsupported_type(self):
        frame = bytearray(MEASUREMENT_FRAME)
        frame[6] = 36  # M_ME_TF_1 is outside the supported subset
        with pytest.raises(UnsupportedTypeId):
            decode_apdu(bytes(frame))

    def test_thirty_floats_fit(self):
        # 4 control + 6 header + 30 * 8 object octets = 250
        assert encode_apdu(measurement_apdu(objects=30))[1] == 250

    def test_frame_too_large(self):
        with pytest.raises(FrameTooLarge):
            encode_apdu(measurement_apdu(objects=31))

    def test_sq_addressing(self):
        asdu = Asdu(TypeId.M_ME_NF_1, Cot.CYCLIC, 7,
                    tuple(InformationObject(500 + i, ShortFloat(float(i))) for i in range(3)), sq=True)
        encoded = encode_apdu(Apdu(IFrame(3, 4), asdu))
        assert encoded[1] == 4 + 6 + 3 + 3 * 5
        assert decode_apdu(encoded)[0].asdu == asdu

    def test_split_stream(self):
        stream = encode_apdu(Apdu(UFrame(UFunction.TESTFR_ACT))) + MEASUREMENT_FRAME + MEASUREMENT_FRAME[:5]
        frames, rest = iec104.split_apdus(stream)
        assert len(frames) == 2
        assert rest == MEASUREMENT_FRAME[:5]


# -- randomized frames ---------------------------------------------------------

f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)
quality = st.sampled_from([0, 0x10, 0x40, 0x80, 0xF0])
element_for = {
    TypeId.M_SP_NA_1: st.builds(iec104.SinglePoint, st.booleans(), quality),
    TypeId.M_ME_NB_1: st.builds(iec104.ScaledValue, st.integers(-32768, 32767), st.integers(0, 255)),
    TypeId.M_ME_NF_1: st.builds(ShortFloat, f32, st.integers(0, 255)),
    TypeId.C_SC_NA_1: st.builds(iec104.SingleCommand, st.booleans(), st.integers(0, 127)),
    TypeId.C_SE_NC_1: st.builds(iec104.SetpointFloat, f32, st.integers(0, 255)),
}


@st.composite
def apdus(draw):
    kind = draw(st.sampled_from(["I", "S", "U"]))
    if kind == "S":
        return Apdu(SFrame(draw(st.integers(0, 32767))))
    if kind == "U":
        return Apdu(UFrame(draw(st.sampled_from(list(UFunction)))))
    type_id = draw(st.sampled_from(list(TypeId)))
    n = draw(st.integers(1, 5))
    sq = draw(st.booleans())
    start = draw(st.integers(0, 0xFFFFFF - n))
    ioas = [start + i for i in range(n)] if sq else draw(
        st.lists(st.integers(0, 0xFFFFFF), min_size=n, max_size=n))
    objects = tuple(InformationObject(a, draw(element_for[type_id])) for a in ioas)
    asdu = Asdu(type_id, draw(st.sampled_from(list(Cot))), draw(st.integers(1, 65534)), objects,
                origin_address=draw(st.integers(0, 255)), sq=sq)
    return Apdu(IFrame(draw(st.integers(0, 32767)), draw(st.integers(0, 32767))), asdu)


@settings(max_examples=300)
@given(apdus())
def test_round_trip(apdu):
    encoded = encode_apdu(apdu)
    assert decode_apdu(encoded) == (apdu, len(encoded))
    assert encoded[1] == len(encoded) - 2


@settings(max_examples=150)
@given(apdus(), st.data())
def test_prefix_needs_more_data(apdu, data):
    encoded = encode_apdu(apdu)
    cut = data.draw(st.integers(0, len(encoded) - 1))
    with pytest.raises(NeedMoreData):
        decode_apdu(encoded[:cut])


def test_float_layout_is_little_endian():
    encoded = encode_apdu(measurement_apdu(value=3.5))
    assert encoded[15:19] == struct.pack("<f", 3.5)
