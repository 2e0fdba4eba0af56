import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamtom.errors import CorruptPackedLength
from streamtom.packing import pack_codes, packed_length, unpack_codes


def test_every_nibble_value_roundtrips():
    codes = np.arange(16, dtype=np.uint8)
    packed = pack_codes(codes, 4)
    assert len(packed) == 8
    np.testing.assert_array_equal(unpack_codes(packed, 16, 4), codes)


def test_nibble_order_low_first():
    assert pack_codes([0x1, 0xA], 4) == bytes([0xA1])
    assert pack_codes([1, 2, 3, 0], 2) == bytes([0b00111001])


def test_odd_count_padding():
    packed = pack_codes([7, 8, 9], 4)
    assert packed == bytes([0x87, 0x09])
    np.testing.assert_array_equal(unpack_codes(packed, 3, 4), [7, 8, 9])


@pytest.mark.parametrize("bits", [2, 4])
@given(data=st.data())
def test_bijection(bits, data):
    codes = data.draw(st.lists(st.integers(0, (1 << bits) - 1), max_size=200))
    packed = pack_codes(np.array(codes, dtype=np.uint8), bits)
    assert len(packed) == packed_length(len(codes), bits)
    np.testing.assert_array_equal(unpack_codes(packed, len(codes), bits), codes)


def test_overflow_rejected():
    with pytest.raises(ValueError):
        pack_codes([16], 4)
    with pytest.raises(ValueError):
        pack_codes([4], 2)


def test_corrupt_length():
    with pytest.raises(CorruptPackedLength):
        unpack_codes(b"\x00\x00", 5, 4)
