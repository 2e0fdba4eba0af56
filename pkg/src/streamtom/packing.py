"""Low-bit code packing into uint8, first code in the least significant bits."""

import numpy as np

from .errors import CorruptPackedLength


def packed_length(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack integer codes in [0, 2**bits) into bytes, little-end-first.

    At 4 bits the first code of each pair sits in the low nibble; at 2 bits
    four codes fill a byte from bit 0 upward. A trailing partial byte is
    zero-padded.
    """
    if bits not in (2, 4, 8):
        raise ValueError(f"unsupported bit width {bits}")
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if codes.size and int(codes.max()) >= (1 << bits):
        raise ValueError(f"code {int(codes.max())} does not fit in {bits} bits")
    per_byte = 8 // bits
    pad = (-codes.size) % per_byte
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    lanes = codes.reshape(-1, per_byte)
    out = np.zeros(lanes.shape[0], dtype=np.uint8)
    for lane in range(per_byte):
        out |= lanes[:, lane] << np.uint8(lane * bits)
    return out.tobytes()


def unpack_codes(data: bytes, count: int, bits: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; ``count`` codes are returned as uint8."""
    if bits not in (2, 4, 8):
        raise ValueError(f"unsupported bit width {bits}")
    expected = packed_length(count, bits)
    if len(data) != expected:
        raise CorruptPackedLength(f"expected {expected} packed bytes for {count} codes, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8)
    per_byte = 8 // bits
    mask = np.uint8((1 << bits) - 1)
    lanes = np.empty((raw.size, per_byte), dtype=np.uint8)
    for lane in range(per_byte):
        lanes[:, lane] = (raw >> np.uint8(lane * bits)) & mask
    return lanes.ravel()[:count]
