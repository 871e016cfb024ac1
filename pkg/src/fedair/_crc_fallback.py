"""Pure-numpy table-driven CRC over byte rows; used when the extension is absent."""
import numpy as np


def crc_rows(rows, table, init, width):
    rows = np.ascontiguousarray(rows, dtype=np.uint8)
    if rows.ndim != 2:
        raise ValueError("expected a 2-D array of bytes")
    table = np.asarray(table, dtype=np.uint64)
    mask = np.uint64((1 << width) - 1)
    shift = np.uint64(width - 8)
    eight = np.uint64(8)
    reg = np.full(rows.shape[0], init, dtype=np.uint64)
    for col in range(rows.shape[1]):
        idx = ((reg >> shift) ^ rows[:, col].astype(np.uint64)) & np.uint64(0xFF)
        reg = (table[idx] ^ (reg << eight)) & mask
    return reg
