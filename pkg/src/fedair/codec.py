"""Parameter <-> packet codec.

Each packet carries a 16-bit jacket number, 128 payload bits (four big-endian
float32 values) and a 60-bit CRC computed over jacket||payload.  On air a
packet is therefore 204 bits.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import ModelParams, param_count

PAYLOAD_BITS = 128
JACKET_BITS = 16
CRC_BITS = 60
PACKET_BITS = JACKET_BITS + PAYLOAD_BITS + CRC_BITS
MAX_PACKETS = 1 << JACKET_BITS

CRC_POLY = (1 << 59) | (1 << 5) | (1 << 2) | 1  # x^60 + x^59 + x^5 + x^2 + 1
CRC_INIT = (1 << CRC_BITS) - 1
_CRC_MASK = (1 << CRC_BITS) - 1


class CodecError(ValueError):
    pass


class GapPolicy(enum.Enum):
    HOLD_PREVIOUS = "hold-previous"
    ZERO_FILL = "zero-fill"

    @classmethod
    def parse(cls, value) -> "GapPolicy":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-")
        for p in cls:
            if p.value == key:
                return p
        raise ValueError(f"unknown gap policy {value!r}")


def _as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits, dtype=np.uint8).ravel()
    if arr.size and arr.max() > 1:
        raise CodecError("bitstream must contain only 0 and 1")
    return arr


def serialize_params(params: ModelParams) -> np.ndarray:
    """Big-endian IEEE-754 binary32 bits of every value, layer-major order."""
    if not np.all(np.isfinite(params.values)):
        raise CodecError("cannot serialize non-finite parameters")
    return np.unpackbits(np.frombuffer(params.values.astype(">f4").tobytes(), dtype=np.uint8))


def deserialize_params(bits, layer_shapes) -> ModelParams:
    bits = _as_bits(bits)
    n = param_count(layer_shapes)
    if bits.size != 32 * n:
        raise CodecError(f"expected {32 * n} bits for {n} parameters, got {bits.size}")
    values = np.frombuffer(np.packbits(bits).tobytes(), dtype=">f4").astype(np.float32)
    return ModelParams(layer_shapes, values)


# -- CRC-60 ---------------------------------------------------------------

def crc60_bitwise(bits) -> int:
    """Reference shift-register CRC, one bit at a time."""
    reg = CRC_INIT
    for b in _as_bits(bits):
        top = (reg >> (CRC_BITS - 1)) & 1
        reg = (reg << 1) & _CRC_MASK
        if top ^ int(b):
            reg ^= CRC_POLY
    return reg


def _make_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint64)
    for byte in range(256):
        reg = byte << (CRC_BITS - 8)
        for _ in range(8):
            reg = ((reg << 1) ^ CRC_POLY) if reg >> (CRC_BITS - 1) else (reg << 1)
            reg &= _CRC_MASK
        table[byte] = reg
    return table


CRC_TABLE = _make_table()


def crc60_rows(bit_rows) -> np.ndarray:
    """CRC of each row of a ``(n, k)`` bit matrix; ``k`` must be a multiple of 8."""
    bit_rows = np.asarray(bit_rows, dtype=np.uint8)
    if bit_rows.shape[1] % 8:
        raise CodecError("row length must be a whole number of bytes")
    return kernels.crc_rows(np.packbits(bit_rows, axis=1), CRC_TABLE, CRC_INIT, CRC_BITS)


def crc60(bits) -> int:
    """Table-driven CRC-60 (init all ones, MSB first, no reflection, no final XOR)."""
    bits = _as_bits(bits)
    whole = bits.size - bits.size % 8
    if whole:
        reg = int(crc60_rows(bits[None, :whole])[0])
    else:
        reg = CRC_INIT
    for b in bits[whole:]:
        top = (reg >> (CRC_BITS - 1)) & 1
        reg = (reg << 1) & _CRC_MASK
        if top ^ int(b):
            reg ^= CRC_POLY
    return reg


def _int_to_bits(value: int, width: int) -> np.ndarray:
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)


def _bits_to_int(bits) -> int:
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


# -- packets ----------------------------------------------------------------

@dataclass(frozen=True)
class Packet:
    jacket_number: int
    payload: np.ndarray
    crc: int
    crc_ok: bool = True

    def __post_init__(self):
        payload = np.asarray(self.payload, dtype=np.uint8)
        if payload.shape != (PAYLOAD_BITS,):
            raise CodecError(f"payload must be exactly {PAYLOAD_BITS} bits")
        object.__setattr__(self, "payload", payload)
        if not 0 <= self.jacket_number < MAX_PACKETS:
            raise CodecError(f"jacket number {self.jacket_number} does not fit in 16 bits")

    def header_and_payload(self) -> np.ndarray:
        return np.concatenate([_int_to_bits(self.jacket_number, JACKET_BITS), self.payload])

    def to_bits(self) -> np.ndarray:
        """On-air layout: jacket | payload | crc."""
        return np.concatenate([self.header_and_payload(), _int_to_bits(self.crc, CRC_BITS)])

    def recompute_crc(self) -> int:
        return crc60(self.header_and_payload())

    @classmethod
    def build(cls, jacket_number: int, payload) -> "Packet":
        p = cls(jacket_number, payload, 0)
        return cls(jacket_number, p.payload, p.recompute_crc())


@dataclass(frozen=True)
class TrainHeader:
    """What the receiver knows in advance about a packet train."""

    total_params: int
    layer_shapes: tuple | None = None

    @property
    def total_bits(self) -> int:
        return 32 * self.total_params

    @property
    def n_packets(self) -> int:
        return math.ceil(self.total_bits / PAYLOAD_BITS)


@dataclass
class PacketTrain:
    packets: list[Packet]
    total_params: int
    layer_shapes: tuple | None = None

    @property
    def header(self) -> TrainHeader:
        return TrainHeader(self.total_params, self.layer_shapes)

    def __len__(self):
        return len(self.packets)

    def bit_matrix(self) -> np.ndarray:
        """``(n, 204)`` on-air bits, one packet per row."""
        if not self.packets:
            return np.zeros((0, PACKET_BITS), dtype=np.uint8)
        return np.stack([p.to_bits() for p in self.packets])


def _packet_rows(payloads: np.ndarray, start: int = 0) -> np.ndarray:
    n = payloads.shape[0]
    jackets = np.arange(start, start + n, dtype=">u2").view(np.uint8).reshape(n, 2)
    return np.concatenate([np.unpackbits(jackets, axis=1), payloads], axis=1)


def packetize(bitstream, layer_shapes=None) -> PacketTrain:
    """Split into 128-bit payloads (last one zero padded), numbered from 0."""
    bits = _as_bits(bitstream)
    n = math.ceil(bits.size / PAYLOAD_BITS)
    if n > MAX_PACKETS:
        raise CodecError(f"{n} packets exceed the {MAX_PACKETS}-packet jacket space")
    padded = np.zeros(n * PAYLOAD_BITS, dtype=np.uint8)
    padded[:bits.size] = bits
    payloads = padded.reshape(n, PAYLOAD_BITS)
    crcs = crc60_rows(_packet_rows(payloads)) if n else []
    packets = [Packet(j, payloads[j], int(crcs[j])) for j in range(n)]
    return PacketTrain(packets, bits.size // 32, layer_shapes)


def encode_params(params: ModelParams) -> PacketTrain:
    return packetize(serialize_params(params), params.layer_shapes)


def parse_packets(bit_rows) -> list[Packet]:
    """Turn received ``(n, 204)`` bit rows into packets, flagging CRC failures."""
    bit_rows = np.asarray(bit_rows, dtype=np.uint8)
    if bit_rows.size == 0:
        return []
    if bit_rows.shape[1] != PACKET_BITS:
        raise CodecError(f"expected {PACKET_BITS}-bit rows, got {bit_rows.shape[1]}")
    computed = crc60_rows(bit_rows[:, :JACKET_BITS + PAYLOAD_BITS])
    jackets = np.packbits(bit_rows[:, :JACKET_BITS], axis=1).view(">u2").ravel()
    crc_bytes = np.packbits(
        np.concatenate([np.zeros((len(bit_rows), 4), np.uint8), bit_rows[:, -CRC_BITS:]], axis=1),
        axis=1,
    )
    received = crc_bytes.view(">u8").ravel()
    return [
        Packet(
            int(jackets[i]),
            bit_rows[i, JACKET_BITS:JACKET_BITS + PAYLOAD_BITS],
            int(received[i]),
            bool(received[i] == computed[i]),
        )
        for i in range(len(bit_rows))
    ]


@dataclass
class ReassemblyReport:
    received_ok: set[int]
    failed: set[int]
    params: ModelParams


def reassemble(
    packets,
    expected: TrainHeader,
    previous_round: ModelParams | None = None,
    policy: GapPolicy | str = GapPolicy.HOLD_PREVIOUS,
    layer_shapes=None,
) -> ReassemblyReport:
    """Rebuild parameters from possibly reordered, corrupted or missing packets.

    A packet is accepted only if its CRC verifies.  Jacket numbers of failing
    packets cannot be trusted, so every slot without a verified packet is a gap,
    filled from ``previous_round`` or with zeros according to ``policy``.
    """
    policy = GapPolicy.parse(policy)
    shapes = layer_shapes or expected.layer_shapes
    if shapes is None and previous_round is not None:
        shapes = previous_round.layer_shapes
    if shapes is None:
        raise CodecError("layer shapes unknown; pass them in the header or via previous_round")
    if param_count(shapes) != expected.total_params:
        raise CodecError(f"header says {expected.total_params} params, shapes give {param_count(shapes)}")
    n = expected.n_packets
    buf = np.zeros(n * PAYLOAD_BITS, dtype=np.uint8)
    if policy is GapPolicy.HOLD_PREVIOUS:
        if previous_round is None:
            raise CodecError("hold-previous policy needs previous_round")
        prev_bits = serialize_params(previous_round)
        buf[:prev_bits.size] = prev_bits
    slots = buf.reshape(n, PAYLOAD_BITS)

    accepted: dict[int, np.ndarray] = {}
    for p in packets:
        if not p.crc_ok or p.recompute_crc() != p.crc:
            continue
        j = p.jacket_number
        if j >= n:
            raise CodecError(f"verified packet carries jacket {j} outside 0..{n - 1}")
        if j in accepted and not np.array_equal(accepted[j], p.payload):
            raise CodecError(f"duplicate jacket {j} with differing valid payloads")
        accepted[j] = p.payload
    for j, payload in accepted.items():
        slots[j] = payload
    received = set(accepted)
    params = deserialize_params(buf[:expected.total_bits], shapes)
    return ReassemblyReport(received, set(range(n)) - received, params)


# -- hex dump ---------------------------------------------------------------

def format_packet(p: Packet) -> str:
    payload = np.packbits(p.payload).tobytes().hex()
    return f"{p.jacket_number:04x} | {payload} | {p.crc:015x}"


def parse_packet_line(line: str) -> Packet:
    try:
        jacket, payload, crc = (part.strip() for part in line.split("|"))
        raw = bytes.fromhex(payload)
    except ValueError as exc:
        raise CodecError(f"malformed hex-dump line: {line!r}") from exc
    if len(jacket) != 4 or len(raw) != PAYLOAD_BITS // 8 or len(crc) != 15:
        raise CodecError(f"malformed hex-dump line: {line!r}")
    p = Packet(int(jacket, 16), np.unpackbits(np.frombuffer(raw, np.uint8)), int(crc, 16))
    return Packet(p.jacket_number, p.payload, p.crc, p.recompute_crc() == p.crc)


def dump_train(packets) -> str:
    return "".join(format_packet(p) + "\n" for p in packets)


def load_dump(text: str) -> list[Packet]:
    return [parse_packet_line(line) for line in text.splitlines() if line.strip()]
