"""Complex-baseband DBPSK link: PN preamble, RRC shaping, AWGN, and the receiver.

Frame layout in symbols::

    [guard/2 zeros | PN (31) | reference +1 | differential data | guard/2 zeros]

Transmit pulses use a unit-energy RRC filter, so with amplitude ``A`` the
energy per symbol is ``A**2`` and ``tx_power_db = 10*log10(A**2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .codec import PACKET_BITS, PacketTrain, parse_packets

DEFAULT_PN_TAPS = (5, 3)


class FrameNotFoundError(RuntimeError):
    def __init__(self, peak_metric: float, threshold: float):
        super().__init__(
            f"no frame found: peak/median correlation {peak_metric:.2f} <= threshold {threshold:.2f}"
        )
        self.peak_metric = peak_metric


@dataclass(frozen=True)
class PhyConfig:
    symbol_rate: float = 6250.0
    samples_per_symbol: int = 8
    rrc_rolloff: float = 0.5
    rrc_span_symbols: int = 8
    pn_degree: int = 5
    pn_taps: tuple = DEFAULT_PN_TAPS
    pn_seed_state: int = 0b11111
    tx_power_db: float = 20.0
    noise_floor_db: float = 0.0
    acquisition_time_s: float = 0.040
    guard_symbols: int = 16
    detection_factor: float = 4.0
    bits_per_frame: int = PACKET_BITS

    def __post_init__(self):
        if not 0 < self.rrc_rolloff <= 1:
            raise ValueError("rrc_rolloff must lie in (0, 1]")
        if self.samples_per_symbol < 2 or self.rrc_span_symbols < 1:
            raise ValueError("need samples_per_symbol >= 2 and a positive filter span")
        if self.guard_symbols % 2 or self.guard_symbols < self.rrc_span_symbols:
            raise ValueError("guard_symbols must be even and cover the RRC span")

    @property
    def sample_rate(self) -> float:
        return self.symbol_rate * self.samples_per_symbol

    @property
    def pn_length(self) -> int:
        return 2**self.pn_degree - 1

    @property
    def snr_db(self) -> float:
        return self.tx_power_db - self.noise_floor_db

    @property
    def amplitude(self) -> float:
        return 10.0 ** (self.tx_power_db / 20.0)

    @property
    def preamble_symbols(self) -> int:
        # PN chips plus the differential reference symbol
        return self.pn_length + 1

    def frame_symbols(self, n_bits: int | None = None) -> int:
        n = self.bits_per_frame if n_bits is None else n_bits
        return self.guard_symbols + self.preamble_symbols + n

    def frame_samples(self, n_bits: int | None = None) -> int:
        return self.frame_symbols(n_bits) * self.samples_per_symbol

    def packet_airtime_s(self, n_bits: int | None = None) -> float:
        return self.frame_symbols(n_bits) / self.symbol_rate

    @property
    def acquisition_samples(self) -> int:
        return int(round(self.acquisition_time_s * self.sample_rate))


@dataclass
class BasebandFrame:
    samples: np.ndarray
    symbol_energy: float = 1.0
    symbol_boundaries: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.size == 0 or not np.all(np.isfinite(self.samples)):
            raise ValueError("frame samples must be non-empty and finite")

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class ChannelModel:
    snr_db: float = math.inf
    seed: int = 0
    phase_rad: float = 0.0

    @classmethod
    def from_config(cls, config: PhyConfig, seed: int = 0, noiseless: bool = False) -> "ChannelModel":
        return cls(math.inf if noiseless else config.snr_db, seed)

    @property
    def noiseless(self) -> bool:
        return math.isinf(self.snr_db) and self.snr_db > 0

    def noise_variance(self, symbol_energy: float) -> float:
        """Per-sample complex noise variance; equals N0 because pulses have unit energy."""
        if self.noiseless:
            return 0.0
        return symbol_energy / 10.0 ** (self.snr_db / 10.0)


# -- sequences and filters ---------------------------------------------------

def pn_sequence(degree: int = 5, taps=DEFAULT_PN_TAPS, seed_state: int = 0b11111) -> np.ndarray:
    """One period of a Fibonacci-LFSR m-sequence, mapped 0 -> +1, 1 -> -1.

    ``taps`` lists the exponents of the feedback polynomial other than the
    constant term; the default (5, 3) is x^5 + x^3 + 1.
    """
    if seed_state == 0 or seed_state >> degree:
        raise ValueError(f"seed_state must be a nonzero {degree}-bit value")
    if max(taps) != degree:
        raise ValueError("highest tap must equal the register degree")
    state = [(seed_state >> (degree - 1 - i)) & 1 for i in range(degree)]
    out = np.empty(2**degree - 1, dtype=np.int8)
    for k in range(out.size):
        out[k] = state[-1]
        fb = 0
        for t in taps:
            fb ^= state[t - 1]
        state = [fb] + state[:-1]
    return (1 - 2 * out).astype(np.float64)


def rrc_taps(rolloff: float, span_symbols: int, samples_per_symbol: int) -> np.ndarray:
    """Unit-energy root-raised-cosine impulse response, ``span*sps + 1`` taps."""
    beta = rolloff
    t = np.arange(-span_symbols * samples_per_symbol // 2,
                  span_symbols * samples_per_symbol // 2 + 1) / samples_per_symbol
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1 - beta + 4 * beta / np.pi
        elif abs(abs(4 * beta * ti) - 1) < 1e-9:
            h[i] = beta / np.sqrt(2) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
                + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
            )
        else:
            h[i] = (np.sin(np.pi * ti * (1 - beta)) + 4 * beta * ti * np.cos(np.pi * ti * (1 + beta))) / (
                np.pi * ti * (1 - (4 * beta * ti) ** 2)
            )
    return h / np.sqrt(np.sum(h**2))


def differential_encode(bits) -> np.ndarray:
    """Reference +1 followed by d_k = d_{k-1} * (-1 if bit_k else +1)."""
    bits = np.asarray(bits, dtype=np.int64)
    return np.concatenate([[1.0], np.cumprod(1 - 2 * bits, axis=-1).astype(np.float64)])


class _Link:
    """Filters and templates derived from one PhyConfig, cached per config."""

    _cache: dict = {}

    def __init__(self, config: PhyConfig):
        self.config = config
        sps = config.samples_per_symbol
        self.tx_taps = rrc_taps(config.rrc_rolloff, config.rrc_span_symbols, sps)
        self.rx_taps = self.tx_taps * np.hamming(self.tx_taps.size)
        self.pn = pn_sequence(config.pn_degree, config.pn_taps, config.pn_seed_state)
        self.dc_gain = self.tx_taps.sum() * self.rx_taps.sum()
        self.cascade_peak = float(np.dot(self.tx_taps, self.rx_taps[::-1]))
        half = self.tx_taps.size // 2
        reach = half // sps + 1
        k = sps * (reach - np.arange(2 * reach + 1))[:, None] + np.arange(sps)[None, :] + half
        ok = (k >= 0) & (k < self.tx_taps.size)
        self.polyphase = np.where(ok, self.tx_taps[np.clip(k, 0, self.tx_taps.size - 1)], 0.0)

    @classmethod
    def get(cls, config: PhyConfig) -> "_Link":
        if config not in cls._cache:
            cls._cache[config] = cls(config)
        return cls._cache[config]


def _shape(link: _Link, symbols: np.ndarray) -> np.ndarray:
    """Upsample-and-filter, trimmed so symbol k peaks at sample ``k * sps``.

    Polyphase form: output phase p of symbol slot q is ``sum_j a[q - j] h[sps*j + p + half]``,
    evaluated as one matmul of symbol windows against the (2*reach+1, sps) phase matrix.
    """
    sps = link.config.samples_per_symbol
    n, n_sym = symbols.shape
    reach = link.polyphase.shape[0] // 2
    padded = np.zeros((n, n_sym + 2 * reach))
    padded[:, reach:reach + n_sym] = symbols
    out = sliding_window_view(padded, 2 * reach + 1, axis=1) @ link.polyphase
    return out.reshape(n, n_sym * sps)


def _frame_symbols(link: _Link, bit_rows: np.ndarray) -> np.ndarray:
    cfg = link.config
    n, n_bits = bit_rows.shape
    g = cfg.guard_symbols // 2
    sym = np.zeros((n, cfg.frame_symbols(n_bits)))
    sym[:, g:g + cfg.pn_length] = link.pn
    sym[:, g + cfg.pn_length] = 1.0
    sym[:, g + cfg.pn_length + 1:g + cfg.pn_length + 1 + n_bits] = np.cumprod(
        1 - 2 * bit_rows.astype(np.int64), axis=1
    )
    return sym


def modulate_rows(bit_rows, config: PhyConfig) -> np.ndarray:
    """Modulate each row of a bit matrix into its own frame; returns ``(n, samples)``."""
    link = _Link.get(config)
    bit_rows = np.atleast_2d(np.asarray(bit_rows, dtype=np.uint8))
    return (config.amplitude * _shape(link, _frame_symbols(link, bit_rows))).astype(np.complex128)


def modulate(packet_bits, config: PhyConfig) -> BasebandFrame:
    bits = np.asarray(packet_bits, dtype=np.uint8).ravel()
    if bits.size == 0:
        raise ValueError("nothing to modulate")
    samples = modulate_rows(bits[None, :], config)[0]
    sps = config.samples_per_symbol
    start = (config.guard_symbols // 2) * sps
    bounds = start + sps * np.arange(config.preamble_symbols + bits.size)
    return BasebandFrame(samples, config.amplitude**2, bounds)


def _noise(n: int, variance: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` circular complex Gaussian samples (interleaved re/im draws)."""
    return np.sqrt(variance / 2.0) * rng.standard_normal(2 * n).view(np.complex128)


def channel(frame: BasebandFrame, model: ChannelModel) -> BasebandFrame:
    """Add circular complex Gaussian noise at the model's Es/N0 (and a fixed phase)."""
    out = frame.samples * np.exp(1j * model.phase_rad) if model.phase_rad else frame.samples.copy()
    var = model.noise_variance(frame.symbol_energy)
    if var:
        out = out + _noise(out.size, var, np.random.default_rng(model.seed)).reshape(out.shape)
    return BasebandFrame(out, frame.symbol_energy, frame.symbol_boundaries)


@dataclass
class _Detection:
    bits: np.ndarray
    sync_offset: np.ndarray
    peak_metric: np.ndarray
    found: np.ndarray


def _demodulate_rows(rx: np.ndarray, config: PhyConfig, n_bits: int) -> _Detection:
    link = _Link.get(config)
    sps = config.samples_per_symbol
    n_sym = config.preamble_symbols + n_bits
    span = (n_sym - 1) * sps
    n_rows, n_samples = rx.shape
    n_offsets = min(n_samples - span, config.acquisition_samples)
    if n_offsets < 1:
        raise ValueError(f"received block of {n_samples} samples is shorter than one frame")

    # DC removal, then matched filter with Hamming-windowed RRC taps
    rx = rx - rx.mean(axis=1, keepdims=True)
    # Only the acquisition window and the chosen symbol instants of the
    # (symmetric, 'same'-aligned) matched filter output are ever needed.
    g = link.rx_taps
    half = g.size // 2
    xpad = np.zeros((n_rows, n_samples + 2 * half), dtype=np.complex128)
    xpad[:, half:half + n_samples] = rx
    window = n_offsets + (config.pn_length - 1) * sps
    y = sliding_window_view(xpad[:, :window + g.size - 1], g.size, axis=1) @ g

    # Correlate against the PN chips at symbol spacing.
    corr = np.zeros((n_rows, n_offsets), dtype=np.complex128)
    for k, chip in enumerate(link.pn):
        corr += chip * y[:, k * sps:k * sps + n_offsets]
    mag = np.abs(corr)
    offset = mag.argmax(axis=1)
    peak = mag[np.arange(n_rows), offset]
    median = np.median(mag, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        metric = np.where(median > 0, peak / median, np.where(peak > 0, np.inf, 0.0))
    found = metric > config.detection_factor

    seg = np.take_along_axis(xpad, offset[:, None] + np.arange(span + g.size)[None, :], axis=1)
    sym = sliding_window_view(seg, g.size, axis=1)[:, ::sps] @ g

    # Mean subtraction also removed the frame's own average.  Restore it from
    # symbol-level decisions, with amplitude and phase taken from the
    # preamble correlation peak.
    pn_len = config.pn_length
    gain = corr[np.arange(n_rows), offset] / (pn_len * link.cascade_peak)
    decided = np.sign((sym[:, pn_len:] * np.conj(gain)[:, None]).real)
    symbol_sum = link.pn.sum() + decided.sum(axis=1)
    sym = sym + (symbol_sum * gain * link.dc_gain / n_samples)[:, None]

    data = sym[:, pn_len:]
    bits = (np.real(data[:, 1:] * np.conj(data[:, :-1])) < 0).astype(np.uint8)
    return _Detection(bits, offset, metric, found)


def demodulate(received: BasebandFrame | np.ndarray, config: PhyConfig, n_bits: int | None = None):
    """Recover ``(bits, sync_offset, peak_metric)`` from one received block.

    ``sync_offset`` is the sample index of the first preamble symbol centre.
    """
    samples = received.samples if isinstance(received, BasebandFrame) else np.asarray(received)
    n_bits = config.bits_per_frame if n_bits is None else n_bits
    det = _demodulate_rows(samples[None, :].astype(np.complex128), config, n_bits)
    if not det.found[0]:
        raise FrameNotFoundError(float(det.peak_metric[0]), config.detection_factor)
    return det.bits[0], int(det.sync_offset[0]), float(det.peak_metric[0])


@dataclass
class TransmissionReport:
    packets: list
    airtime_s: float
    n_sent: int
    n_detected: int
    n_crc_ok: int

    @property
    def corrupted_fraction(self) -> float:
        return 1.0 - self.n_crc_ok / self.n_sent if self.n_sent else 0.0


def _packet_seed(model: ChannelModel, stream: int, index: int):
    return np.random.default_rng([model.seed, stream, index])


def train_airtime_s(n_packets: int, config: PhyConfig) -> float:
    return n_packets * config.packet_airtime_s(PACKET_BITS)


def transmit_train_detailed(
    train: PacketTrain, config: PhyConfig, model: ChannelModel, stream: int = 0, chunk: int = 256
) -> TransmissionReport:
    """Send every packet through modulate -> channel -> demodulate -> CRC.

    Noise for packet ``i`` comes from its own generator keyed on
    ``(model.seed, stream, i)`` so results do not depend on batching or order.
    Frames the receiver cannot find are dropped from ``packets``.
    """
    bits = train.bit_matrix()
    n = bits.shape[0]
    received = []
    n_found = 0
    energy = config.amplitude**2
    var = model.noise_variance(energy)
    for lo in range(0, n, chunk):
        rows = bits[lo:lo + chunk]
        tx = modulate_rows(rows, config)
        if model.phase_rad:
            tx = tx * np.exp(1j * model.phase_rad)
        if var:
            for k in range(tx.shape[0]):
                tx[k] += _noise(tx.shape[1], var, _packet_seed(model, stream, lo + k))
        det = _demodulate_rows(tx, config, rows.shape[1])
        n_found += int(det.found.sum())
        received.extend(parse_packets(det.bits[det.found]))
    n_ok = sum(p.crc_ok for p in received)
    return TransmissionReport(received, train_airtime_s(n, config), n, n_found, n_ok)


def transmit_train(train: PacketTrain, config: PhyConfig, model: ChannelModel, stream: int = 0):
    report = transmit_train_detailed(train, config, model, stream)
    return report.packets, report.airtime_s


def write_iq(path, samples) -> None:
    """Interleaved little-endian float32 I/Q."""
    samples = np.asarray(samples, dtype=np.complex128)
    inter = np.empty(2 * samples.size, dtype="<f4")
    inter[0::2] = samples.real
    inter[1::2] = samples.imag
    inter.tofile(path)


def read_iq(path) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 2:
        raise ValueError(f"{path}: odd number of float32 values in I/Q dump")
    return raw[0::2].astype(np.float64) + 1j * raw[1::2]
