import binascii
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from commpy.filters import rrcosfilter
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from scipy.signal import max_len_seq, upfirdn

from hopguard.sim import CHIP_RATE, SAMPLES_PER_CHIP, PacketRole

log = logging.getLogger(__name__)

AES_BLOCK_BITS = 128
COUNTER_MODULUS = 1 << 128
MAX_STS_LENGTH = 4096

PREAMBLE_CODE_LENGTH = 127
# code index -> LFSR feedback taps of the degree-7 m-sequence the ternary code is built from
PREAMBLE_CODE_TAPS: dict[int, list[int]] = {9: [6], 10: [3], 11: [1], 12: [4]}
# decimation 2**k + 1 with gcd(k, 7) == 1 gives a preferred pair
PREAMBLE_CODE_DECIMATION = 3
SFD_WEIGHTS: dict[int, tuple[int, ...]] = {0: (0, 1, 0, -1, 1, 0, 0, -1)}

STS_PULSE_PERIOD_CHIPS = 8
STS_GAP_PERIODS = 128
SYMBOL_CHIPS = 128
HALF_SYMBOL_CHIPS = SYMBOL_CHIPS // 2
BURST_CHIPS = 32
BURST_OFFSET_CHIPS = (HALF_SYMBOL_CHIPS - BURST_CHIPS) // 2
PHR_BYTES = 2
CRC_BYTES = 2
BITS_PER_SYMBOL = 2

SEGMENT_ORDER = ("preamble", "sfd", "gap_pre", "sts", "gap_post", "phr", "payload")


@dataclass(frozen=True)
class StsCounterState:
    """AES key and 128-bit counter ("STS Data") feeding the STS generator."""

    key: bytes
    counter: int
    segment_length: int = 64

    def __post_init__(self):
        if len(self.key) != 16:
            raise ValueError(f"STS key must be 16 bytes, got {len(self.key)}")
        if not 0 <= self.counter < COUNTER_MODULUS:
            raise ValueError(f"STS counter {self.counter} outside 128-bit range")

    @property
    def blocks_per_packet(self) -> int:
        return max(1, -(-self.segment_length // AES_BLOCK_BITS))

    def advanced(self, packets: int = 1) -> "StsCounterState":
        step = self.blocks_per_packet * packets
        return replace(self, counter=(self.counter + step) % COUNTER_MODULUS)


@dataclass(frozen=True, eq=False)
class StsSequence:
    codes: np.ndarray
    source_counter: int

    def __len__(self) -> int:
        return int(self.codes.size)

    def correlation(self, other: "StsSequence") -> float:
        """Normalised zero-lag correlation with another sequence of equal length."""
        if len(other) != len(self):
            raise ValueError(f"length mismatch: {len(self)} vs {len(other)}")
        return float(np.dot(self.codes, other.codes.astype(np.int64)) / len(self))


@dataclass(frozen=True)
class PacketConfig:
    preamble_code_index: int = 9
    preamble_spreading_factor: int = 4
    preamble_symbol_repetitions: int = 64
    sfd_index: int = 0
    sts_segment_length: int = 64
    payload_bytes: int = 48
    samples_per_pulse: int = SAMPLES_PER_CHIP
    role: PacketRole = "legitimate"

    def __post_init__(self):
        if self.preamble_code_index not in PREAMBLE_CODE_TAPS:
            raise ValueError(
                f"Preamble code index {self.preamble_code_index} not in code table "
                f"{sorted(PREAMBLE_CODE_TAPS)}"
            )
        if self.sfd_index not in SFD_WEIGHTS:
            raise ValueError(f"SFD index {self.sfd_index} not supported")
        if self.preamble_spreading_factor < 1:
            raise ValueError("Preamble spreading factor must be >= 1")
        if self.preamble_symbol_repetitions < 2:
            raise ValueError("At least two preamble symbols are required")
        if not 0 < self.sts_segment_length <= MAX_STS_LENGTH:
            raise ValueError(f"STS length {self.sts_segment_length} outside 1..{MAX_STS_LENGTH}")
        if not 0 <= self.payload_bytes <= 255:
            raise ValueError(f"Payload capacity {self.payload_bytes} outside 0..255")
        if self.samples_per_pulse < 1:
            raise ValueError("samples_per_pulse must be >= 1")

    @classmethod
    def legitimate(cls, **overrides) -> "PacketConfig":
        return cls(**overrides)

    @classmethod
    def attack(cls, **overrides) -> "PacketConfig":
        values = {"preamble_spreading_factor": 9, "role": "attack"}
        values.update(overrides)
        return cls(**values)

    @property
    def sample_rate(self) -> float:
        return CHIP_RATE * self.samples_per_pulse

    @property
    def symbol_chips(self) -> int:
        return PREAMBLE_CODE_LENGTH * self.preamble_spreading_factor

    @property
    def sfd_symbols(self) -> int:
        return len(SFD_WEIGHTS[self.sfd_index])

    @property
    def sts_period_chips(self) -> int:
        return STS_PULSE_PERIOD_CHIPS

    @property
    def gap_chips(self) -> int:
        return STS_GAP_PERIODS * self.sts_period_chips

    @property
    def sts_chips(self) -> int:
        return self.sts_segment_length * self.sts_period_chips

    def data_chips(self, payload_length: int) -> int:
        return self.data_symbols(payload_length) * SYMBOL_CHIPS

    @staticmethod
    def data_symbols(payload_length: int) -> int:
        return (PHR_BYTES + payload_length + CRC_BYTES) * 8 // BITS_PER_SYMBOL

    def segment_chips(self, payload_length: int) -> dict[str, tuple[int, int]]:
        """Chip boundaries [start, stop) of every packet segment."""
        lengths = {
            "preamble": self.preamble_symbol_repetitions * self.symbol_chips,
            "sfd": self.sfd_symbols * self.symbol_chips,
            "gap_pre": self.gap_chips,
            "sts": self.sts_chips,
            "gap_post": self.gap_chips,
            "phr": PHR_BYTES * 8 // BITS_PER_SYMBOL * SYMBOL_CHIPS,
            "payload": (payload_length + CRC_BYTES) * 8 // BITS_PER_SYMBOL * SYMBOL_CHIPS,
        }
        bounds, position = {}, 0
        for name in SEGMENT_ORDER:
            bounds[name] = (position, position + lengths[name])
            position += lengths[name]
        return bounds


@dataclass(frozen=True, eq=False)
class PulseShape:
    taps: np.ndarray
    symbol_duration: float
    unit_power: bool = True

    def __post_init__(self):
        if self.unit_power:
            energy = float(np.sum(np.abs(self.taps) ** 2))
            if abs(energy - 1.0) > 1e-9:
                raise ValueError(f"Pulse energy {energy} is not unit")

    @property
    def delay(self) -> int:
        """Samples by which pulse tails extend past their impulse position."""
        return int(self.taps.size) - 1

    @classmethod
    def root_raised_cosine(
        cls,
        samples_per_pulse: int = SAMPLES_PER_CHIP,
        rolloff: float = 0.5,
        support: int = 8,
        symbol_duration: float = 1.0 / CHIP_RATE,
    ) -> "PulseShape":
        """
        Symmetric RRC spanning `support` chips, t = 0 on the centre tap.
        Times are in samples so the rrcosfilter singular points are hit exactly.
        """
        count = samples_per_pulse * support + 2
        _, taps = rrcosfilter(count, alpha=rolloff, Ts=float(samples_per_pulse), Fs=1.0)
        taps = taps[1:]
        taps = taps / np.sqrt(np.sum(taps**2))
        return cls(taps=taps, symbol_duration=symbol_duration)

    @classmethod
    def for_packet(cls, cfg: PacketConfig) -> "PulseShape":
        return cls.root_raised_cosine(
            samples_per_pulse=cfg.samples_per_pulse,
            symbol_duration=cfg.sts_period_chips / CHIP_RATE,
        )


@dataclass(eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: float
    origin_time: float = 0.0
    segments: dict[str, tuple[int, int]] = field(default_factory=dict)
    rmarker_sample: int = 0
    pulse_tail: int = 0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"Sample rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Waveform contains non-finite samples")

    def __len__(self) -> int:
        return int(self.samples.size)

    def time_of(self, index: int) -> float:
        return self.origin_time + index / self.sample_rate

    @property
    def epoch(self) -> float:
        """Global time of the ranging marker (first STS pulse)."""
        return self.time_of(self.rmarker_sample)

    def at_epoch(self, epoch: float) -> "Waveform":
        """Copy whose ranging marker leaves at `epoch` on the global clock."""
        return replace(
            self,
            samples=self.samples.copy(),
            origin_time=epoch - self.rmarker_sample / self.sample_rate,
        )

    def segment_power(self, name: str) -> float:
        """Average power of a segment, pulse tails included."""
        start, stop = self.segments[name]
        if stop <= start:
            raise ValueError(f"Segment {name} is empty")
        energy = np.sum(np.abs(self.samples[start : stop + self.pulse_tail]) ** 2)
        return float(energy / (stop - start))


def sts_keystream(key: bytes, counter: int, blocks: int) -> bytes:
    """AES-128 encryption of `blocks` successive counter values."""
    plaintext = b"".join(
        ((counter + i) % COUNTER_MODULUS).to_bytes(16, "big") for i in range(blocks)
    )
    encryptor = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return encryptor.update(plaintext) + encryptor.finalize()


def generate_sts(state: StsCounterState) -> StsSequence:
    """Map the AES keystream of `state` onto N codes (bit 0 -> +1, bit 1 -> -1)."""
    length = state.segment_length
    if length <= 0:
        raise ValueError("STS segment length must be positive; empty sequence requested")
    if length > MAX_STS_LENGTH:
        raise ValueError(f"STS segment length {length} exceeds {MAX_STS_LENGTH}")
    stream = sts_keystream(state.key, state.counter, state.blocks_per_packet)
    bits = np.unpackbits(np.frombuffer(stream, dtype=np.uint8))[:length]
    codes = (1 - 2 * bits.astype(np.int8)).astype(np.int8)
    codes.flags.writeable = False
    return StsSequence(codes=codes, source_counter=state.counter)


@lru_cache(maxsize=None)
def preamble_code(index: int) -> np.ndarray:
    """
    Length-127 ternary code (b + b[3i]) / 2 over an m-sequence b and its
    preferred-pair decimation. Zero where the two disagree; off-peak
    periodic autocorrelation is bounded by 9.
    """
    if index not in PREAMBLE_CODE_TAPS:
        raise ValueError(f"No preamble code for index {index}")
    sequence, _ = max_len_seq(7, taps=PREAMBLE_CODE_TAPS[index])
    base = 1 - 2 * sequence.astype(np.int64)
    decimated = base[(PREAMBLE_CODE_DECIMATION * np.arange(PREAMBLE_CODE_LENGTH)) % PREAMBLE_CODE_LENGTH]
    code = ((base + decimated) // 2).astype(np.int8)
    code.flags.writeable = False
    return code


def preamble_symbol(cfg: PacketConfig) -> np.ndarray:
    """One spread preamble symbol on the chip grid."""
    symbol = np.zeros(cfg.symbol_chips)
    symbol[:: cfg.preamble_spreading_factor] = preamble_code(cfg.preamble_code_index)
    return symbol


@lru_cache(maxsize=16)
def sync_header_chips(cfg: PacketConfig) -> np.ndarray:
    """Preamble followed by the SFD, on the chip grid."""
    symbol = preamble_symbol(cfg)
    preamble = np.tile(symbol, cfg.preamble_symbol_repetitions)
    sfd = np.concatenate([weight * symbol for weight in SFD_WEIGHTS[cfg.sfd_index]])
    chips = np.concatenate([preamble, sfd])
    chips.flags.writeable = False
    return chips


def crc16(data: bytes) -> int:
    return binascii.crc_hqx(data, 0xFFFF)


def frame_bytes(payload: bytes) -> bytes:
    """PHR + payload + CRC-16 over both."""
    length = len(payload)
    header = bytes([length, length ^ 0xFF])
    return header + payload + crc16(header + payload).to_bytes(CRC_BYTES, "big")


def data_chips(frame: bytes) -> np.ndarray:
    """BPM-BPSK chips: bit pair (position, polarity) per 128-chip symbol."""
    bits = np.unpackbits(np.frombuffer(frame, dtype=np.uint8)).reshape(-1, BITS_PER_SYMBOL).astype(np.int64)
    starts = np.arange(bits.shape[0]) * SYMBOL_CHIPS + bits[:, 0] * HALF_SYMBOL_CHIPS + BURST_OFFSET_CHIPS
    chips = np.zeros(bits.shape[0] * SYMBOL_CHIPS)
    chips[starts[:, None] + np.arange(BURST_CHIPS)[None, :]] = (1 - 2 * bits[:, 1])[:, None]
    return chips


def build_packet(
    cfg: PacketConfig,
    sts: StsSequence,
    payload: bytes = b"",
    pulse: PulseShape | None = None,
) -> Waveform:
    """Shape SYNC | SFD | gap | STS | gap | PHR | payload into a sampled waveform."""
    if len(sts) != cfg.sts_segment_length:
        raise ValueError(
            f"STS length {len(sts)} does not match configured {cfg.sts_segment_length}"
        )
    if len(payload) > cfg.payload_bytes:
        raise ValueError(
            f"Payload of {len(payload)} bytes exceeds capacity {cfg.payload_bytes}"
        )
    pulse = pulse or PulseShape.for_packet(cfg)

    sts_chips = np.zeros(cfg.sts_chips)
    sts_chips[:: cfg.sts_period_chips] = sts.codes
    gap = np.zeros(cfg.gap_chips)
    chips = np.concatenate(
        [sync_header_chips(cfg), gap, sts_chips, gap, data_chips(frame_bytes(bytes(payload)))]
    )
    samples = upfirdn(pulse.taps, chips, up=cfg.samples_per_pulse)

    sps = cfg.samples_per_pulse
    segments = {
        name: (start * sps, stop * sps)
        for name, (start, stop) in cfg.segment_chips(len(payload)).items()
    }
    log.debug("built %s packet: %d samples", cfg.role, samples.size)
    return Waveform(
        samples=samples.astype(np.complex128),
        sample_rate=cfg.sample_rate,
        origin_time=0.0,
        segments=segments,
        rmarker_sample=segments["sts"][0],
        pulse_tail=pulse.delay,
    )


__all__ = [
    "StsCounterState",
    "StsSequence",
    "PacketConfig",
    "PulseShape",
    "Waveform",
    "generate_sts",
    "build_packet",
    "preamble_code",
    "preamble_symbol",
    "frame_bytes",
    "crc16",
]
