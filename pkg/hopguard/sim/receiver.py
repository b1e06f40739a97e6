import csv
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve, find_peaks

from hopguard.sim import SAMPLE_RATE, FailureCode, ReceptionError, SimComponent
from hopguard.sim.channel import RxCapture
from hopguard.sim.phy import (
    BITS_PER_SYMBOL,
    BURST_CHIPS,
    BURST_OFFSET_CHIPS,
    CRC_BYTES,
    HALF_SYMBOL_CHIPS,
    PHR_BYTES,
    SFD_WEIGHTS,
    SYMBOL_CHIPS,
    PacketConfig,
    PulseShape,
    StsSequence,
    crc16,
    preamble_symbol,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReceiverConfig:
    btw_samples: int = 400
    mpep_threshold: float = 0.5
    papr_threshold: float = 2.0
    sfd_detect_threshold: float = 0.6
    rake_fingers: int = 4
    rake_guard_samples: int = 8
    rake_span_samples: int = 64
    rake_floor: float = 0.5
    noise_floor_sigmas: float = 5.0
    cancel_sidelobes: bool = True
    adc_full_scale: float | None = 8.0
    agc_symbols: int = 8
    sync_min_ratio: float = 4.0

    def __post_init__(self):
        if self.btw_samples < 1:
            raise ValueError(f"BTW must span at least one sample, got {self.btw_samples}")
        for name in ("mpep_threshold", "papr_threshold", "sfd_detect_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rake_fingers < 1:
            raise ValueError("RAKE needs at least one finger")
        if self.rake_guard_samples < 0 or self.rake_span_samples < 0:
            raise ValueError("RAKE search window must not be negative")
        if not 0 <= self.rake_floor < 1:
            raise ValueError(f"RAKE floor {self.rake_floor} outside [0, 1)")
        if self.noise_floor_sigmas < 0:
            raise ValueError("noise_floor_sigmas must not be negative")
        if self.adc_full_scale is not None and self.adc_full_scale <= 0:
            raise ValueError("ADC full scale must be positive")


@dataclass(frozen=True, eq=False)
class CirSpectrum:
    """Magnitude of the STS cross-correlation over sample offsets."""

    trace: np.ndarray
    p_max: float
    p_rms: float
    peak_index: int
    complex_trace: np.ndarray | None = None
    origin_sample: int = 0
    sample_rate: float = SAMPLE_RATE

    @classmethod
    def from_trace(
        cls,
        trace: np.ndarray,
        complex_trace: np.ndarray | None = None,
        origin_sample: int = 0,
        sample_rate: float = SAMPLE_RATE,
    ) -> "CirSpectrum":
        trace = np.asarray(trace, dtype=float)
        if trace.size == 0:
            raise ValueError("Empty correlation trace")
        return cls(
            trace=trace,
            p_max=float(trace.max()),
            p_rms=float(np.sqrt(np.mean(trace**2))),
            peak_index=int(np.argmax(trace)),
            complex_trace=complex_trace,
            origin_sample=origin_sample,
            sample_rate=sample_rate,
        )

    @property
    def degenerate(self) -> bool:
        return self.p_max <= 0

    @property
    def noise_sigma(self) -> float:
        """Rayleigh scale of the trace estimated from its median."""
        return float(np.median(self.trace) / np.sqrt(2.0 * np.log(2.0)))

    def to_rows(self) -> list[tuple[int, float]]:
        return [(self.origin_sample + k, float(v)) for k, v in enumerate(self.trace)]


@dataclass(frozen=True)
class ToaEstimate:
    first_path_sample: int
    sample_rate: float
    valid: bool = False
    trace_index: int = 0

    @property
    def first_path_time(self) -> float:
        return self.first_path_sample / self.sample_rate


@dataclass(eq=False)
class Reception:
    toa: ToaEstimate
    payload: bytes | None = None
    failure: FailureCode | None = None
    cir: CirSpectrum | None = None
    rx_time: float | None = None
    stages: dict[str, float | int] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.toa.valid


def matched_filter(samples: np.ndarray, pulse: PulseShape) -> np.ndarray:
    """Filter with p*; output index s holds the response to an impulse at s."""
    full = fftconvolve(samples, np.conj(pulse.taps[::-1]))
    return full[pulse.delay : pulse.delay + samples.size]


def front_end(samples: np.ndarray, cfg: ReceiverConfig, agc_window: int) -> np.ndarray:
    """AGC on the leading window, then I/Q ADC saturation at full scale."""
    if cfg.adc_full_scale is None:
        return samples
    head = samples[: max(agc_window, 1)]
    rms = np.sqrt(np.mean(np.abs(head) ** 2) / 2.0)
    if rms <= 0:
        return samples
    level = cfg.adc_full_scale * rms
    return np.clip(samples.real, -level, level) + 1j * np.clip(samples.imag, -level, level)


def cross_correlate(
    capture: RxCapture,
    template: StsSequence,
    pulse: PulseShape,
    coarse_sync_sample: int,
    btw_samples: int = 400,
    filtered: np.ndarray | None = None,
) -> CirSpectrum:
    """
    trace[k] = |sum_i a[i] y(coarse + k + i*T_b)| for k in [-btw, +btw],
    where y is the matched-filter output of the capture.
    """
    if filtered is None:
        filtered = matched_filter(capture.waveform.samples, pulse)
    period = int(round(pulse.symbol_duration * capture.sample_rate))
    offsets = np.arange(-btw_samples, btw_samples + 1)
    positions = coarse_sync_sample + offsets[:, None] + period * np.arange(len(template))[None, :]
    if positions.min() < 0 or positions.max() >= filtered.size:
        raise ReceptionError(
            "window",
            f"STS window [{positions.min()}, {positions.max()}] exceeds capture of "
            f"{filtered.size} samples",
        )
    correlation = filtered[positions] @ template.codes.astype(float)
    return CirSpectrum.from_trace(
        np.abs(correlation),
        complex_trace=correlation,
        origin_sample=coarse_sync_sample - btw_samples,
        sample_rate=capture.sample_rate,
    )


def sidelobe_response(template: StsSequence, pulse: PulseShape, period: int) -> np.ndarray:
    """
    Correlation trace of a unit path against its own template with the
    zero-lag term removed. Index (N - 1) * period + pulse.delay is zero offset.
    """
    codes = template.codes.astype(float)
    lags = np.correlate(codes, codes, mode="full")
    lags[codes.size - 1] = 0.0
    train = np.zeros((lags.size - 1) * period + 1)
    train[::period] = lags
    shape = np.convolve(pulse.taps, np.conj(pulse.taps[::-1])).real
    return np.convolve(train, shape)


def cancel_sidelobes(cir: CirSpectrum, template: StsSequence, pulse: PulseShape, period: int) -> CirSpectrum:
    """Subtract the template sidelobes of the strongest path from the trace."""
    if cir.complex_trace is None or cir.degenerate:
        return cir
    response = sidelobe_response(template, pulse, period)
    centre = (len(template) - 1) * period + pulse.delay
    gain = cir.complex_trace[cir.peak_index] / (len(template) + response[centre])
    lag = np.arange(cir.trace.size) - cir.peak_index + centre
    inside = (lag >= 0) & (lag < response.size)
    cleaned = cir.complex_trace.astype(complex)
    cleaned[inside] -= gain * response[lag[inside]]
    cleaned[cir.peak_index] = cir.complex_trace[cir.peak_index]
    return CirSpectrum.from_trace(np.abs(cleaned), cleaned, cir.origin_sample, cir.sample_rate)


def leading_edge_detect(cir: CirSpectrum, cfg: ReceiverConfig) -> ToaEstimate:
    """
    Earliest sample within the BTW before the peak exceeding
    max(P_max*T_m, P_rms*T_p, noise floor).
    """
    if cir.degenerate:
        raise ValueError("Cannot search a degenerate CIR")
    threshold = max(
        cir.p_max * cfg.mpep_threshold,
        cir.p_rms * cfg.papr_threshold,
        cir.noise_sigma * cfg.noise_floor_sigmas,
    )
    start = max(0, cir.peak_index - cfg.btw_samples)
    above = np.flatnonzero(cir.trace[start : cir.peak_index] > threshold)
    index = start + int(above[0]) if above.size else cir.peak_index
    return ToaEstimate(
        first_path_sample=cir.origin_sample + index,
        sample_rate=cir.sample_rate,
        trace_index=index,
    )


def leading_edge_bias(pulse: PulseShape, cfg: ReceiverConfig) -> int:
    """Samples by which an isolated clean pulse is detected early."""
    response = np.abs(np.convolve(pulse.taps, np.conj(pulse.taps[::-1])))
    peak = int(np.argmax(response))
    response = response / response[peak]
    start = max(0, peak - cfg.btw_samples)
    above = np.flatnonzero(response[start:peak] > cfg.mpep_threshold)
    return peak - (start + int(above[0])) if above.size else 0


def rake_fingers(
    cir: CirSpectrum,
    count: int,
    anchor: int | None = None,
    guard: int = 8,
    span: int = 64,
    floor: float = 0.5,
) -> np.ndarray:
    """
    Trace indices of the strongest taps in [anchor - guard, anchor + span]
    holding at least `floor` of that window's maximum, strongest first.
    """
    anchor = cir.peak_index if anchor is None else anchor
    lo, hi = max(0, anchor - guard), min(cir.trace.size, anchor + span + 1)
    if hi <= lo:
        raise ReceptionError("window", f"RAKE window around {anchor} is outside the trace")
    window = cir.trace[lo:hi]
    best = int(np.argmax(window))
    peaks, _ = find_peaks(window, height=floor * window[best])
    ranked = peaks[np.argsort(window[peaks])[::-1]]
    ranked = ranked[ranked != best]
    return lo + np.concatenate([[best], ranked])[:count].astype(int)


def demodulate(
    filtered: np.ndarray,
    data_start: int,
    delays: np.ndarray,
    weights: np.ndarray,
    symbols: int,
    samples_per_pulse: int,
    first_symbol: int = 0,
) -> bytes:
    """
    RAKE combine BPM-BPSK bursts. Each finger samples the burst chips at
    its own delay; fingers are weighted by conj(CIR tap).
    """
    sym = np.arange(first_symbol, first_symbol + symbols)
    chip = (
        sym[:, None, None] * SYMBOL_CHIPS
        + np.arange(2)[None, :, None] * HALF_SYMBOL_CHIPS
        + BURST_OFFSET_CHIPS
        + np.arange(BURST_CHIPS)[None, None, :]
    )
    positions = data_start + np.asarray(delays)[:, None, None, None] + chip[None] * samples_per_pulse
    if positions.min() < 0 or positions.max() >= filtered.size:
        raise ReceptionError("window", "data symbols extend past the capture")
    per_finger = filtered[positions].sum(axis=-1)
    combined = np.tensordot(np.conj(weights), per_finger, axes=(0, 0)).real
    position_bit = (np.abs(combined[:, 1]) > np.abs(combined[:, 0])).astype(np.uint8)
    chosen = combined[np.arange(symbols), position_bit]
    polarity_bit = (chosen < 0).astype(np.uint8)
    bits = np.stack([position_bit, polarity_bit], axis=1).reshape(-1)
    return np.packbits(bits).tobytes()


class Receiver(SimComponent):
    """
    Preamble sync, SFD detection, STS cross-correlation, leading-edge
    ToA and RAKE demodulation for one packet configuration.
    """

    component_name = "receiver"

    def __init__(
        self,
        config: ReceiverConfig | None = None,
        packet: PacketConfig | None = None,
        debug: bool = False,
        cir_dump: Path | None = None,
    ):
        super().__init__(debug=debug)
        self.config = config or ReceiverConfig()
        self.packet = packet or PacketConfig.legitimate()
        self.cir_dump = Path(cir_dump) if cir_dump else None
        self.pulse = PulseShape.for_packet(self.packet)
        self.bias = leading_edge_bias(self.pulse, self.config)

    @cached_property
    def symbol_train(self) -> np.ndarray:
        """Preamble symbol as impulses on the sample grid, time reversed."""
        sps = self.packet.samples_per_pulse
        train = np.zeros(self.packet.symbol_chips * sps)
        train[::sps] = preamble_symbol(self.packet)
        return train[::-1].copy()

    @property
    def symbol_samples(self) -> int:
        return self.packet.symbol_chips * self.packet.samples_per_pulse

    def cross_correlate(
        self,
        capture: RxCapture,
        template: StsSequence,
        coarse_sync_sample: int,
        filtered: np.ndarray | None = None,
    ) -> CirSpectrum:
        cir = cross_correlate(
            capture,
            template,
            self.pulse,
            coarse_sync_sample,
            self.config.btw_samples,
            filtered,
        )
        if self.config.cancel_sidelobes:
            period = int(round(self.pulse.symbol_duration * capture.sample_rate))
            cir = cancel_sidelobes(cir, template, self.pulse, period)
        return cir

    def leading_edge_detect(self, cir: CirSpectrum) -> ToaEstimate:
        return leading_edge_detect(cir, self.config)

    def synchronise(self, filtered: np.ndarray) -> tuple[int, float]:
        """Return (STS start estimate, SFD correlation)."""
        length = self.symbol_samples
        correlation = fftconvolve(filtered, self.symbol_train, mode="valid")
        rows = min(self.packet.preamble_symbol_repetitions // 2, correlation.size // length)
        if rows < 2:
            raise ReceptionError("sync", "capture shorter than two preamble symbols")
        folded = (np.abs(correlation[: rows * length]) ** 2).reshape(rows, length).sum(axis=0)
        mean = folded.mean()
        if mean <= 0 or folded.max() / mean < self.config.sync_min_ratio:
            raise ReceptionError("sync", "no preamble correlation peak")
        phase = int(np.argmax(folded))
        self.log("sync", phase=phase, ratio=round(float(folded.max() / mean), 1))

        values = correlation[phase::length]
        reference = values[:rows].mean()
        if abs(reference) == 0:
            raise ReceptionError("sync", "zero preamble reference")
        soft = (values * np.conj(reference)).real / abs(reference)

        weights = np.asarray(SFD_WEIGHTS[self.packet.sfd_index], dtype=float)
        if soft.size < weights.size:
            raise ReceptionError("sfd", "capture ends before an SFD could fit")
        windows = sliding_window_view(soft, weights.size)
        norms = np.linalg.norm(windows, axis=1) * np.linalg.norm(weights)
        scores = np.divide(windows @ weights, norms, out=np.zeros(len(windows)), where=norms > 0)
        start = int(np.argmax(scores))
        score = float(scores[start])
        self.log("sfd", symbol=start, correlation=round(score, 3))
        if score < self.config.sfd_detect_threshold:
            raise ReceptionError("sfd", f"SFD correlation {score:.3f} below threshold")

        sps = self.packet.samples_per_pulse
        sfd_start = phase + start * length
        sts_start = sfd_start + (weights.size * self.packet.symbol_chips + self.packet.gap_chips) * sps
        return sts_start, score

    def receive_packet(
        self, capture: RxCapture, template: StsSequence, label: str = "packet"
    ) -> Reception:
        """
        Full chain. The ToA is marked valid only when SFD, PHR and CRC
        all pass; failures come back as a Reception with `failure` set.
        """
        fs = capture.sample_rate
        reception = Reception(toa=ToaEstimate(first_path_sample=0, sample_rate=fs))
        try:
            samples = front_end(
                capture.waveform.samples,
                self.config,
                self.config.agc_symbols * self.symbol_samples,
            )
            filtered = matched_filter(samples, self.pulse)
            sts_start, score = self.synchronise(filtered)
            reception.stages.update(sts_nominal=sts_start, sfd_correlation=score)

            cir = self.cross_correlate(capture, template, sts_start, filtered)
            reception.cir = cir
            if cir.degenerate:
                raise ReceptionError("sync", "STS correlation is identically zero")
            toa = self.leading_edge_detect(cir)
            reception.toa = toa
            reception.stages.update(peak=cir.origin_sample + cir.peak_index, first_path=toa.first_path_sample)
            self.log(
                "cir",
                label=label,
                peak=cir.origin_sample + cir.peak_index,
                first_path=toa.first_path_sample,
                p_max=round(cir.p_max, 2),
                p_rms=round(cir.p_rms, 2),
            )
            if self.cir_dump is not None:
                dump_cir(cir, self.cir_dump / f"cir_{label}.csv")

            reception.payload = self.decode(filtered, cir, sts_start)
            reception.toa = replace(toa, valid=True)
            reception.rx_time = capture.waveform.time_of(toa.first_path_sample) + self.bias / fs
        except ReceptionError as error:
            reception.failure = error.code
            self.log("failure", label=label, code=error.code, reason=str(error))
        return reception

    def decode(self, filtered: np.ndarray, cir: CirSpectrum, sts_start: int) -> bytes:
        sps = self.packet.samples_per_pulse
        data_start = sts_start + (self.packet.sts_chips + self.packet.gap_chips) * sps
        cfg = self.config
        fingers = rake_fingers(
            cir,
            cfg.rake_fingers,
            anchor=sts_start - cir.origin_sample,
            guard=cfg.rake_guard_samples,
            span=cfg.rake_span_samples,
            floor=cfg.rake_floor,
        )
        delays = cir.origin_sample + fingers - sts_start
        weights = cir.complex_trace[fingers]

        header_symbols = PHR_BYTES * 8 // BITS_PER_SYMBOL
        header = demodulate(filtered, data_start, delays, weights, header_symbols, sps)
        length = header[0]
        if header[1] != length ^ 0xFF or length > self.packet.payload_bytes:
            raise ReceptionError("phr", f"PHR check failed ({header.hex()})")

        body_symbols = (length + CRC_BYTES) * 8 // BITS_PER_SYMBOL
        body = demodulate(filtered, data_start, delays, weights, body_symbols, sps, header_symbols)
        payload, checksum = body[:length], body[length:]
        if crc16(header + payload) != int.from_bytes(checksum, "big"):
            raise ReceptionError("crc", "CRC-16 mismatch")
        return payload


def dump_cir(cir: CirSpectrum, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["offset_sample", "magnitude"])
        writer.writerows(cir.to_rows())


def receive_packet(
    capture: RxCapture,
    template: StsSequence,
    cfg: ReceiverConfig | None = None,
    packet: PacketConfig | None = None,
) -> Reception:
    return Receiver(cfg, packet).receive_packet(capture, template)


__all__ = [
    "ReceiverConfig",
    "CirSpectrum",
    "ToaEstimate",
    "Reception",
    "Receiver",
    "matched_filter",
    "front_end",
    "cross_correlate",
    "leading_edge_detect",
    "leading_edge_bias",
    "sidelobe_response",
    "cancel_sidelobes",
    "rake_fingers",
    "demodulate",
    "receive_packet",
    "dump_cir",
]
