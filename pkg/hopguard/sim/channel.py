import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from hopguard.sim import SPEED_OF_LIGHT, SimComponent
from hopguard.sim.phy import Waveform

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelConfig:
    """
    Link between two endpoints. SNR and SIR are both referenced to the
    legitimate STS segment power at the receiver; math.inf disables noise.
    """

    distance_m: float = 10.0
    snr_db: float = -10.0
    sir_db: float = -26.0
    multipath: tuple[tuple[int, float], ...] = ((0, 1.0),)
    attacker_distance_m: float = 1.0
    rx_guard_s: float = 1e-6
    rx_tail_s: float = 1e-6

    def __post_init__(self):
        if self.distance_m <= 0:
            raise ValueError(f"Distance must be positive, got {self.distance_m} m")
        if self.attacker_distance_m <= 0:
            raise ValueError(f"Attacker distance must be positive, got {self.attacker_distance_m} m")
        if not self.multipath:
            raise ValueError("Multipath profile needs at least one tap")
        if any(delay < 0 for delay, _ in self.multipath):
            raise ValueError("Multipath tap delays must be non-negative")
        if math.isnan(self.snr_db) or math.isnan(self.sir_db):
            raise ValueError("SNR and SIR must be numbers")

    @property
    def delay_s(self) -> float:
        return self.distance_m / SPEED_OF_LIGHT

    def delay_samples(self, sample_rate: float) -> int:
        return int(round(self.delay_s * sample_rate))

    @property
    def noiseless(self) -> bool:
        return math.isinf(self.snr_db) and self.snr_db > 0


@dataclass(eq=False)
class RxCapture:
    waveform: Waveform
    legit_arrival_sample: int
    sts_power: float
    noise_variance: float = 0.0
    attack_arrival_sample: int | None = None
    no_overlap: bool = False

    @property
    def sample_rate(self) -> float:
        return self.waveform.sample_rate

    @property
    def legit_arrival_time(self) -> float:
        return self.waveform.time_of(self.legit_arrival_sample)


def awgn(count: int, rng: np.random.Generator, variance: float = 1.0) -> np.ndarray:
    """Circular complex white Gaussian noise."""
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(count) + 1j * rng.standard_normal(count))


def apply_multipath(samples: np.ndarray, taps: tuple[tuple[int, float], ...]) -> np.ndarray:
    span = max(delay for delay, _ in taps)
    out = np.zeros(samples.size + span, dtype=np.complex128)
    for delay, gain in taps:
        out[delay : delay + samples.size] += gain * samples
    return out


def superimpose(base: np.ndarray, addition: np.ndarray, start: int) -> tuple[np.ndarray, bool]:
    """Add `addition` into a copy of `base` beginning at sample `start`."""
    out = base.copy()
    lo, hi = max(start, 0), min(start + addition.size, base.size)
    if hi <= lo:
        return out, False
    out[lo:hi] += addition[lo - start : hi - start]
    return out, True


def propagate(
    tx: Waveform, cfg: ChannelConfig, rng_seed=None, lead_time: float = 0.0
) -> RxCapture:
    """
    Delay `tx` by distance/c on the sample grid, scale it to the
    configured STS SNR against unit-variance noise, and open the receive
    window `rx_guard_s + lead_time` before the packet's first sample.
    """
    if len(tx) == 0:
        raise ValueError("Cannot propagate an empty waveform")
    fs = tx.sample_rate
    delay = cfg.delay_samples(fs)
    guard = int(round((cfg.rx_guard_s + lead_time) * fs))
    tail = int(round(cfg.rx_tail_s * fs))

    faded = replace(tx, samples=apply_multipath(tx.samples, cfg.multipath))
    sts_power = faded.segment_power("sts") if "sts" in tx.segments else 0.0

    if cfg.noiseless:
        gain, noise_variance = 1.0, 0.0
    else:
        if sts_power <= 0:
            raise ValueError("STS segment carries no power; SNR undefined")
        gain, noise_variance = math.sqrt(10 ** (cfg.snr_db / 10) / sts_power), 1.0

    offset = guard + delay
    samples = np.zeros(offset + faded.samples.size + tail, dtype=np.complex128)
    samples[offset : offset + faded.samples.size] = gain * faded.samples
    if noise_variance:
        samples += awgn(samples.size, np.random.default_rng(rng_seed), noise_variance)

    waveform = Waveform(
        samples=samples,
        sample_rate=fs,
        origin_time=tx.origin_time - guard / fs,
        segments={name: (a + offset, b + offset) for name, (a, b) in tx.segments.items()},
        rmarker_sample=tx.rmarker_sample + offset,
        pulse_tail=tx.pulse_tail,
    )
    return RxCapture(
        waveform=waveform,
        legit_arrival_sample=tx.rmarker_sample + offset,
        sts_power=gain**2 * sts_power,
        noise_variance=noise_variance,
    )


def inject(
    victim: RxCapture,
    attack: Waveform,
    sir_db: float,
    attack_tx_time: float,
    attacker_distance_m: float = 1.0,
) -> RxCapture:
    """
    Sum an attack waveform into a capture. `attack_tx_time` is the epoch of
    the attack's ranging marker; the waveform is scaled so the legitimate
    to attack STS power ratio equals `sir_db`.
    """
    fs = victim.sample_rate
    attack_power = attack.segment_power("sts")
    if attack_power <= 0:
        raise ValueError("Attack STS segment carries no power")
    scale = math.sqrt(victim.sts_power * 10 ** (-sir_db / 10) / attack_power)

    arrival_origin = (
        attack_tx_time - attack.rmarker_sample / fs + attacker_distance_m / SPEED_OF_LIGHT
    )
    start = int(round((arrival_origin - victim.waveform.origin_time) * fs))
    samples, overlapped = superimpose(victim.waveform.samples, scale * attack.samples, start)
    if not overlapped:
        log.warning("attack at sample %d lies outside the capture window", start)

    return replace(
        victim,
        waveform=replace(victim.waveform, samples=samples),
        attack_arrival_sample=start + attack.rmarker_sample,
        no_overlap=not overlapped,
    )


class Channel(SimComponent):
    """Per-link channel bound to one configuration."""

    component_name = "channel"

    def __init__(self, config: ChannelConfig, debug: bool = False):
        super().__init__(debug=debug)
        self.config = config

    def propagate(self, tx: Waveform, rng_seed=None, lead_time: float = 0.0) -> RxCapture:
        capture = propagate(tx, self.config, rng_seed, lead_time)
        self.log(
            "propagate",
            delay_samples=self.config.delay_samples(tx.sample_rate),
            arrival=capture.legit_arrival_sample,
        )
        return capture

    def inject(self, victim: RxCapture, attack: Waveform, attack_tx_time: float) -> RxCapture:
        capture = inject(
            victim,
            attack,
            self.config.sir_db,
            attack_tx_time,
            self.config.attacker_distance_m,
        )
        self.log(
            "inject",
            attack_arrival=capture.attack_arrival_sample,
            legit_arrival=capture.legit_arrival_sample,
            no_overlap=capture.no_overlap,
        )
        return capture


__all__ = [
    "ChannelConfig",
    "RxCapture",
    "Channel",
    "awgn",
    "propagate",
    "inject",
    "superimpose",
]
