import logging
from dataclasses import dataclass

import numpy as np

from hopguard.sim.receiver import CirSpectrum, ToaEstimate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectionConfig:
    taps: int = 16
    bits: int = 8
    threshold: float = 0.9
    tap_span: int = 25

    def __post_init__(self):
        if self.taps < 1:
            raise ValueError(f"Feature needs at least one tap, got {self.taps}")
        if not 1 <= self.bits <= 8:
            raise ValueError(f"Quantiser resolution {self.bits} outside 1..8 bits")
        if not 0 < self.threshold <= 1:
            raise ValueError(f"Similarity threshold {self.threshold} outside (0, 1]")
        if self.tap_span < 1:
            raise ValueError(f"Each tap must span at least one sample, got {self.tap_span}")

    @property
    def feature_bytes(self) -> int:
        return self.taps


@dataclass(frozen=True, eq=False)
class CirFeature:
    """Quantised tap magnitudes from the first path onward; a tap is the peak of `span` samples."""

    values: np.ndarray
    bits: int = 8
    padded: bool = False

    def __post_init__(self):
        top = (1 << self.bits) - 1
        if self.values.min(initial=0) < 0 or self.values.max(initial=0) > top:
            raise ValueError(f"Feature values outside 0..{top}")

    @property
    def taps(self) -> int:
        return int(self.values.size)

    def to_bytes(self) -> bytes:
        return self.values.astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, bits: int = 8) -> "CirFeature":
        return cls(values=np.frombuffer(data, dtype=np.uint8).astype(np.int64), bits=bits)

    def similarity(self, other: "CirFeature") -> float:
        if other.taps != self.taps or other.bits != self.bits:
            raise ValueError(
                f"Feature shapes differ: {self.taps}x{self.bits} vs {other.taps}x{other.bits}"
            )
        a, b = self.values.astype(float), other.values.astype(float)
        norm = np.linalg.norm(a) * np.linalg.norm(b)
        return float(a @ b / norm) if norm > 0 else 0.0


def extract_feature(
    cir: CirSpectrum, toa: ToaEstimate, taps: int = 16, bits: int = 8, span: int = 1
) -> CirFeature:
    if not toa.valid:
        raise ValueError("Feature extraction needs a valid ToA estimate")
    start = toa.first_path_sample - cir.origin_sample
    if not 0 <= start < cir.trace.size:
        raise ValueError(f"First path {toa.first_path_sample} lies outside the CIR trace")
    length = taps * span
    window = cir.trace[start : start + length]
    padded = window.size < length
    if padded:
        window = np.pad(window, (0, length - window.size))
    window = window.reshape(taps, span).max(axis=1)
    top = (1 << bits) - 1
    peak = window.max()
    scaled = window / peak if peak > 0 else window
    return CirFeature(values=np.rint(scaled * top).astype(np.int64), bits=bits, padded=padded)


def detect(local: CirFeature, remote: CirFeature, threshold: float = 0.9) -> int:
    """S = 1 when the two sides' CIR features disagree."""
    return int(local.similarity(remote) < threshold)


__all__ = ["DetectionConfig", "CirFeature", "extract_feature", "detect"]
