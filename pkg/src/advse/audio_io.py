"""WAV file I/O, amplitude handling, and SNR-controlled mixing.

All in-memory audio is float64 in [-1, 1]; PCM16 exists only at file
boundaries so that attacks can work with continuous amplitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import (
    DegenerateInputError,
    FormatError,
    NumericError,
    UnsupportedFormatError,
)

DEFAULT_SAMPLE_RATE = 16000

# Full-scale divisor for 16-bit PCM; 16384 -> 0.5 exactly.
PCM16_SCALE = 32768.0


@dataclass
class Waveform:
    """Mono audio buffer with sample rate, amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UnsupportedFormatError(
                f"waveform must be mono (1-D), got shape {samples.shape}"
            )
        if samples.size and not np.all(np.isfinite(samples)):
            raise NumericError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        if not len(self.samples):
            return 0.0
        return float(np.sqrt(np.mean(np.square(self.samples))))

    def peak(self) -> float:
        if not len(self.samples):
            return 0.0
        return float(np.max(np.abs(self.samples)))


@dataclass(frozen=True)
class MixSpec:
    """How to mix noise into clean speech: target SNR and crop determinism."""

    snr_db: float
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")


def read_wav(path) -> Waveform:
    """Read a mono PCM16 or float32 WAV file into a [-1, 1] float buffer."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"not a readable WAV file: {path}: {exc}") from exc
    if data.ndim != 1:
        raise UnsupportedFormatError(
            f"only mono WAV is supported, got {data.shape[1]} channels: {path}"
        )
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(
            f"unsupported WAV sample format {data.dtype} (need PCM16 or float32): {path}"
        )
    return Waveform(samples, int(rate))


def write_wav(path, w: Waveform) -> None:
    """Write mono PCM16, clipping to [-1, 1] and rounding half away from zero."""
    x = np.clip(w.samples, -1.0, 1.0)
    # np.round would round half to even; the file format contract wants
    # half-away-from-zero so that e.g. 0.5 -> 16384 regardless of parity.
    q = np.sign(x) * np.floor(np.abs(x) * PCM16_SCALE + 0.5)
    codes = np.clip(q, -32768, 32767).astype(np.int16)
    wavfile.write(path, w.sample_rate, codes)


def peak_normalize(w: Waveform, peak: float) -> Waveform:
    """Rescale so max |sample| equals `peak` (0 < peak <= 1)."""
    if not 0.0 < peak <= 1.0:
        raise ValueError(f"peak must be in (0, 1], got {peak}")
    m = w.peak()
    if m == 0.0:
        raise DegenerateInputError("cannot peak-normalize an all-zero waveform")
    return Waveform(w.samples * (peak / m), w.sample_rate)


def mix_components(
    clean: Waveform, noise: Waveform, spec: MixSpec
) -> tuple[Waveform, Waveform]:
    """Mix noise into clean speech; also return the clean part of the mixture.

    The noise is cropped at a seeded random offset (tiled first if shorter
    than the clean buffer) and scaled by
    g = (RMS(clean) / RMS(noise_crop)) * 10^(-snr_db / 20),
    with RMS over the full buffers.  The mixture is peak-normalized to 0.95
    only if it would clip; the returned clean component carries the same
    rescale, so it is exactly the clean content inside the mixture (the
    right supervision target for an enhancer, whose output cannot exceed
    the mixture's amplitude scale).
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(
            f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}"
        )
    if len(clean) == 0 or len(noise) == 0:
        raise DegenerateInputError("clean and noise must be non-empty")
    rng = np.random.default_rng(spec.seed)
    ns = noise.samples
    if len(ns) < len(clean):
        reps = int(np.ceil(len(clean) / len(ns)))
        ns = np.tile(ns, reps)
    offset = int(rng.integers(0, len(ns) - len(clean) + 1))
    crop = ns[offset : offset + len(clean)]

    rms_clean = clean.rms()
    rms_crop = float(np.sqrt(np.mean(np.square(crop))))
    if rms_clean == 0.0 or rms_crop == 0.0:
        raise DegenerateInputError("mixing requires non-silent clean and noise")

    gain = (rms_clean / rms_crop) * 10.0 ** (-spec.snr_db / 20.0)
    mixed = Waveform(clean.samples + gain * crop, clean.sample_rate)
    scale = 1.0
    if mixed.peak() > 1.0:
        scale = 0.95 / mixed.peak()
        mixed = peak_normalize(mixed, 0.95)
    return mixed, Waveform(clean.samples * scale, clean.sample_rate)


def mix_at_snr(clean: Waveform, noise: Waveform, spec: MixSpec) -> Waveform:
    """Mix noise into clean speech at a requested SNR (see mix_components)."""
    return mix_components(clean, noise, spec)[0]


def white_noise(num_samples: int, seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Seeded unit-variance Gaussian white noise."""
    rng = np.random.default_rng(seed)
    return Waveform(rng.standard_normal(num_samples), sample_rate)


def band_noise(
    num_samples: int,
    seed: int,
    low_hz: float = 500.0,
    high_hz: float = 2500.0,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """Seeded white noise band-limited to [low_hz, high_hz] by spectral masking."""
    if not 0 <= low_hz < high_hz <= sample_rate / 2:
        raise ValueError(f"bad band [{low_hz}, {high_hz}] at {sample_rate} Hz")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(num_samples)
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(num_samples, d=1.0 / sample_rate)
    spec[(freqs < low_hz) | (freqs > high_hz)] = 0.0
    return Waveform(np.fft.irfft(spec, n=num_samples), sample_rate)
