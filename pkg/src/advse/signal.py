"""STFT analysis/synthesis on explicit DFT basis matrices.

The forward transform here is the reference for the graph engine's
differentiable spectral ops: both sides call the same framing, windowing,
basis-multiplication and overlap-add kernels, so forward values agree
bit for bit.  The DFT is a plain basis-matrix product rather than an FFT;
sizes are small and the matrices double as graph constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import Waveform
from .errors import ShapeError, SizeError

# Smoothing added under the square root of magnitudes so the gradient is
# defined at exactly-zero bins.
EPS_MAG = 1e-12


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window; shifted copies at hop n/2 sum to exactly 1."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 256
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        if self.frame_len < 64 or (self.frame_len & (self.frame_len - 1)) != 0:
            raise ValueError(f"frame_len must be a power of two >= 64, got {self.frame_len}")
        if self.hop != self.frame_len // 2:
            raise ValueError(f"hop must be frame_len/2 for 50% overlap, got {self.hop}")
        if self.window != "hann":
            raise ValueError(f"only the hann window is supported, got {self.window!r}")

    @property
    def num_bins(self) -> int:
        return self.frame_len // 2 + 1


def num_frames(num_samples: int, cfg: StftConfig) -> int:
    """Frame count covering the signal with one hop of zero padding each side."""
    return int(np.ceil(num_samples / cfg.hop)) + 1


def padded_len(frames: int, cfg: StftConfig) -> int:
    return cfg.frame_len + (frames - 1) * cfg.hop


def pad_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Zero-pad one hop at the head and whatever the tail needs for whole frames.

    The head pad matters: the window is zero at its first sample, so without
    it sample 0 of the signal would be unrecoverable by overlap-add.
    """
    frames = num_frames(len(x), cfg)
    out = np.zeros(padded_len(frames, cfg))
    out[cfg.hop : cfg.hop + len(x)] = x
    return out


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Slice the padded signal into overlapping frames, shape [T, frame_len]."""
    padded = pad_signal(x, cfg)
    return np.lib.stride_tricks.sliding_window_view(padded, cfg.frame_len)[:: cfg.hop].copy()


def ola_norm(frames: int, cfg: StftConfig) -> np.ndarray:
    """Per-sample sum of squared synthesis windows, floored to 1 where empty."""
    w2 = np.square(hann_window(cfg.frame_len))
    acc = np.zeros(padded_len(frames, cfg))
    for t in range(frames):
        acc[t * cfg.hop : t * cfg.hop + cfg.frame_len] += w2
    return np.where(acc > 1e-12, acc, 1.0)


def overlap_add_frames(time_frames: np.ndarray, cfg: StftConfig, original_len: int) -> np.ndarray:
    """Weighted overlap-add with Hann synthesis window and per-sample normalization."""
    frames = len(time_frames)
    win = hann_window(cfg.frame_len)
    acc = np.zeros(padded_len(frames, cfg))
    for t in range(frames):
        acc[t * cfg.hop : t * cfg.hop + cfg.frame_len] += time_frames[t] * win
    out = acc / ola_norm(frames, cfg)
    return out[cfg.hop : cfg.hop + original_len]


def dft_basis(frame_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Forward one-sided DFT bases: windowed_frames @ C gives the real plane,
    @ S the imaginary plane.  Shapes [frame_len, frame_len/2+1]."""
    k = np.arange(frame_len // 2 + 1)
    n = np.arange(frame_len)
    ang = 2.0 * np.pi * np.outer(n, k) / frame_len
    return np.cos(ang), -np.sin(ang)


def idft_basis(frame_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse bases: re @ IC + im @ IS reconstructs time-domain frames.

    Interior bins carry weight 2 (conjugate-symmetric halves folded in),
    DC and Nyquist weight 1.
    """
    bins = frame_len // 2 + 1
    k = np.arange(bins)
    n = np.arange(frame_len)
    weights = np.full(bins, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    ang = 2.0 * np.pi * np.outer(k, n) / frame_len
    ic = weights[:, None] * np.cos(ang) / frame_len
    is_ = -weights[:, None] * np.sin(ang) / frame_len
    return ic, is_


@dataclass
class Spectrogram:
    """One-sided complex STFT stored as real/imag planes [T, frame_len/2+1]."""

    real_part: np.ndarray
    imag_part: np.ndarray
    config: StftConfig
    original_len: int
    sample_rate: int

    def __post_init__(self):
        re = np.asarray(self.real_part, dtype=np.float64)
        im = np.asarray(self.imag_part, dtype=np.float64)
        if re.shape != im.shape or re.ndim != 2:
            raise ShapeError(f"real/imag planes disagree: {re.shape} vs {im.shape}")
        expect = (num_frames(self.original_len, self.config), self.config.num_bins)
        if re.shape != expect:
            raise ShapeError(
                f"spectrogram shape {re.shape} inconsistent with config/original_len "
                f"(expected {expect})"
            )
        self.real_part = re
        self.imag_part = im

    @property
    def shape(self) -> tuple[int, int]:
        return self.real_part.shape


def stft(w: Waveform, cfg: StftConfig | None = None) -> Spectrogram:
    """Hann-windowed one-sided STFT via explicit basis matrices."""
    cfg = cfg or StftConfig()
    if len(w) < cfg.frame_len:
        raise SizeError(f"waveform of {len(w)} samples is shorter than one frame ({cfg.frame_len})")
    frames = frame_signal(w.samples, cfg)
    windowed = frames * hann_window(cfg.frame_len)
    basis_c, basis_s = dft_basis(cfg.frame_len)
    return Spectrogram(
        windowed @ basis_c, windowed @ basis_s, cfg, len(w), w.sample_rate
    )


def istft(s: Spectrogram) -> Waveform:
    """Inverse STFT by weighted overlap-add; truncated to the original length."""
    ic, is_ = idft_basis(s.config.frame_len)
    time_frames = s.real_part @ ic + s.imag_part @ is_
    samples = overlap_add_frames(time_frames, s.config, s.original_len)
    return Waveform(samples, s.sample_rate)


def magnitude(s: Spectrogram) -> np.ndarray:
    """Smoothed magnitudes sqrt(re^2 + im^2 + EPS_MAG), differentiable at zero."""
    return np.sqrt(np.square(s.real_part) + np.square(s.imag_part) + EPS_MAG)


def cola_deviation(cfg: StftConfig, frames: int = 16) -> float:
    """Max deviation of the summed analysis windows from 1 over interior samples."""
    win = hann_window(cfg.frame_len)
    acc = np.zeros(padded_len(frames, cfg))
    for t in range(frames):
        acc[t * cfg.hop : t * cfg.hop + cfg.frame_len] += win
    interior = acc[cfg.hop : (frames - 1) * cfg.hop]
    return float(np.max(np.abs(interior - 1.0)))
