"""Synthetic speech surrogate: word sequences encoded as tone patterns.

Words are fixed-frequency sinusoid bursts separated by short silences.
Decoding segments the signal into word-length windows aligned by energy
gating and classifies each window by its dominant DFT frequency, which
gives an exact, deterministic stand-in for a speech recognizer: clean
round trips are lossless, while noise and enhancement artifacts produce
genuine word errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import DEFAULT_SAMPLE_RATE, Waveform
from .errors import EmptyInputError

# A window's peak must land within this distance of a vocabulary frequency
# to emit a word; anything farther is treated as non-speech.
PEAK_TOL_HZ = 75.0


@dataclass(frozen=True)
class CodecConfig:
    vocab_size: int = 16
    word_dur: float = 0.1
    gap_dur: float = 0.025
    base_freq: float = 400.0
    freq_step: float = 150.0
    amplitude: float = 0.5
    ramp_dur: float = 0.005
    energy_floor: float = 1e-3
    # Silence/speech segmentation also adapts to the utterance level:
    # spectral synthesis smears a little tone energy into the inter-word
    # gaps (overlap-add bleed sits near 2% of full scale), so a purely
    # absolute gate would never see enhanced gaps as silent.
    relative_floor: float = 0.1
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        top = self.freq(self.vocab_size - 1)
        if top >= self.sample_rate / 2:
            raise ValueError(f"top vocabulary frequency {top} Hz exceeds Nyquist")
        # Words must stay separable on the default 256-sample analysis grid.
        if self.freq_step < 2 * self.sample_rate / 256:
            raise ValueError(
                f"freq_step {self.freq_step} Hz puts words closer than two spectral bins"
            )

    def freq(self, word: int) -> float:
        return self.base_freq + self.freq_step * word

    @property
    def word_samples(self) -> int:
        return int(round(self.word_dur * self.sample_rate))

    @property
    def gap_samples(self) -> int:
        return int(round(self.gap_dur * self.sample_rate))


def encode(words, cfg: CodecConfig | None = None) -> Waveform:
    """Render a word sequence as tone bursts with raised-cosine ramps."""
    cfg = cfg or CodecConfig()
    words = list(words)
    if not words:
        raise EmptyInputError("cannot encode an empty transcript")
    for w in words:
        if not 0 <= w < cfg.vocab_size:
            raise ValueError(f"word index {w} outside vocabulary of {cfg.vocab_size}")

    n_word = cfg.word_samples
    n_gap = cfg.gap_samples
    n_ramp = int(round(cfg.ramp_dur * cfg.sample_rate))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_ramp) / n_ramp)
    t = np.arange(n_word) / cfg.sample_rate

    out = np.zeros(len(words) * n_word + (len(words) - 1) * n_gap)
    for i, w in enumerate(words):
        tone = cfg.amplitude * np.sin(2.0 * np.pi * cfg.freq(w) * t)
        tone[:n_ramp] *= ramp
        tone[-n_ramp:] *= ramp[::-1]
        start = i * (n_word + n_gap)
        out[start : start + n_word] = tone
    return Waveform(out, cfg.sample_rate)


def _frame_rms(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    if len(x) < frame:
        return np.zeros(0)
    sq = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    return np.sqrt(np.mean(np.square(sq), axis=1))


def _dominant_freq(seg: np.ndarray, sample_rate: int) -> float:
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(len(seg)) / len(seg))
    mag = np.abs(np.fft.rfft(seg * win))
    k = int(np.argmax(mag[1:])) + 1  # skip DC
    return k * sample_rate / len(seg)


def decode(w: Waveform, cfg: CodecConfig | None = None) -> list[int]:
    """Recover a word sequence from audio.

    Short energy frames below `energy_floor` count as silence; each word
    window opens at the next active frame, and a window emits a word only
    if its RMS clears the floor and its spectral peak lies within
    PEAK_TOL_HZ of a vocabulary frequency.
    """
    cfg = cfg or CodecConfig()
    x = w.samples
    sr = w.sample_rate
    n_word = int(round(cfg.word_dur * sr))
    frame = max(1, int(round(0.005 * sr)))
    hop = max(1, frame // 2)

    overall = float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0
    floor = max(cfg.energy_floor, cfg.relative_floor * overall)
    rms = _frame_rms(x, frame, hop)
    active = rms >= floor
    vocab = np.array([cfg.freq(i) for i in range(cfg.vocab_size)])

    words: list[int] = []
    pos = 0
    while True:
        first = pos // hop + (1 if pos % hop else 0)
        hits = np.nonzero(active[first:])[0]
        if not len(hits):
            break
        start = (first + int(hits[0])) * hop
        # The frame grid quantizes onsets; snap to the first sample that
        # clears the floor so word windows do not leave ringing tails that
        # would re-trigger as spurious words.
        lead = np.nonzero(np.abs(x[start : start + 2 * frame]) >= floor)[0]
        if len(lead):
            start += int(lead[0])
        seg = x[start : start + n_word]
        if len(seg) < n_word // 2:
            break
        if np.sqrt(np.mean(np.square(seg))) >= floor:
            peak = _dominant_freq(seg, sr)
            dist = np.abs(vocab - peak)
            if dist.min() <= PEAK_TOL_HZ:
                words.append(int(np.argmin(dist)))
        pos = start + n_word
    return words


def random_sentence(seed: int, length: int, cfg: CodecConfig | None = None) -> list[int]:
    """Deterministic uniform i.i.d. word draw."""
    cfg = cfg or CodecConfig()
    if length < 1:
        raise EmptyInputError("sentence length must be >= 1")
    rng = np.random.default_rng(seed)
    return [int(v) for v in rng.integers(0, cfg.vocab_size, size=length)]


def transcript_to_text(words) -> str:
    """Serialize as whitespace-separated word indices."""
    return " ".join(str(int(w)) for w in words)


def transcript_from_text(text: str) -> list[int]:
    return [int(tok) for tok in text.split()]
