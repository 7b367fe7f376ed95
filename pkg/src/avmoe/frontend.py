"""Waveform ingestion and log-Mel feature extraction.

Frame geometry: 25 ms Hann windows every 10 ms. Features are
magnitude-squared spectra pushed through a triangular Mel filterbank
(HTK scale, 0 Hz to Nyquist) and floored at 1e-10 before the natural log.
Frames are then stacked in groups and linearly projected into the model
width to form speech tokens.

Two audio file formats are read, sniffed by their leading bytes:
  * single-channel 16-bit PCM WAV
  * raw float64: header ``F64LE <count> <rate>\\n`` then ``count``
    little-endian doubles
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, IngestError
from .tensor import Tensor, matmul

MEL_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")


@dataclass
class LogMelSpectrogram:
    frames: np.ndarray  # (num_frames, n_mels)
    n_mels: int
    sample_rate: int
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def window_sizes(sample_rate: int, frame_length_ms: float = 25.0, frame_shift_ms: float = 10.0):
    win = int(round(sample_rate * frame_length_ms / 1000.0))
    hop = int(round(sample_rate * frame_shift_ms / 1000.0))
    return win, hop


def num_frames(num_samples: int, win: int, hop: int) -> int:
    return (num_samples - win) // hop + 1


def frame_signal(
    waveform: Waveform, frame_length_ms: float = 25.0, frame_shift_ms: float = 10.0
) -> np.ndarray:
    """Slice the signal into Hann-windowed frames of shape (num_frames, win)."""
    win, hop = window_sizes(waveform.sample_rate, frame_length_ms, frame_shift_ms)
    n = waveform.samples.shape[0]
    if n < win:
        raise DataError(f"waveform too short: {n} samples, need at least {win}")
    count = num_frames(n, win, hop)
    # Periodic Hann, the STFT convention.
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    frames = np.empty((count, win), dtype=np.float64)
    for t in range(count):
        frames[t] = waveform.samples[t * hop : t * hop + win]
    return frames * window


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters, linear in Mel between a uniform Mel grid.

    Adjacent triangles are complementary, so each FFT bin's total weight is
    at most 1 (edge bins below the first / above the last center get less).
    """
    if n_mels < 1:
        raise ConfigError(f"need at least one Mel bin, got {n_mels}")
    n_bins = n_fft // 2 + 1
    bin_mels = hz_to_mel(np.arange(n_bins) * sample_rate / n_fft)
    grid = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    bank = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = grid[m], grid[m + 1], grid[m + 2]
        rising = (bin_mels - lo) / (center - lo)
        falling = (hi - bin_mels) / (hi - center)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    grid = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(grid[1:-1])


def log_mel(
    framed: np.ndarray,
    n_mels: int = 80,
    sample_rate: int = 16000,
    frame_shift_ms: float = 10.0,
    frame_length_ms: float = 25.0,
) -> LogMelSpectrogram:
    """Windowed frames -> power spectrum -> Mel energies -> floored natural log."""
    win = framed.shape[1]
    n_fft = 1 << (win - 1).bit_length()
    spectrum = np.fft.rfft(framed, n=n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    bank = mel_filterbank(n_mels, n_fft, sample_rate)
    energies = power @ bank.T
    frames = np.log(np.maximum(energies, MEL_FLOOR))
    return LogMelSpectrogram(
        frames=frames,
        n_mels=n_mels,
        sample_rate=sample_rate,
        frame_shift_ms=frame_shift_ms,
        frame_length_ms=frame_length_ms,
    )


def log_mel_from_waveform(waveform: Waveform, n_mels: int = 80) -> LogMelSpectrogram:
    return log_mel(frame_signal(waveform), n_mels=n_mels, sample_rate=waveform.sample_rate)


def stack_frames(mel: LogMelSpectrogram, stack_factor: int, proj: Tensor) -> Tensor:
    """Group ``stack_factor`` consecutive frames and project to model width.

    The last group is zero-padded. Output has ceil(num_frames / stack_factor)
    rows; gradients flow into ``proj`` only (features are constants).
    """
    if stack_factor < 1:
        raise ConfigError(f"stack factor must be >= 1, got {stack_factor}")
    expected_in = stack_factor * mel.n_mels
    if proj.shape[0] != expected_in:
        raise DimensionError(
            f"stack projection expects {expected_in} input columns "
            f"({stack_factor} x {mel.n_mels}), got {proj.shape}"
        )
    count = mel.num_frames
    groups = -(-count // stack_factor)
    padded = np.zeros((groups * stack_factor, mel.n_mels), dtype=np.float64)
    padded[:count] = mel.frames
    stacked = Tensor(padded.reshape(groups, expected_in))
    return matmul(stacked, proj)


# -- audio file IO -----------------------------------------------------------


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
                raise IngestError(
                    f"{path}: expected mono 16-bit PCM, got "
                    f"{wf.getnchannels()} channel(s) at {wf.getsampwidth()} byte(s)"
                )
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise IngestError(f"{path}: not a readable WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path, waveform: Waveform) -> None:
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(waveform.sample_rate)
        wf.writeframes(pcm.tobytes())


def read_f64(path) -> Waveform:
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise IngestError(f"{path}: missing header line (byte offset 0)")
    header = blob[:newline].decode("ascii", errors="replace").split()
    if len(header) != 3 or header[0] != "F64LE":
        raise IngestError(f"{path}: bad header {header!r} (byte offset 0)")
    try:
        count, rate = int(header[1]), int(header[2])
    except ValueError as exc:
        raise IngestError(f"{path}: non-integer header fields (byte offset 0)") from exc
    payload = blob[newline + 1 :]
    if len(payload) != 8 * count:
        raise IngestError(
            f"{path}: expected {count} samples ({8 * count} bytes), got {len(payload)} bytes"
        )
    samples = np.frombuffer(payload, dtype="<f8")
    return Waveform(samples=samples.copy(), sample_rate=rate)


def write_f64(path, waveform: Waveform) -> None:
    header = f"F64LE {waveform.samples.shape[0]} {waveform.sample_rate}\n".encode("ascii")
    Path(path).write_bytes(header + waveform.samples.astype("<f8").tobytes())


def read_waveform(path) -> Waveform:
    """Read WAV or raw-float audio, sniffing the format from leading bytes."""
    with open(path, "rb") as fh:
        head = fh.read(6)
    if head.startswith(b"RIFF"):
        return read_wav(path)
    if head.startswith(b"F64LE "):
        return read_f64(path)
    raise IngestError(f"{path}: unknown audio container (byte offset 0)")
