"""STFT analysis/synthesis and WAV I/O.

Spectra are stored as complex arrays of shape ``(n_frames, n_bins, n_channels)``
(frame index ``l``, bin index ``f``, stacked microphone index). Channels are
ordered node by node, so the slice belonging to node ``j`` is given by
:func:`node_slices`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.io import wavfile


class Window(str, enum.Enum):
    HANN = "hann"
    RECT = "rect"


@dataclass(frozen=True)
class AnalysisConfig:
    sample_rate_hz: int = 8000
    frame_length: int = 512
    hop_length: int = 256
    window: Window = Window.HANN

    def __post_init__(self):
        object.__setattr__(self, "window", Window(self.window))
        if self.sample_rate_hz <= 0 or self.frame_length <= 0 or self.hop_length <= 0:
            raise ValueError("sample rate, frame length and hop must be positive")
        if self.hop_length > self.frame_length:
            raise ValueError("hop_length must not exceed frame_length")
        if self.frame_length & (self.frame_length - 1):
            raise ValueError("frame_length must be a power of two")
        env = _ola_envelope(self.analysis_window(), self.hop_length)
        if np.ptp(env) > 1e-10 * env.mean():
            raise ValueError(
                f"{self.window.value} window with hop {self.hop_length} "
                "does not satisfy the constant overlap-add condition"
            )

    @property
    def n_bins(self) -> int:
        return self.frame_length // 2 + 1

    @property
    def bin_width_hz(self) -> float:
        return self.sample_rate_hz / self.frame_length

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.bin_width_hz

    def analysis_window(self) -> np.ndarray:
        n = self.frame_length
        if self.window is Window.RECT:
            return np.ones(n)
        # periodic Hann, COLA at hop = n/2, n/4, ...
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)

    def cola_gain(self) -> float:
        return float(_ola_envelope(self.analysis_window(), self.hop_length).mean())

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_length:
            return 0
        return (n_samples - self.frame_length) // self.hop_length + 1


def _ola_envelope(win: np.ndarray, hop: int) -> np.ndarray:
    # steady-state overlap-add sum over one hop period
    env = np.zeros(hop)
    for k in range(0, len(win), hop):
        seg = win[k:k + hop]
        env[: len(seg)] += seg
    return env


@dataclass
class SpectralFrame:
    """Observations of all microphones in one STFT frame.

    ``bins`` has shape ``(n_bins, M)``; ``node_sizes`` gives the partition of
    the ``M`` channels into nodes.
    """

    frame_index: int
    bins: np.ndarray
    node_sizes: tuple[int, ...]

    def __post_init__(self):
        if self.bins.shape[-1] != sum(self.node_sizes):
            raise ValueError(
                f"frame has {self.bins.shape[-1]} channels, node layout needs {sum(self.node_sizes)}"
            )

    def node(self, j: int) -> np.ndarray:
        return self.bins[:, node_slices(self.node_sizes)[j]]


def node_slices(node_sizes: Sequence[int]) -> list[slice]:
    edges = np.concatenate([[0], np.cumsum(node_sizes)])
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def _as_channels(signals) -> np.ndarray:
    if isinstance(signals, np.ndarray):
        x = signals
    else:
        chans = [np.asarray(s, dtype=float) for s in signals]
        if len({len(c) for c in chans}) > 1:
            raise ValueError("ragged input: channels have different lengths")
        x = np.stack(chans, axis=-1) if chans else np.zeros((0, 0))
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("ragged input: expected (n_samples, n_channels)")
    return np.asarray(x, dtype=float)


def analyze(signals, cfg: AnalysisConfig) -> np.ndarray:
    """STFT of a ``(n_samples, n_channels)`` array (or list of equal-length channels).

    No padding is applied: frame ``l`` covers samples
    ``[l*hop, l*hop + frame_length)``. Returns ``(n_frames, n_bins, n_channels)``.
    """
    x = _as_channels(signals)
    n_frames = cfg.n_frames(x.shape[0])
    if n_frames == 0:
        return np.zeros((0, cfg.n_bins, x.shape[1]), dtype=complex)
    idx = np.arange(n_frames)[:, None] * cfg.hop_length + np.arange(cfg.frame_length)
    frames = x[idx] * cfg.analysis_window()[None, :, None]
    return np.fft.rfft(frames, axis=1)


def synthesize(spectra, cfg: AnalysisConfig, length: int | None = None) -> np.ndarray:
    """Overlap-add inverse of :func:`analyze`.

    Accepts ``(n_frames, n_bins, n_channels)`` or ``(n_frames, n_bins)`` arrays,
    or a sequence of :class:`SpectralFrame`. The rectangular synthesis window is
    used and the sum is divided by the analysis window's COLA gain, so the
    interior (away from the first and last ``frame_length`` samples) is
    reconstructed exactly.
    """
    if isinstance(spectra, (list, tuple)):
        if not spectra:
            return np.zeros((length or 0, 0))
        shapes = {f.bins.shape for f in spectra}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent frame shapes {sorted(shapes)}")
        spectra = np.stack([f.bins for f in spectra])
    X = np.asarray(spectra)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[..., None]
    if X.ndim != 3:
        raise ValueError("expected (n_frames, n_bins, n_channels)")
    if X.shape[0] and X.shape[1] != cfg.n_bins:
        raise ValueError(f"bin count {X.shape[1]} does not match config ({cfg.n_bins})")
    n_frames, _, n_ch = X.shape
    total = (n_frames - 1) * cfg.hop_length + cfg.frame_length if n_frames else 0
    out_len = total if length is None else length
    y = np.zeros((max(out_len, total), n_ch))
    if n_frames:
        frames = np.fft.irfft(X, n=cfg.frame_length, axis=1)
        idx = np.arange(n_frames)[:, None] * cfg.hop_length + np.arange(cfg.frame_length)
        np.add.at(y, idx, frames)
        y /= cfg.cola_gain()
    y = y[:out_len]
    return y[:, 0] if squeeze else y


def to_frames(spectra: np.ndarray, node_sizes: Sequence[int]) -> list[SpectralFrame]:
    return [SpectralFrame(l, spectra[l], tuple(node_sizes)) for l in range(spectra.shape[0])]


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file as float samples in [-1, 1], shape ``(n, channels)``."""
    fs, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(float) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(float) - 128.0) / 128.0
    else:
        x = data.astype(float)
    if x.ndim == 1:
        x = x[:, None]
    return x, int(fs)


def write_wav(path, signals, sample_rate_hz: int = 8000, pcm16: bool = True) -> None:
    x = _as_channels(signals)
    if pcm16:
        data = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    else:
        data = x.astype("<f4")
    wavfile.write(path, sample_rate_hz, data[:, 0] if data.shape[1] == 1 else data)
