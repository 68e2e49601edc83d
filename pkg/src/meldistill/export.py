"""Export generated spectrograms as PNG figures and reconstructed WAV audio.

PNG: time on x, mel bin on y (origin at the bottom), viridis colormap,
per-image min/max normalization, optional integer pixel scaling. WAV:
mel power inverted through the filterbank pseudo-inverse, then 64
Griffin-Lim iterations recover a phase; output is peak-normalized to 0.9.
Export is presentation plumbing: nothing here feeds back into training.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.image as mpimg
import numpy as np

from .audio import (
    FFT_SIZE,
    LOG_FLOOR,
    SAMPLE_RATE,
    Spectrogram,
    Waveform,
    load_spectrogram,
    mel_filterbank,
    save_wav,
)
from .errors import DataError
from .inversion import MemoryBank

WIN = SAMPLE_RATE * 25 // 1000  # 400
HOP = SAMPLE_RATE * 10 // 1000  # 160
GRIFFIN_LIM_ITERS = 64


def render_png(data: np.ndarray, path: str | Path, scale: int = 1) -> Path:
    """Write a [F, T] map as a (F*scale) x (T*scale) pixel PNG, low bins at the bottom."""
    if scale < 1:
        raise DataError(f"scale must be a positive integer, got {scale}")
    lo, hi = float(data.min()), float(data.max())
    norm = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    if scale > 1:
        norm = np.kron(norm, np.ones((scale, scale)))
    path = Path(path)
    mpimg.imsave(path, norm, cmap="viridis", origin="lower", vmin=0.0, vmax=1.0)
    return path


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _stft_magnitude_frames(samples: np.ndarray) -> np.ndarray:
    frames = 1 + (len(samples) - WIN) // HOP
    idx = np.arange(WIN)[None, :] + HOP * np.arange(frames)[:, None]
    return np.fft.rfft(samples[idx] * _hann(WIN)[None, :], n=FFT_SIZE, axis=1)


def _istft(spectrum: np.ndarray) -> np.ndarray:
    """Weighted overlap-add inverse of the no-centering STFT."""
    frames = spectrum.shape[0]
    length = WIN + (frames - 1) * HOP
    window = _hann(WIN)
    out = np.zeros(length)
    weight = np.zeros(length)
    segs = np.fft.irfft(spectrum, n=FFT_SIZE, axis=1)[:, :WIN]
    for t in range(frames):
        start = t * HOP
        out[start : start + WIN] += segs[t] * window
        weight[start : start + WIN] += window**2
    return out / np.maximum(weight, 1e-8)


def griffin_lim(magnitude: np.ndarray, iterations: int = GRIFFIN_LIM_ITERS) -> np.ndarray:
    """Recover a waveform whose STFT magnitude approximates the target [T, bins]."""
    spectrum = magnitude.astype(np.complex128)  # zero phase start
    for _ in range(iterations):
        rebuilt = _stft_magnitude_frames(_istft(spectrum))
        if rebuilt.shape[0] < magnitude.shape[0]:
            pad = magnitude.shape[0] - rebuilt.shape[0]
            rebuilt = np.pad(rebuilt, ((0, pad), (0, 0)))
        phase = np.angle(rebuilt[: magnitude.shape[0]])
        spectrum = magnitude * np.exp(1j * phase)
    return _istft(spectrum)


def mel_to_waveform(spec: Spectrogram) -> Waveform:
    """Invert a log-mel map to audio via filterbank pseudo-inverse + Griffin-Lim."""
    mel_power = np.exp(spec.data) - LOG_FLOOR if spec.log_scaled else spec.data
    mel_power = np.maximum(mel_power, 0.0)
    bank = mel_filterbank(spec.mel_bins)
    linear_power = np.maximum(np.linalg.pinv(bank) @ mel_power, 0.0)  # [bins, T]
    magnitude = np.sqrt(linear_power).T  # [T, bins]
    samples = griffin_lim(magnitude)
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = 0.9 * samples / peak
    return Waveform(samples, SAMPLE_RATE)


def export_spectrogram_file(path: str | Path, out_dir: str | Path, fmt: str, scale: int = 1) -> list[Path]:
    """Export one persisted spectrogram (.f32 + sidecar) as PNG or WAV."""
    spec = load_spectrogram(path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(path).stem
    return _export_one(spec, out_dir, stem, fmt, scale)


def export_bank(bank_dir: str | Path, out_dir: str | Path, fmt: str, scale: int = 1) -> list[Path]:
    """Export every item of a persisted memory bank; integrity is hash-checked on load."""
    bank = MemoryBank.load(bank_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for entry in bank.entries:
        for row, (item, target) in enumerate(zip(entry.batch, entry.targets)):
            spec = Spectrogram(item.astype(np.float64), mel_bins=item.shape[0])
            stem = f"epoch{entry.epoch:03d}_item{row:02d}_class{int(target)}"
            written.extend(_export_one(spec, out_dir, stem, fmt, scale))
    index = [str(p.name) for p in written]
    (out_dir / "export_index.json").write_text(json.dumps(index, indent=2) + "\n")
    return written


def _export_one(spec: Spectrogram, out_dir: Path, stem: str, fmt: str, scale: int) -> list[Path]:
    if fmt == "png":
        return [render_png(spec.data, out_dir / f"{stem}.png", scale)]
    if fmt == "wav":
        wav_path = out_dir / f"{stem}.wav"
        save_wav(wav_path, mel_to_waveform(spec))
        return [wav_path]
    raise DataError(f"unknown export format {fmt!r}; use png or wav")
