"""WAV ingestion, log-mel features, synthetic corpora, and positive-pair augmentation.

Feature defaults: 16 kHz audio, 40 mel bins spanning 0-8000 Hz on the HTK
mel scale, 25 ms Hann window, 10 ms hop, 512-point FFT, natural log with a
1e-10 power floor, no centering (frames lie fully inside the signal).
"""
from __future__ import annotations

import hashlib
import json
import logging
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .tensor import RngState

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
MEL_BINS = 40
HOP_MS = 10
WIN_MS = 25
FFT_SIZE = 512
LOG_FLOOR = 1e-10

MODE_TID = "TID"
MODE_TD = "TD"


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """Log-mel feature map, shaped [mel_bins, frames]."""

    data: np.ndarray
    mel_bins: int = MEL_BINS
    hop_ms: int = HOP_MS
    win_ms: int = WIN_MS
    log_scaled: bool = True

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise DataError(f"spectrogram must be 2-D, got shape {self.data.shape}")
        if self.data.shape[0] != self.mel_bins:
            raise DataError(f"row count {self.data.shape[0]} != mel_bins {self.mel_bins}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("spectrogram contains non-finite entries")

    @property
    def frames(self) -> int:
        return self.data.shape[1]


@dataclass
class LabelledCorpus:
    """Spectrograms with integer class labels."""

    items: list[tuple[Spectrogram, int]]
    class_count: int
    mode: str

    def __post_init__(self):
        if self.mode not in (MODE_TID, MODE_TD):
            raise ConfigError(f"mode must be TID or TD, got {self.mode!r}")
        counts = [0] * self.class_count
        for _, label in self.items:
            if not 0 <= label < self.class_count:
                raise DataError(f"label {label} out of range [0, {self.class_count})")
            counts[label] += 1
        if self.items and min(counts) == 0:
            raise DataError(f"every class needs at least one item, got counts {counts}")

    def __len__(self) -> int:
        return len(self.items)


# -- WAV input/output ------------------------------------------------------------


def load_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM mono RIFF/WAVE file, rescale to [-1, 1], resample to 16 kHz."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except (wave.Error, EOFError, FileNotFoundError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if channels != 1:
        raise DataError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got sample width {width}")
    if n == 0:
        raise DataError(f"{path}: empty payload")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if rate != SAMPLE_RATE:
        samples = _resample_linear(samples, rate, SAMPLE_RATE)
    return Waveform(samples, SAMPLE_RATE)


def save_wav(path: str | Path, wav: Waveform) -> None:
    """Write 16-bit PCM mono little-endian WAV."""
    clipped = np.clip(wav.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wav.sample_rate)
        wf.writeframes(pcm.tobytes())


def _resample_linear(samples: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    n_out = int(round(len(samples) * rate_out / rate_in))
    src = np.arange(len(samples)) / rate_in
    dst = np.arange(n_out) / rate_out
    return np.interp(dst, src, samples)


# -- mel spectrogram ----------------------------------------------------------------


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    mel_bins: int = MEL_BINS,
    fft_size: int = FFT_SIZE,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> np.ndarray:
    """Triangular filters on FFT bin frequencies; returns [mel_bins, fft_size//2 + 1]."""
    f_max = sample_rate / 2.0 if f_max is None else f_max
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), mel_bins + 2)
    hz_points = mel_to_hz(mel_points)
    fft_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    bank = np.zeros((mel_bins, len(fft_freqs)))
    for k in range(mel_bins):
        left, center, right = hz_points[k], hz_points[k + 1], hz_points[k + 2]
        up = (fft_freqs - left) / max(center - left, 1e-12)
        down = (right - fft_freqs) / max(right - center, 1e-12)
        bank[k] = np.maximum(0.0, np.minimum(up, down))
    return bank


def mel_center_frequencies(mel_bins: int = MEL_BINS, f_min: float = 0.0, f_max: float = SAMPLE_RATE / 2.0) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), mel_bins + 2)
    return np.asarray(mel_to_hz(mel_points[1:-1]))


def frame_count(n_samples: int, win: int = 400, hop: int = 160) -> int:
    return 1 + (n_samples - win) // hop


def mel_spectrogram(wav: Waveform, mel_bins: int = MEL_BINS) -> Spectrogram:
    """Hann-windowed power STFT mapped through the mel bank, then log with floor."""
    if wav.sample_rate != SAMPLE_RATE:
        raise DataError(f"expected {SAMPLE_RATE} Hz input, got {wav.sample_rate}")
    win = SAMPLE_RATE * WIN_MS // 1000  # 400
    hop = SAMPLE_RATE * HOP_MS // 1000  # 160
    n = len(wav.samples)
    if n < win:
        raise DataError(f"waveform too short: {n} samples < window {win}")
    frames = frame_count(n, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)  # periodic Hann
    segments = wav.samples[idx] * window[None, :]
    spectrum = np.fft.rfft(segments, n=FFT_SIZE, axis=1)
    power = np.abs(spectrum) ** 2  # [frames, fft_bins]
    bank = mel_filterbank(mel_bins)
    mel_power = power @ bank.T  # [frames, mel_bins]
    return Spectrogram(np.log(mel_power.T + LOG_FLOOR), mel_bins=mel_bins)


def mel_power(wav: Waveform, mel_bins: int = MEL_BINS) -> np.ndarray:
    """Pre-log mel power map [mel_bins, frames]; used by scaling sanity checks."""
    spec = mel_spectrogram(wav, mel_bins)
    return np.exp(spec.data) - LOG_FLOOR


# -- synthetic corpus -----------------------------------------------------------------


@dataclass
class CorpusSpec:
    """Recipe for a deterministic synthetic labelled corpus."""

    class_count: int = 4
    items_per_class: int = 50
    duration_s: float = 2.0
    mode: str = MODE_TID
    mel_bins: int = MEL_BINS

    def __post_init__(self):
        if not 2 <= self.class_count <= 10:
            raise ConfigError(f"class_count must be in [2, 10], got {self.class_count}")
        if self.items_per_class < 1:
            raise ConfigError("items_per_class must be >= 1")
        if self.duration_s * SAMPLE_RATE < SAMPLE_RATE * WIN_MS // 1000:
            raise ConfigError(f"duration {self.duration_s}s shorter than one analysis window")
        if self.mode not in (MODE_TID, MODE_TD):
            raise ConfigError(f"mode must be TID or TD, got {self.mode!r}")


def _band_noise(rng: RngState, n: int, lo_hz: float, hi_hz: float) -> np.ndarray:
    """White noise band-passed by zeroing FFT bins outside [lo_hz, hi_hz]."""
    noise = rng.normal((n,))
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    spec[(freqs < lo_hz) | (freqs > hi_hz)] = 0.0
    out = np.fft.irfft(spec, n=n)
    peak = np.max(np.abs(out))
    return out / max(peak, 1e-9)


def _harmonic_stack(rng: RngState, n: int, f0: float, partials: int) -> np.ndarray:
    tt = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for k in range(1, partials + 1):
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        out += np.sin(2.0 * np.pi * f0 * k * tt + phase) / k
    return out / np.max(np.abs(out))


def _tid_item(class_idx: int, rng: RngState, n: int) -> np.ndarray:
    """Stationary textures: class evidence persists at every instant.

    Per-item parameters are drawn from wide within-class ranges, so each class
    is a broad manifold rather than a point prototype; classes stay spectrally
    separable.
    """
    kind = class_idx % 4
    if kind == 0:  # low band noise, variable center and width
        center = float(rng.uniform(300.0, 600.0))
        width = float(rng.uniform(150.0, 450.0))
        sig = _band_noise(rng, n, max(60.0, center - width / 2), center + width / 2)
    elif kind == 1:  # high band noise
        center = float(rng.uniform(2800.0, 3800.0))
        width = float(rng.uniform(400.0, 1000.0))
        sig = _band_noise(rng, n, center - width / 2, center + width / 2)
    elif kind == 2:  # harmonic stack, broad fundamental range
        f0 = float(rng.uniform(180.0, 380.0))
        partials = int(rng.integers(4, 6))
        sig = _harmonic_stack(rng, n, f0, partials)
    else:  # amplitude-modulated mid tone
        tt = np.arange(n) / SAMPLE_RATE
        carrier_hz = float(rng.uniform(950.0, 1550.0))
        am_hz = float(rng.uniform(4.0, 14.0))
        depth = float(rng.uniform(0.2, 0.45))
        carrier = np.sin(2.0 * np.pi * carrier_hz * tt + float(rng.uniform(0.0, 2 * np.pi)))
        sig = carrier * (1.0 - depth + depth * np.sin(2.0 * np.pi * am_hz * tt))
    if class_idx >= 4:  # extra classes shift the band upward per slot
        shift = 1.0 + 0.35 * (class_idx - 3)
        lo = float(rng.uniform(450.0, 600.0))
        sig = _band_noise(rng, n, lo * shift, (lo + 400.0) * shift)
    gain = float(rng.uniform(0.25, 0.7))
    noise_floor = 0.01 * rng.normal((n,))
    return np.clip(gain * sig + noise_floor, -1.0, 1.0)


def _td_item(class_idx: int, rng: RngState, n: int) -> np.ndarray:
    """Sequenced events: class evidence localized in time."""
    tt = np.arange(n) / SAMPLE_RATE
    kind = class_idx % 4
    jitter = 1.0 + float(rng.uniform(-0.08, 0.08))
    sig = np.zeros(n)
    half = n // 2
    if kind == 0:  # rising chirp in the first half
        freq = 300.0 * jitter + 1500.0 * tt[:half] / tt[half - 1]
        sig[:half] = np.sin(2.0 * np.pi * np.cumsum(freq) / SAMPLE_RATE)
    elif kind == 1:  # falling chirp in the second half
        seg = tt[:half]
        freq = 2500.0 * jitter - 1800.0 * seg / seg[-1]
        sig[half : half + len(seg)] = np.sin(2.0 * np.pi * np.cumsum(freq) / SAMPLE_RATE)
    elif kind == 2:  # two short tone bursts
        burst = n // 6
        for start in (n // 8, 5 * n // 8):
            seg = np.sin(2.0 * np.pi * 900.0 * jitter * tt[:burst])
            sig[start : start + burst] += seg * np.hanning(burst)
    else:  # noise burst then steady tone
        burst = n // 4
        sig[:burst] = _band_noise(rng, burst, 1000.0, 3000.0)
        sig[burst:] = 0.6 * np.sin(2.0 * np.pi * 500.0 * jitter * tt[: n - burst])
    if class_idx >= 4:
        extra = np.sin(2.0 * np.pi * (600.0 + 150.0 * class_idx) * tt)
        sig = 0.5 * sig + 0.5 * extra * (tt < tt[n // 3])
    gain = float(rng.uniform(0.35, 0.6))
    return np.clip(gain * sig + 0.01 * rng.normal((n,)), -1.0, 1.0)


def synth_corpus(rng: RngState, spec: CorpusSpec) -> LabelledCorpus:
    """Deterministic labelled corpus of separable synthetic sounds."""
    n = int(round(spec.duration_s * SAMPLE_RATE))
    make = _tid_item if spec.mode == MODE_TID else _td_item
    items: list[tuple[Spectrogram, int]] = []
    for class_idx in range(spec.class_count):
        for item_idx in range(spec.items_per_class):
            item_rng = rng.derive(class_idx, item_idx)
            wav = Waveform(make(class_idx, item_rng, n))
            items.append((mel_spectrogram(wav, spec.mel_bins), class_idx))
    return LabelledCorpus(items, spec.class_count, spec.mode)


# -- positive-pair augmentation -------------------------------------------------------


@dataclass
class AugmentPlan:
    """Concrete draw of one augmentation: shared by array and tensor paths."""

    roll: int = 0
    crop_start: int = 0
    crop_len: int = 0  # 0 means no crop


def sample_augment_plan(frames: int, mode: str, rng: RngState, crop_prob: float = 0.5) -> AugmentPlan:
    """Draw roll/crop offsets: rolling only for TID, random cuts for both."""
    plan = AugmentPlan()
    if frames < 8:
        return plan
    if mode == MODE_TID:
        plan.roll = int(rng.integers(1, frames - 1))
        do_crop = float(rng.uniform(0.0, 1.0)) < crop_prob
    else:
        do_crop = True
    if do_crop:
        lo = (frames + 1) // 2  # ceil(T/2)
        plan.crop_len = int(rng.integers(lo, frames))
        plan.crop_start = int(rng.integers(0, frames - plan.crop_len))
    return plan


def apply_augment_plan(data: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    out = data
    if plan.roll:
        out = np.roll(out, plan.roll, axis=1)
    if plan.crop_len:
        out = out[:, plan.crop_start : plan.crop_start + plan.crop_len]
    return out.copy()


def augment_positive(spec: Spectrogram, mode: str, rng: RngState) -> Spectrogram:
    """Build a positive-pair view: circular time roll (TID only) plus random time cut."""
    if spec.frames < 8:
        log.warning("augment_positive: %d frames < 8, returning input unchanged", spec.frames)
        return Spectrogram(spec.data.copy(), spec.mel_bins, spec.hop_ms, spec.win_ms, spec.log_scaled)
    if mode not in (MODE_TID, MODE_TD):
        raise ConfigError(f"mode must be TID or TD, got {mode!r}")
    plan = sample_augment_plan(spec.frames, mode, rng)
    return Spectrogram(apply_augment_plan(spec.data, plan), spec.mel_bins, spec.hop_ms, spec.win_ms, spec.log_scaled)


# -- spectrogram persistence ----------------------------------------------------------


def save_spectrogram(path: str | Path, spec: Spectrogram) -> None:
    """Write [F, T] float32 little-endian payload plus a JSON sidecar with its hash."""
    path = Path(path)
    payload = spec.data.astype("<f4").tobytes(order="C")
    path.write_bytes(payload)
    meta = {
        "mel_bins": spec.mel_bins,
        "frames": spec.frames,
        "hop_ms": spec.hop_ms,
        "win_ms": spec.win_ms,
        "log_scaled": spec.log_scaled,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_spectrogram(path: str | Path) -> Spectrogram:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise DataError(f"missing sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    payload = path.read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != meta["sha256"]:
        raise DataError(f"payload hash mismatch for {path}")
    expected = meta["mel_bins"] * meta["frames"] * 4
    if len(payload) != expected:
        raise DataError(f"payload size {len(payload)} != expected {expected} for {path}")
    data = np.frombuffer(payload, dtype="<f4").reshape(meta["mel_bins"], meta["frames"])
    return Spectrogram(
        data.copy(), mel_bins=meta["mel_bins"], hop_ms=meta["hop_ms"], win_ms=meta["win_ms"], log_scaled=meta["log_scaled"]
    )


def save_corpus(directory: str | Path, corpus: LabelledCorpus) -> None:
    """Persist a labelled corpus as numbered spectrogram files plus a labels manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = []
    for i, (spec, label) in enumerate(corpus.items):
        name = f"item_{i:05d}.f32"
        save_spectrogram(directory / name, spec)
        labels.append({"file": name, "label": label})
    manifest = {"class_count": corpus.class_count, "mode": corpus.mode, "items": labels}
    (directory / "corpus.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_corpus(directory: str | Path) -> LabelledCorpus:
    directory = Path(directory)
    manifest_path = directory / "corpus.json"
    if not manifest_path.exists():
        raise DataError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    items = [(load_spectrogram(directory / rec["file"]), int(rec["label"])) for rec in manifest["items"]]
    return LabelledCorpus(items, int(manifest["class_count"]), manifest["mode"])


def corpus_arrays(corpus: LabelledCorpus, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Stack a fixed-length corpus into [N, F, T] features and [N] labels."""
    frames = {spec.frames for spec, _ in corpus.items}
    if len(frames) != 1:
        raise ContractError(f"corpus has mixed frame counts {sorted(frames)}; cannot batch")
    feats = np.stack([spec.data for spec, _ in corpus.items]).astype(dtype)
    labels = np.asarray([label for _, label in corpus.items], dtype=np.int64)
    return feats, labels
