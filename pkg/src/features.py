"""
Spectral features for canonical (mono, 22050 Hz) audio.

STFT/ISTFT, mel filterbank, log amplitude, MFCC, zero-crossing rate,
high-pass filtering, spectral-gating noise reduction, 64x64 clip images and
the 16-value numeric feature vector.
"""

import logging
from dataclasses import replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, ndimage, signal

from .errors import EmptySignal, DegenerateBand, TooShort
from .models import (
    AudioBuffer, ClipImage, ClipRecord, FeatureVector, MelSpectrogram, SpectrogramParams, IMAGE_SIZE,
)

logger = logging.getLogger(__name__)

AMIN = 1e-10
TOP_DB = 80.0
# Spectral gate: neighbourhood of the decision statistic (bins, frames)
GATE_SMOOTHING = (5, 3)
GATE_PERCENTILE = 10.0
GATE_MARGIN_DB = 6.0
GATE_ATTENUATION = 0.1

Signal = Union[AudioBuffer, np.ndarray]


def _samples(x: Signal) -> np.ndarray:
    samples = x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError(f"Expected mono samples, got shape {samples.shape}")
    return samples


def _window(n_fft: int) -> np.ndarray:
    return signal.get_window('hann', n_fft, fftbins=True)


def stft(x: Signal, params: SpectrogramParams) -> np.ndarray:
    """Centred Hann STFT, shape [n_fft/2+1, len//hop + 1]"""
    samples = _samples(x)
    if samples.size == 0:
        raise EmptySignal("Cannot take the STFT of an empty signal")
    pad = params.n_fft // 2
    padded = np.pad(samples, pad, mode='reflect')
    frames = sliding_window_view(padded, params.n_fft)[::params.hop]
    return fft.rfft(frames * _window(params.n_fft), axis=1).T


def istft(matrix: np.ndarray, params: SpectrogramParams, length: Optional[int] = None) -> np.ndarray:
    """Inverse of `stft` by weighted overlap-add"""
    n_fft, hop = params.n_fft, params.hop
    window = _window(n_fft)
    frames = fft.irfft(matrix.T, n=n_fft, axis=1) * window
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        start = t * hop
        out[start:start + n_fft] += frames[t]
        norm[start:start + n_fft] += window ** 2
    nonzero = norm > np.finfo(np.float64).tiny
    out[nonzero] /= norm[nonzero]
    out = out[n_fft // 2:]
    if length is None:
        length = total - 2 * (n_fft // 2)
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out[:length]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(params: SpectrogramParams) -> np.ndarray:
    """n_mels + 2 band edges in Hz, evenly spaced on the mel scale"""
    return mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), params.n_mels + 2))


def mel_centers(params: SpectrogramParams) -> np.ndarray:
    return mel_points(params)[1:-1]


def fft_frequencies(params: SpectrogramParams) -> np.ndarray:
    return np.linspace(0.0, params.sample_rate / 2, params.n_bins)


@lru_cache(maxsize=32)
def mel_filterbank(params: SpectrogramParams) -> np.ndarray:
    """Triangular, area-normalised filters [n_mels, n_fft/2+1]; returned read-only"""
    freqs = fft_frequencies(params)
    in_band = np.count_nonzero((freqs >= params.fmin) & (freqs <= params.fmax))
    if in_band < params.n_mels + 2:
        raise DegenerateBand(
            f"Only {in_band} FFT bins between {params.fmin} and {params.fmax} Hz "
            f"for {params.n_mels} mel filters"
        )
    edges = mel_points(params)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= 2.0 / (upper - lower)
    weights.setflags(write=False)
    logger.debug(f"Built mel filterbank {weights.shape} for fmin={params.fmin}, fmax={params.fmax}")
    return weights


def mel_spectrogram(x: Signal, params: SpectrogramParams) -> MelSpectrogram:
    power = np.abs(stft(x, params)) ** 2
    return MelSpectrogram(mel_filterbank(params) @ power, params)


def log_amplitude(power: np.ndarray) -> np.ndarray:
    """dB relative to the largest entry, floored at -80 dB"""
    power = np.asarray(power, dtype=np.float64)
    if power.size == 0:
        return power.copy()
    ref = power.max()
    if ref <= AMIN:
        return np.full(power.shape, -TOP_DB)
    db = 10.0 * np.log10(np.maximum(power, AMIN) / ref)
    return np.maximum(db, -TOP_DB)


def mfcc(x: Signal, n_mfcc: int = 15, params: Optional[SpectrogramParams] = None,
         include_c0: bool = False) -> np.ndarray:
    """Orthonormal DCT-II of the dB mel spectrogram, [n_mfcc, n_frames].

    Coefficient 0 (frame energy) is dropped unless include_c0 is set.
    """
    params = params or SpectrogramParams()
    first = 0 if include_c0 else 1
    if n_mfcc < 1 or n_mfcc + first > params.n_mels:
        raise ValueError(f"n_mfcc={n_mfcc} does not fit in {params.n_mels} mel bands")
    db = log_amplitude(mel_spectrogram(x, params).power)
    return fft.dct(db, type=2, norm='ortho', axis=0)[first:first + n_mfcc]


def zcr(x: Signal, frame: int, hop: int) -> np.ndarray:
    """Per-frame fraction of sign changes; zero counts as positive"""
    if frame < 2:
        raise ValueError(f"frame must be >= 2, got {frame}")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    samples = _samples(x)
    if samples.size == 0:
        return np.zeros(0)
    if samples.size < frame:
        samples = np.pad(samples, (0, frame - samples.size))
    signs = np.where(samples >= 0, 1, -1)
    frames = sliding_window_view(signs, frame)[::hop]
    return np.count_nonzero(frames[:, 1:] != frames[:, :-1], axis=1) / frame


def high_pass_filter(x: AudioBuffer, cutoff: float, order: int = 2) -> AudioBuffer:
    """Zero-phase Butterworth high-pass (filtered forward and backward)"""
    if not 0 < cutoff < x.sample_rate / 2:
        raise ValueError(f"cutoff must be in (0, {x.sample_rate / 2}), got {cutoff}")
    samples = _samples(x)
    if samples.size < 2:
        return x
    sos = signal.butter(order, cutoff, btype='highpass', fs=x.sample_rate, output='sos')
    padlen = min(samples.size - 1, 3 * (2 * sos.shape[0] + 1))
    return x.with_samples(signal.sosfiltfilt(sos, samples, padlen=padlen))


def noise_reduce(x: AudioBuffer, params: Optional[SpectrogramParams] = None,
                 median_cap: bool = False) -> AudioBuffer:
    """Spectral gating.

    The noise floor of each frequency is the 10th percentile over frames of
    the locally smoothed magnitude. Bins less than 6 dB above their floor
    are scaled by 0.1. With `median_cap` the floors are capped at their
    median across frequencies, so a tone sustained through the whole clip
    is not taken for noise.
    """
    params = params or SpectrogramParams(sample_rate=x.sample_rate)
    samples = _samples(x)
    if samples.size < params.n_fft:
        raise TooShort(f"noise_reduce needs at least {params.n_fft} samples, got {samples.size}")
    spectrum = stft(samples, params)
    magnitude = np.abs(spectrum)
    smoothed = ndimage.uniform_filter(magnitude, size=GATE_SMOOTHING, mode='nearest')
    floor = np.percentile(smoothed, GATE_PERCENTILE, axis=1)
    if median_cap:
        floor = np.minimum(floor, np.median(floor))
    threshold = floor[:, None] * 10.0 ** (GATE_MARGIN_DB / 20.0)
    gain = np.where(smoothed < threshold, GATE_ATTENUATION, 1.0)
    logger.debug(f"Noise gate attenuated {np.mean(gain < 1):.1%} of bins")
    return x.with_samples(np.clip(istft(spectrum * gain, params, length=samples.size), -1.0, 1.0))


def render_image(spec: MelSpectrogram, source_clip: Optional[ClipRecord] = None,
                 size: int = IMAGE_SIZE) -> ClipImage:
    """Map [-80, 0] dB onto [0, 1] and resize bilinearly; low frequencies on the bottom row"""
    if spec.power.size == 0:
        raise ValueError("Cannot render an empty spectrogram")
    image = (log_amplitude(spec.power) + TOP_DB) / TOP_DB
    image = image[::-1]
    rows = np.linspace(0.0, image.shape[0] - 1, size)
    cols = np.linspace(0.0, image.shape[1] - 1, size)
    grid = np.meshgrid(rows, cols, indexing='ij')
    pixels = ndimage.map_coordinates(image, grid, order=1, mode='nearest')
    return ClipImage(np.clip(pixels, 0.0, 1.0), source_clip)


def clip_image(clip: ClipRecord, params: SpectrogramParams) -> ClipImage:
    return render_image(mel_spectrogram(clip.samples, params), source_clip=clip)


def feature_vector(x: Signal, params: Optional[SpectrogramParams] = None, n_mfcc: int = 15,
                   include_c0: bool = False, mfcc_fmin: Optional[float] = None, clip_id: str = '') -> FeatureVector:
    """Time-means of 15 MFCCs followed by the mean zero-crossing rate"""
    params = params or SpectrogramParams()
    samples = _samples(x)
    if samples.size < params.n_fft:
        raise TooShort(f"feature_vector needs at least {params.n_fft} samples, got {samples.size}")
    mfcc_params = params if mfcc_fmin is None else replace(params, fmin=mfcc_fmin)
    coefficients = mfcc(samples, n_mfcc, mfcc_params, include_c0)
    rates = zcr(samples, params.n_fft, params.hop)
    return FeatureVector(np.append(coefficients.mean(axis=1), rates.mean()), clip_id)


def write_pgm(image: ClipImage, path: Union[str, Path]) -> Path:
    """8-bit binary PGM (P5)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = image.pixels.shape
    data = np.round(image.pixels * 255).astype(np.uint8)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode('ascii') + data.tobytes())
    return path


def read_pgm(path: Union[str, Path], clip_id: str = '') -> ClipImage:
    raw = Path(path).read_bytes()
    tokens = []
    offset = 0
    while len(tokens) < 4:
        while raw[offset:offset + 1].isspace():
            offset += 1
        if raw[offset:offset + 1] == b'#':
            offset = raw.index(b'\n', offset) + 1
            continue
        end = offset
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[offset:end].decode('ascii'))
        offset = end
    if tokens[0] != 'P5' or tokens[3] != '255':
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    width, height = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[offset + 1:offset + 1 + width * height], dtype=np.uint8)
    if data.size != width * height:
        raise ValueError(f"{path} is truncated")
    return ClipImage(data.reshape(height, width) / 255.0, clip_id=clip_id)
