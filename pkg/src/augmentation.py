import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import load_canonical, resample_signal
from .config import derive_seed
from .errors import BirdsongError, SilentClip
from .features import high_pass_filter, istft, noise_reduce, stft
from .models import (
    AudioBuffer, AugmentPlan, Category, ClipImage, ClipRecord, DatasetManifest, RecordingEntry,
    SpectrogramParams,
)

logger = logging.getLogger(__name__)

NONSILENT_FRAME = 2048
NONSILENT_HOP = 512
NONSILENT_MIN_S = 0.5
MAX_PITCH_STEPS = 24

Loader = Callable[[RecordingEntry], AudioBuffer]


def split_clips(buffer: AudioBuffer, window_s: float, stride_s: float = 0.0, min_len_s: Optional[float] = None,
                head_limit_s: Optional[float] = None, source_id: str = '', label: str = '',
                category: Category = Category.OTHER) -> List[ClipRecord]:
    """Cut fixed-length windows from the start of a recording.

    Full windows start every stride (one window length when stride_s is 0)
    inside the first head_limit_s seconds. One further window at the next
    stride position is kept, zero-padded, if at least min_len_s of audio
    remains for it.
    """
    sr = buffer.sample_rate
    samples = buffer.samples
    window = int(round(window_s * sr))
    stride = window if stride_s == 0 else int(round(stride_s * sr))
    min_len = window if min_len_s is None else int(round(min_len_s * sr))
    limit = len(samples) if head_limit_s is None else min(len(samples), int(round(head_limit_s * sr)))
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must cover at least one sample (window_s={window_s}, stride_s={stride_s})")

    clips = []
    stride_ms = int(round(stride_s * 1000)) if stride_s > 0 else 0

    def make(start: int, stop: int):
        chunk = samples[start:stop]
        if len(chunk) < window:
            chunk = np.pad(chunk, (0, window - len(chunk)))
        clips.append(ClipRecord(source_id=source_id, start_s=start / sr, end_s=stop / sr, label=label,
                                samples=AudioBuffer(chunk, sr), category=category, stride_ms=stride_ms))

    start = 0
    while start + window <= limit:
        make(start, start + window)
        start += stride
    if start < limit and limit - start >= min_len:
        make(start, limit)
    return clips


def wrap_shift(clip: ClipRecord) -> ClipRecord:
    """Swap the two halves of a clip; the first half gets the extra sample"""
    samples = clip.samples.samples
    if len(samples) < 2:
        raise ValueError("wrap_shift needs at least 2 samples")
    half = math.ceil(len(samples) / 2)
    return clip.with_samples(np.concatenate([samples[half:], samples[:half]]), 'wrap')


def _phase_vocoder(spectrum: np.ndarray, rate: float, hop: int) -> np.ndarray:
    n_bins, n_frames = spectrum.shape
    steps = np.arange(0, n_frames, rate)
    expected = np.linspace(0, np.pi * hop, n_bins)
    phase = np.angle(spectrum[:, 0])
    padded = np.pad(spectrum, [(0, 0), (0, 2)])
    out = np.zeros((n_bins, len(steps)), dtype=np.complex128)
    for t, step in enumerate(steps):
        left = padded[:, int(step)]
        right = padded[:, int(step) + 1]
        alpha = step % 1.0
        magnitude = (1.0 - alpha) * np.abs(left) + alpha * np.abs(right)
        out[:, t] = magnitude * np.exp(1j * phase)
        delta = np.angle(right) - np.angle(left) - expected
        delta -= 2.0 * np.pi * np.round(delta / (2.0 * np.pi))
        phase += expected + delta
    return out


def stretch_samples(samples: np.ndarray, rate: float, params: SpectrogramParams) -> np.ndarray:
    """Phase-vocoder time stretch; output length round(len / rate)"""
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    length = int(round(len(samples) / rate))
    stretched = _phase_vocoder(stft(samples, params), rate, params.hop)
    return istft(stretched, params, length=length)


def time_stretch(clip: ClipRecord, rate: float, params: Optional[SpectrogramParams] = None) -> ClipRecord:
    params = params or SpectrogramParams(sample_rate=clip.samples.sample_rate)
    out = stretch_samples(clip.samples.samples, rate, params)
    return clip.with_samples(out, f"time_stretch={rate:g}")


def pitch_shift(clip: ClipRecord, n_steps: float, params: Optional[SpectrogramParams] = None) -> ClipRecord:
    """Shift pitch by n_steps semitones keeping the duration.

    The clip is stretched by 2**(-n_steps/12) and resampled back to its
    original length, which scales every frequency by 2**(n_steps/12).
    """
    if abs(n_steps) > MAX_PITCH_STEPS:
        raise ValueError(f"n_steps must be within +-{MAX_PITCH_STEPS}, got {n_steps}")
    params = params or SpectrogramParams(sample_rate=clip.samples.sample_rate)
    samples = clip.samples.samples
    rate = 2.0 ** (-float(n_steps) / 12.0)
    stretched = stretch_samples(samples, rate, params)
    shifted = resample_signal(stretched, rate, length=len(samples))
    return clip.with_samples(shifted, f"pitch_shift={n_steps:g}")


def add_gaussian_noise(clip: ClipRecord, snr_db: float, seed: int) -> ClipRecord:
    """Add white noise with variance signal_power / 10**(snr_db/10)"""
    samples = clip.samples.samples
    power = float(np.mean(samples ** 2)) if len(samples) else 0.0
    if power == 0.0:
        raise SilentClip(f"Clip {clip.clip_id} is silent; SNR is undefined")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    noise = np.random.default_rng(seed).normal(0.0, sigma, len(samples))
    return clip.with_samples(samples + noise, f"gaussian={snr_db:g}")


def highpass_clip(clip: ClipRecord, cutoff: float) -> ClipRecord:
    filtered = high_pass_filter(clip.samples, cutoff)
    return clip.with_samples(filtered.samples, f"highpass={cutoff:g}")


def split_nonsilent(clip: ClipRecord, top_db: float = 30.0, min_len_s: float = NONSILENT_MIN_S,
                    frame: int = NONSILENT_FRAME, hop: int = NONSILENT_HOP) -> List[ClipRecord]:
    """Cut a clip into its non-silent runs (frame RMS within top_db of the peak)"""
    samples = clip.samples.samples
    sr = clip.samples.sample_rate
    if len(samples) == 0:
        return []
    padded = np.pad(samples, frame // 2)
    frames = sliding_window_view(padded, frame)[::hop]
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    peak = rms.max()
    if peak <= 0:
        return []
    loud = 20.0 * np.log10(np.maximum(rms, 1e-10) / peak) > -top_db
    edges = np.flatnonzero(np.diff(np.concatenate([[0], loud.astype(np.int8), [0]])))
    tag = f"nonsilent={top_db:g}"
    clips = []
    for first, last in zip(edges[::2], edges[1::2]):
        start = first * hop
        stop = min(last * hop, len(samples))
        if (stop - start) / sr < min_len_s:
            continue
        piece = ClipRecord(
            source_id=clip.source_id,
            start_s=clip.start_s + start / sr,
            end_s=clip.start_s + stop / sr,
            label=clip.label,
            samples=clip.samples.with_samples(samples[start:stop]),
            category=clip.category,
            augmentations=clip.augmentations + (tag,),
            variant=clip.variant,
            stride_ms=clip.stride_ms,
        )
        clips.append(piece)
    return clips


def filter_low_feature(images: Sequence[ClipImage], min_std: float = 0.02) -> List[ClipImage]:
    """Drop near-uniform images"""
    kept = [image for image in images if float(np.std(image.pixels)) >= min_std]
    if len(kept) < len(images):
        logger.info(f"Removed {len(images) - len(kept)} low-feature images (std < {min_std})")
    return kept


def clip_seed(seed: int, clip: ClipRecord) -> int:
    """Noise seed of one clip, independent of processing order"""
    return derive_seed(seed, 'augment', clip.source_id, clip.start_ms, clip.window_ms,
                       clip.stride_ms, clip.variant)


def transform_clip(clip: ClipRecord, plan: AugmentPlan, seed: int,
                   params: Optional[SpectrogramParams] = None) -> List[ClipRecord]:
    """Apply the plan's transforms in the fixed order; silent clips lose the noise step's output"""
    params = params or SpectrogramParams(sample_rate=clip.samples.sample_rate)
    clips = [clip]
    for transform in plan.transforms:
        if transform.name == 'nonsilent':
            clips = [piece for c in clips for piece in split_nonsilent(c, transform.param)]
        elif transform.name == 'highpass':
            clips = [highpass_clip(c, transform.param) for c in clips]
        elif transform.name == 'pitch_shift':
            clips = [pitch_shift(c, transform.param, params) for c in clips]
        elif transform.name == 'wrap':
            clips = [wrap_shift(c) for c in clips]
        elif transform.name == 'gaussian':
            noisy = []
            for c in clips:
                try:
                    noisy.append(add_gaussian_noise(c, transform.param, clip_seed(seed, c)))
                except SilentClip:
                    logger.debug(f"Dropping silent clip {c.clip_id}")
            clips = noisy
    return clips


def plan_recording(buffer: AudioBuffer, entry: RecordingEntry, plan: AugmentPlan, seed: int,
                   params: Optional[SpectrogramParams] = None) -> List[ClipRecord]:
    """All clips one plan produces from one recording"""
    def split(stride: float) -> List[ClipRecord]:
        return split_clips(buffer, plan.window_s, stride, plan.min_len_s, plan.head_limit_s,
                           source_id=entry.id, label=entry.species_label, category=entry.category)

    clips: List[ClipRecord] = []
    if plan.include_origin:
        clips.extend(split(0.0))
        if plan.strides == (0.0,) and not plan.transforms:
            return clips
    for stride in plan.strides:
        for clip in split(stride):
            clips.extend(transform_clip(clip, plan, seed, params))
    return clips


@dataclass
class AugmentResult:
    """Clips produced by a plan run, with per-recording failures"""
    clips: List[ClipRecord] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.clips)

    def __len__(self) -> int:
        return len(self.clips)

    def __getitem__(self, index):
        return self.clips[index]


def load_source(manifest: DatasetManifest, entry: RecordingEntry, params: Optional[SpectrogramParams] = None,
                reduce_noise: bool = True, convert_non_wav: bool = False) -> AudioBuffer:
    """Canonical audio of one recording, noise-reduced when long enough"""
    params = params or SpectrogramParams()
    buffer = load_canonical(manifest.resolve(entry), convert_non_wav, params.sample_rate)
    if reduce_noise and buffer.frames >= params.n_fft:
        buffer = noise_reduce(buffer, params)
    return buffer


def apply_plans(manifest: DatasetManifest, plans: Sequence[AugmentPlan], seed: int,
                params: Optional[SpectrogramParams] = None, jobs: int = 1,
                loader: Optional[Loader] = None) -> AugmentResult:
    """Run several plans over every recording; clips are concatenated plan by plan per recording"""
    params = params or SpectrogramParams()
    if loader is None:
        def loader(entry: RecordingEntry) -> AudioBuffer:
            return load_source(manifest, entry, params)

    def process(entry: RecordingEntry):
        try:
            buffer = loader(entry)
            clips = [clip for plan in plans for clip in plan_recording(buffer, entry, plan, seed, params)]
            logger.debug(f"{entry.id}: {len(clips)} clips")
            return clips, None
        except (BirdsongError, ValueError, OSError) as e:
            logger.error(f"Failed to process recording {entry.id}: {str(e)}")
            return [], str(e)

    result = AugmentResult()
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for entry, (clips, error) in zip(manifest.entries, pool.map(process, manifest.entries)):
            result.clips.extend(clips)
            if error is not None:
                result.failures[entry.id] = error
    logger.info(f"Generated {len(result.clips)} clips from {len(manifest)} recordings "
                f"({len(result.failures)} failures)")
    return result


def apply_plan(manifest: DatasetManifest, plan: AugmentPlan, seed: int,
               params: Optional[SpectrogramParams] = None, jobs: int = 1,
               loader: Optional[Loader] = None) -> AugmentResult:
    return apply_plans(manifest, [plan], seed, params, jobs, loader)
