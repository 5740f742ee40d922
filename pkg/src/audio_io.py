import io
import json
import logging
import os
import shutil
import struct
import subprocess
import tempfile
import warnings
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd
from scipy import signal
from scipy.io import wavfile

from .errors import MalformedContainer, UnsupportedEncoding, ParseError, DuplicateId
from .models import AudioBuffer, Category, RecordingEntry, DatasetManifest, CANONICAL_RATE

# Set up logger
logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['id', 'species_label', 'category', 'file_path', 'duration_s', 'secondary_labels']

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
SUPPORTED_FORMATS = {(WAVE_FORMAT_PCM, 16), (WAVE_FORMAT_PCM, 24), (WAVE_FORMAT_IEEE_FLOAT, 32)}

# Kaiser-windowed sinc with 32 zero crossings either side of the centre tap
RESAMPLE_HALF_TAPS = 32
RESAMPLE_BETA = 8.6


def _read_format(data: bytes):
    """Walk the RIFF chunks and return (format tag, channels, bits) of the fmt chunk"""
    if len(data) < 12 or data[0:4] != b'RIFF' or data[8:12] != b'WAVE':
        raise MalformedContainer("Missing RIFF/WAVE header")
    declared = struct.unpack('<I', data[4:8])[0]
    if declared + 8 > len(data) + 1:
        raise MalformedContainer(f"RIFF size {declared} exceeds the {len(data)} bytes available")
    fmt = None
    has_data = False
    offset = 12
    while offset + 8 <= len(data):
        chunk_id = data[offset:offset + 4]
        size = struct.unpack('<I', data[offset + 4:offset + 8])[0]
        body = offset + 8
        if body + size > len(data):
            raise MalformedContainer(f"Chunk {chunk_id!r} runs past the end of the file")
        if chunk_id == b'fmt ':
            if size < 16:
                raise MalformedContainer(f"fmt chunk too small ({size} bytes)")
            tag, channels, _, _, _, bits = struct.unpack('<HHIIHH', data[body:body + 16])
            if tag == WAVE_FORMAT_EXTENSIBLE:
                if size < 40:
                    raise MalformedContainer("Extensible fmt chunk without sub-format")
                tag = struct.unpack('<H', data[body + 24:body + 26])[0]
            fmt = (tag, channels, bits)
        elif chunk_id == b'data':
            has_data = True
        # Chunks are word aligned
        offset = body + size + (size & 1)
    if fmt is None:
        raise MalformedContainer("No fmt chunk")
    if not has_data:
        raise MalformedContainer("No data chunk")
    return fmt


def decode_wav(data: bytes) -> AudioBuffer:
    """Decode an in-memory RIFF/WAVE file (PCM16, PCM24 or float32; 1-2 channels)"""
    tag, channels, bits = _read_format(data)
    if (tag, bits) not in SUPPORTED_FORMATS:
        raise UnsupportedEncoding(f"WAV format tag {tag:#06x} with {bits} bits is not supported")
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels}-channel WAV files are not supported")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', wavfile.WavFileWarning)
            rate, samples = wavfile.read(io.BytesIO(data))
    except ValueError as e:
        raise MalformedContainer(f"Cannot decode WAV data: {str(e)}") from e

    if samples.dtype == np.int16:
        values = samples.astype(np.float64) / 32768.0
    elif samples.dtype == np.int32:
        # 24-bit samples come back left-justified in int32
        values = samples.astype(np.float64) / 2147483648.0
    else:
        values = samples.astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise MalformedContainer("Float WAV data contains NaN or infinite samples")
    values = np.clip(values, -1.0, 1.0)
    if values.ndim == 2 and values.shape[1] == 1:
        values = values[:, 0]
    return AudioBuffer(values, int(rate))


def encode_wav(buffer: AudioBuffer, bits: Union[int, str] = 16) -> bytes:
    """Encode a buffer as PCM16 (bits=16) or IEEE float32 (bits='32f')"""
    samples = np.clip(buffer.samples, -1.0, 1.0)
    if bits == 16:
        values = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    elif bits in ('32f', 32):
        values = samples.astype(np.float32)
    else:
        raise UnsupportedEncoding(f"Cannot encode WAV with bits={bits!r}")
    out = io.BytesIO()
    wavfile.write(out, buffer.sample_rate, values)
    return out.getvalue()


def to_mono(buffer: AudioBuffer) -> AudioBuffer:
    """Average the channels of a stereo buffer; mono buffers are returned unchanged"""
    if buffer.channels == 1:
        return buffer
    return buffer.with_samples(buffer.samples.mean(axis=1))


def _fix_length(samples: np.ndarray, length: int) -> np.ndarray:
    if len(samples) >= length:
        return samples[:length]
    return np.pad(samples, (0, length - len(samples)))


def _polyphase(samples: np.ndarray, up: int, down: int, length: int) -> np.ndarray:
    """Rational-ratio band-limited interpolation of a 1-D signal"""
    if up == down:
        return _fix_length(samples.copy(), length)
    scale = max(up, down)
    half = RESAMPLE_HALF_TAPS * scale
    taps = signal.firwin(2 * half + 1, 1.0 / scale, window=('kaiser', RESAMPLE_BETA)) * up
    # Leading zeros make the filter delay a whole number of output samples
    lead = (-half) % down
    taps = np.concatenate([np.zeros(lead), taps])
    out = signal.upfirdn(taps, samples, up, down)
    start = (half + lead) // down
    return _fix_length(out[start:], length)


def resample_signal(samples: np.ndarray, ratio: float, length: Optional[int] = None,
                    max_denominator: int = 64) -> np.ndarray:
    """Stretch a 1-D signal by an arbitrary ratio (output rate / input rate).

    The ratio is approximated by a fraction with a small denominator and the
    result trimmed or zero-padded to `length` when given.
    """
    fraction = Fraction(ratio).limit_denominator(max_denominator)
    if length is None:
        length = int(round(len(samples) * ratio))
    return _polyphase(np.asarray(samples, dtype=np.float64), fraction.numerator, fraction.denominator, length)


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Resample to target_rate; output length is round(n * target / source)"""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == buffer.sample_rate:
        return buffer
    fraction = Fraction(int(target_rate), buffer.sample_rate)
    length = int(round(buffer.frames * target_rate / buffer.sample_rate))
    up, down = fraction.numerator, fraction.denominator
    if buffer.channels == 1:
        out = _polyphase(buffer.samples, up, down, length)
    else:
        out = np.stack([_polyphase(buffer.samples[:, c], up, down, length)
                        for c in range(buffer.channels)], axis=1)
    logger.debug(f"Resampled {buffer.frames} frames at {buffer.sample_rate} Hz to {length} at {target_rate} Hz")
    return AudioBuffer(np.clip(out, -1.0, 1.0), int(target_rate))


def _ffmpeg_to_wav(path: Path) -> bytes:
    if shutil.which('ffmpeg') is None:
        raise UnsupportedEncoding(f"Cannot decode {path.name}: ffmpeg is not installed")
    cmd = ['ffmpeg', '-nostdin', '-loglevel', 'error', '-i', str(path),
           '-f', 'wav', '-acodec', 'pcm_s16le', '-']
    logger.info(f"Converting {path.name} with ffmpeg")
    try:
        result = subprocess.run(cmd, capture_output=True, check=True)
    except subprocess.CalledProcessError as e:
        message = e.stderr.decode('utf-8', 'replace').strip()
        raise UnsupportedEncoding(f"ffmpeg could not decode {path.name}: {message}") from e
    return _patch_stream_sizes(result.stdout)


def _patch_stream_sizes(data: bytes) -> bytes:
    """Fill in the chunk sizes ffmpeg leaves unset when writing WAV to a pipe"""
    data = bytearray(data)
    if data[0:4] != b'RIFF':
        return bytes(data)
    struct.pack_into('<I', data, 4, len(data) - 8)
    offset = 12
    while offset + 8 <= len(data):
        chunk_id = bytes(data[offset:offset + 4])
        size = struct.unpack_from('<I', data, offset + 4)[0]
        if chunk_id == b'data':
            struct.pack_into('<I', data, offset + 4, len(data) - offset - 8)
            break
        offset += 8 + size + (size & 1)
    return bytes(data)


def read_audio(path: Union[str, Path], convert_non_wav: bool = False) -> AudioBuffer:
    """Read an audio file; non-WAV files need convert_non_wav and ffmpeg"""
    path = Path(path)
    if path.suffix.lower() == '.wav':
        return decode_wav(path.read_bytes())
    if not convert_non_wav:
        raise UnsupportedEncoding(f"{path.name}: only WAV is decoded in-process (enable convert_non_wav)")
    return decode_wav(_ffmpeg_to_wav(path))


def load_canonical(path: Union[str, Path], convert_non_wav: bool = False,
                   sample_rate: int = CANONICAL_RATE) -> AudioBuffer:
    """Read, downmix and resample a recording to the canonical mono format"""
    return resample(to_mono(read_audio(path, convert_non_wav)), sample_rate)


def _parse_row(row: dict, line: int) -> RecordingEntry:
    recording_id = str(row.get('id', '')).strip()
    label = str(row.get('species_label', '')).strip()
    if not recording_id:
        raise ParseError(f"Row {line}: blank id")
    if not label:
        raise ParseError(f"Row {line} ({recording_id}): blank species_label")
    duration = row.get('duration_s', 0.0)
    try:
        duration = float(duration) if str(duration).strip() else 0.0
    except ValueError as e:
        raise ParseError(f"Row {line} ({recording_id}): duration_s {duration!r} is not a number") from e
    if duration < 0:
        raise ParseError(f"Row {line} ({recording_id}): negative duration_s")
    secondary = row.get('secondary_labels', '')
    if isinstance(secondary, str):
        secondary = [s.strip() for s in secondary.split(';') if s.strip()]
    return RecordingEntry(
        id=recording_id,
        species_label=label,
        category=Category.parse(row.get('category')),
        file_path=str(row.get('file_path', '')).strip(),
        duration_s=duration,
        secondary_labels=tuple(secondary or ()),
    )


def _build_manifest(rows: List[dict], root: Path) -> DatasetManifest:
    entries = [_parse_row(row, i + 1) for i, row in enumerate(rows)]
    seen = set()
    for entry in entries:
        if entry.id in seen:
            raise DuplicateId(f"Duplicate recording id in manifest: {entry.id}")
        seen.add(entry.id)
    return DatasetManifest(entries, root=root)


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Load a CSV or JSON manifest; the class table follows first appearance"""
    path = Path(path)
    logger.info(f"Loading manifest from {path}")
    if path.suffix.lower() == '.json':
        try:
            payload = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ParseError(f"Invalid JSON manifest {path}: {str(e)}") from e
        rows = payload.get('entries') if isinstance(payload, dict) else payload
        if not isinstance(rows, list) or not all(isinstance(r, dict) for r in rows):
            raise ParseError(f"JSON manifest {path} must hold a list of entry objects")
    else:
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        except pd.errors.EmptyDataError as e:
            raise ParseError(f"Manifest {path} has no header") from e
        missing = [c for c in ('id', 'species_label') if c not in frame.columns]
        if missing:
            raise ParseError(f"Manifest {path} is missing columns: {missing}")
        rows = frame.to_dict(orient='records')
    manifest = _build_manifest(rows, path.parent)
    logger.info(f"Loaded {len(manifest)} recordings in {len(manifest.class_table)} classes")
    return manifest


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    """Write the manifest as CSV or JSON (by suffix), replacing the file atomically"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [entry.to_dict() for entry in manifest.entries]
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    os.close(fd)
    try:
        if path.suffix.lower() == '.json':
            Path(tmp).write_text(json.dumps({'entries': rows}, indent=2), encoding='utf-8')
        else:
            frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
            frame['secondary_labels'] = frame['secondary_labels'].map(lambda labels: ';'.join(labels))
            frame.to_csv(tmp, index=False)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    logger.info(f"Saved manifest with {len(manifest)} recordings to {path}")
    return path
