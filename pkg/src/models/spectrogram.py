from dataclasses import dataclass, asdict
from typing import Dict, Any, Optional

import numpy as np

CANONICAL_RATE = 22050


@dataclass(frozen=True)
class SpectrogramParams:
    """STFT and mel analysis settings.

    Only fmin=1500 Hz and n_mels=30 come from the field work; the rest are the
    usual toolkit defaults at the canonical 22050 Hz rate. fmax=None means
    the Nyquist frequency.
    """
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 30
    fmin: float = 1500.0
    fmax: Optional[float] = None
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        nyquist = self.sample_rate / 2
        fmax = nyquist if self.fmax is None else float(self.fmax)
        object.__setattr__(self, 'fmax', fmax)
        object.__setattr__(self, 'fmin', float(self.fmin))
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in (0, n_fft], got {self.hop}")
        if self.n_mels < 1:
            raise ValueError(f"n_mels must be >= 1, got {self.n_mels}")
        if not 0 <= self.fmin < fmax <= nyquist:
            raise ValueError(f"need 0 <= fmin < fmax <= {nyquist}, got fmin={self.fmin}, fmax={fmax}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Mel power matrix [n_mels x n_frames]"""
    power: np.ndarray
    params: SpectrogramParams

    def __post_init__(self):
        power = np.asarray(self.power, dtype=np.float64)
        if power.ndim != 2:
            raise ValueError(f"power must be 2-D, got shape {power.shape}")
        if not np.all(np.isfinite(power)) or np.any(power < 0):
            raise ValueError("mel power entries must be finite and nonnegative")
        object.__setattr__(self, 'power', power)

    @property
    def shape(self):
        return self.power.shape

    def __repr__(self) -> str:
        return f"MelSpectrogram(shape={self.power.shape}, fmin={self.params.fmin}, n_mels={self.params.n_mels})"
