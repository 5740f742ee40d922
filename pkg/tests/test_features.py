"""
DSP and feature tests: STFT, mel filterbank, MFCC, ZCR, filtering, noise
gating, image rendering and feature vectors.
"""

import numpy as np
import pytest
from scipy import fft

from src.errors import DegenerateBand, EmptySignal, TooShort
from src.features import (
    feature_vector, fft_frequencies, high_pass_filter, hz_to_mel, istft, log_amplitude, mel_centers,
    mel_filterbank, mel_spectrogram, mel_to_hz, mfcc, noise_reduce, read_pgm, render_image, stft, write_pgm, zcr,
)
from src.models import AudioBuffer, ClipImage, FEATURE_LENGTH, IMAGE_SIZE, MelSpectrogram, SpectrogramParams

pytestmark = pytest.mark.unit


def tone_power_fit(samples: np.ndarray, freq: float, sample_rate: int = 22050):
    """Least-squares fit of a tone at a known frequency; returns (tone power, residual power)"""
    t = np.arange(len(samples)) / sample_rate
    basis = np.stack([np.sin(2 * np.pi * freq * t), np.cos(2 * np.pi * freq * t)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, samples, rcond=None)
    fitted = basis @ coef
    return float(np.mean(fitted ** 2)), float(np.mean((samples - fitted) ** 2))


class TestStft:
    """Short-time Fourier transform"""

    def test_shape(self, params):
        x = np.random.default_rng(0).normal(size=22050)
        assert stft(x, params).shape == (1025, 22050 // 512 + 1)

    def test_matches_direct_dft_of_a_padded_frame(self):
        params = SpectrogramParams(n_fft=256, hop=64)
        x = np.random.default_rng(1).normal(size=1000)
        frame = 3
        padded = np.pad(x, 128, mode='reflect')
        n = np.arange(256)
        segment = padded[frame * 64:frame * 64 + 256] * (0.5 - 0.5 * np.cos(2 * np.pi * n / 256))
        k = np.arange(129)[:, None]
        expected = (segment[None, :] * np.exp(-2j * np.pi * k * n[None, :] / 256)).sum(axis=1)
        np.testing.assert_allclose(stft(x, params)[:, frame], expected, atol=1e-9)

    def test_every_column_matches_a_direct_dft(self, params):
        n = np.arange(params.n_fft)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * n / params.n_fft)
        dft = np.exp(-2j * np.pi * np.arange(params.n_bins)[:, None] * n[None, :] / params.n_fft)
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.normal(size=4096)
            padded = np.pad(x, params.n_fft // 2, mode='reflect')
            frames = np.stack([padded[t * params.hop:t * params.hop + params.n_fft]
                               for t in range(len(x) // params.hop + 1)])
            expected = dft @ (frames * window).T
            error = np.abs(stft(x, params) - expected).max() / np.abs(expected).max()
            assert error < 1e-6

    def test_linear_in_amplitude(self, params):
        x = np.random.default_rng(12).normal(size=4096)
        scaled, base = stft(3.7 * x, params), stft(x, params)
        assert np.abs(scaled - 3.7 * base).max() <= 1e-9 * np.abs(scaled).max()

    def test_parseval_per_frame(self, params):
        x = np.random.default_rng(13).normal(size=4096)
        spectrum = stft(x, params)
        padded = np.pad(x, params.n_fft // 2, mode='reflect')
        window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(params.n_fft) / params.n_fft)
        power = np.abs(spectrum) ** 2
        # Half spectrum: every bin except DC and Nyquist stands for two
        full = power[0] + power[-1] + 2.0 * power[1:-1].sum(axis=0)
        for t in range(spectrum.shape[1]):
            frame = padded[t * params.hop:t * params.hop + params.n_fft] * window
            assert np.sum(frame ** 2) == pytest.approx(full[t] / params.n_fft, rel=1e-6)

    def test_all_zero_signal(self, params):
        spectrum = stft(np.zeros(4096), params)
        assert spectrum.shape == (params.n_bins, 4096 // params.hop + 1)
        assert not spectrum.any()

    def test_empty_signal(self, params):
        with pytest.raises(EmptySignal):
            stft(np.zeros(0), params)

    def test_inverse_reconstructs_the_signal(self, params):
        x = np.random.default_rng(2).normal(size=10000)
        np.testing.assert_allclose(istft(stft(x, params), params, length=len(x)), x, atol=1e-8)

    def test_tone_peaks_at_its_bin(self, params, make_tone):
        spectrum = np.abs(stft(make_tone(1000, 1.0), params))
        assert int(np.argmax(spectrum[:, 20])) == 93


class TestMelScale:
    """Mel conversions and the filterbank"""

    def test_mel_conversion_inverts(self):
        hz = np.array([0.0, 700.0, 1500.0, 11025.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(hz)), hz, atol=1e-9)
        assert float(hz_to_mel(700.0)) == pytest.approx(2595.0 * np.log10(2.0))

    def test_filterbank_shape_and_read_only(self, params):
        bank = mel_filterbank(params)
        assert bank.shape == (30, 1025)
        assert not bank.flags.writeable

    def test_no_weight_below_fmin(self, params):
        bank = mel_filterbank(params)
        below = fft_frequencies(params) < params.fmin
        assert np.all(bank[:, below] == 0)

    def test_filters_are_area_normalised(self, params):
        bank = mel_filterbank(params)
        spacing = params.sample_rate / params.n_fft
        np.testing.assert_allclose(bank.sum(axis=1) * spacing, 1.0, rtol=0.05)

    def test_band_is_covered_without_gaps(self, params):
        bank = mel_filterbank(params)
        freqs = fft_frequencies(params)
        interior = (freqs > params.fmin) & (freqs < params.fmax)
        assert np.all(bank[:, interior].sum(axis=0) > 0)
        assert np.all(bank.sum(axis=1) > 0)

    def test_filter_supports_advance_with_frequency(self, params):
        bank = mel_filterbank(params)
        first = np.array([np.flatnonzero(row)[0] for row in bank])
        last = np.array([np.flatnonzero(row)[-1] for row in bank])
        assert np.all(np.diff(first) >= 0)
        assert np.all(np.diff(last) >= 0)
        # Neighbouring filters overlap
        assert np.all(first[1:] <= last[:-1])

    def test_degenerate_band(self):
        with pytest.raises(DegenerateBand):
            mel_filterbank(SpectrogramParams(n_fft=64, hop=16))

    def test_tone_lands_in_the_nearest_filter(self, params, make_tone):
        centers = mel_centers(params)
        index = int(np.argmin(np.abs(centers - 3000.0)))
        spec = mel_spectrogram(make_tone(centers[index], 1.0), params)
        assert int(np.argmax(spec.power[:, 20])) == index

    def test_tone_below_fmin_carries_almost_no_power(self, params, make_tone):
        low = mel_spectrogram(make_tone(800, 1.0), params).power.sum()
        high = mel_spectrogram(make_tone(3000, 1.0), params).power.sum()
        assert low < 0.01 * high


class TestLogAmplitude:
    """dB conversion relative to the maximum"""

    def test_maximum_maps_to_zero_and_floor_is_minus_80(self):
        db = log_amplitude(np.array([[1.0, 0.1], [1e-12, 0.0]]))
        np.testing.assert_allclose(db, [[0.0, -10.0], [-80.0, -80.0]])

    def test_all_zero_input(self):
        np.testing.assert_array_equal(log_amplitude(np.zeros((3, 4))), np.full((3, 4), -80.0))


class TestMfcc:
    """Cepstral coefficients"""

    def dct_matrix(self, n: int) -> np.ndarray:
        k = np.arange(n)[:, None]
        i = np.arange(n)[None, :]
        matrix = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
        matrix[0] /= np.sqrt(2.0)
        return matrix

    def test_matches_orthonormal_dct_of_db_mel(self, params):
        x = np.random.default_rng(3).normal(size=8000)
        db = log_amplitude(mel_spectrogram(x, params).power)
        expected = self.dct_matrix(30) @ db
        np.testing.assert_allclose(mfcc(x, 15, params), expected[1:16], atol=1e-8)
        np.testing.assert_allclose(mfcc(x, 15, params, include_c0=True), expected[0:15], atol=1e-8)

    def test_direct_dct_on_random_signals(self, params):
        matrix = self.dct_matrix(params.n_mels)
        rng = np.random.default_rng(14)
        for _ in range(20):
            x = rng.normal(size=4096)
            expected = (matrix @ log_amplitude(mel_spectrogram(x, params).power))[1:16]
            error = np.abs(mfcc(x, 15, params) - expected).max() / np.abs(expected).max()
            assert error < 1e-6

    def test_inverse_dct_of_all_coefficients_recovers_db_mel(self, params):
        x = np.random.default_rng(15).normal(size=4096)
        coefficients = mfcc(x, params.n_mels, params, include_c0=True)
        db = log_amplitude(mel_spectrogram(x, params).power)
        np.testing.assert_allclose(fft.idct(coefficients, type=2, norm='ortho', axis=0), db, atol=1e-6)

    def test_too_many_coefficients(self, params):
        with pytest.raises(ValueError):
            mfcc(np.ones(4096), 30, params)


class TestZcr:
    """Zero-crossing rate"""

    def test_alternating_frame(self):
        np.testing.assert_allclose(zcr(np.array([1.0, -1.0, 1.0, -1.0]), 4, 4), [0.75])

    def test_constant_signal(self):
        assert np.all(zcr(np.full(100, 0.3), 10, 5) == 0)

    def test_zero_counts_as_positive(self):
        np.testing.assert_allclose(zcr(np.array([0.0, -1.0]), 2, 2), [0.5])
        np.testing.assert_allclose(zcr(np.array([0.0, 1.0]), 2, 2), [0.0])

    def test_frame_must_hold_two_samples(self):
        with pytest.raises(ValueError):
            zcr(np.ones(10), 1, 1)


class TestHighPass:
    """Butterworth high-pass at 1500 Hz"""

    def rms(self, x):
        return float(np.sqrt(np.mean(x ** 2)))

    def test_attenuates_low_tone(self, make_tone):
        x = make_tone(100, 1.0)
        out = high_pass_filter(AudioBuffer(x, 22050), 1500.0)
        assert self.rms(out.samples) < 0.05 * self.rms(x)

    def test_keeps_high_tone(self, make_tone):
        x = make_tone(6000, 1.0)
        out = high_pass_filter(AudioBuffer(x, 22050), 1500.0)
        assert self.rms(out.samples) >= 0.95 * self.rms(x)

    def test_cutoff_must_be_below_nyquist(self):
        with pytest.raises(ValueError):
            high_pass_filter(AudioBuffer(np.zeros(100), 22050), 12000.0)


class TestNoiseReduce:
    """Spectral gating"""

    def test_zero_signal_stays_zero(self):
        out = noise_reduce(AudioBuffer(np.zeros(8000), 22050))
        np.testing.assert_array_equal(out.samples, 0.0)

    def test_improves_snr_of_noisy_tone(self, make_tone):
        tone = make_tone(3000, 2.0, amplitude=0.1)
        noise = np.random.default_rng(4).normal(0.0, 0.1 / np.sqrt(2.0), len(tone))
        noisy = tone + noise
        tone_in, noise_in = tone_power_fit(noisy, 3000)
        reduced = noise_reduce(AudioBuffer(noisy, 22050), median_cap=True)
        tone_out, noise_out = tone_power_fit(reduced.samples, 3000)
        snr_in = 10 * np.log10(tone_in / noise_in)
        snr_out = 10 * np.log10(tone_out / noise_out)
        assert snr_out - snr_in >= 6.0

    def test_clean_tone_is_kept(self, params, make_tone):
        tone = make_tone(3000, 1.0)
        out = noise_reduce(AudioBuffer(tone, 22050), params, median_cap=True)
        peak = int(round(3000 * params.n_fft / params.sample_rate))
        before = np.abs(stft(tone, params))[peak, 5:-5]
        after = np.abs(stft(out.samples, params))[peak, 5:-5]
        np.testing.assert_allclose(after, before, rtol=0.1)

    def test_uncapped_floor_follows_a_sustained_tone(self, params, make_tone):
        tone = make_tone(3000, 1.0)
        out = noise_reduce(AudioBuffer(tone, 22050), params)
        peak = int(round(3000 * params.n_fft / params.sample_rate))
        before = np.abs(stft(tone, params))[peak, 5:-5]
        after = np.abs(stft(out.samples, params))[peak, 5:-5]
        assert after.mean() < 0.5 * before.mean()

    def test_call_between_quiet_gaps_is_kept(self, params, make_tone):
        samples = np.random.default_rng(5).normal(0.0, 0.005, 2 * 22050)
        samples[11025:22050] += make_tone(3000, 0.5, amplitude=0.3)
        out = noise_reduce(AudioBuffer(samples, 22050), params)
        peak = int(round(3000 * params.n_fft / params.sample_rate))
        before = np.abs(stft(samples, params))[peak, 26:39]
        after = np.abs(stft(out.samples, params))[peak, 26:39]
        np.testing.assert_allclose(after, before, rtol=0.1)
        quiet_before = np.abs(stft(samples, params))[:, 60:80]
        quiet_after = np.abs(stft(out.samples, params))[:, 60:80]
        assert quiet_after.sum() < 0.5 * quiet_before.sum()

    def test_too_short(self):
        with pytest.raises(TooShort):
            noise_reduce(AudioBuffer(np.ones(100), 22050))


class TestRenderImage:
    """Spectrogram to 64x64 image"""

    def test_uniform_spectrogram_renders_white(self, params):
        image = render_image(MelSpectrogram(np.full((30, 40), 3.0), params))
        assert image.pixels.shape == (IMAGE_SIZE, IMAGE_SIZE)
        np.testing.assert_allclose(image.pixels, 1.0)

    def test_silent_spectrogram_renders_black(self, params):
        image = render_image(MelSpectrogram(np.zeros((30, 40)), params))
        np.testing.assert_array_equal(image.pixels, 0.0)

    def test_low_frequencies_on_the_bottom_row(self, params):
        power = np.full((30, 40), 1e-12)
        power[0] = 1.0
        pixels = render_image(MelSpectrogram(power, params)).pixels
        np.testing.assert_allclose(pixels[-1], 1.0)
        np.testing.assert_allclose(pixels[0], 0.0)

    def test_raising_an_entry_never_darkens_a_pixel(self, params):
        power = np.random.default_rng(5).uniform(0.0, 1.0, (30, 40))
        power[0, 0] = 2.0
        before = render_image(MelSpectrogram(power, params)).pixels
        power[10, 10] = 1.5
        after = render_image(MelSpectrogram(power, params)).pixels
        assert np.all(after >= before - 1e-12)
        assert np.any(after > before)

    def test_pgm_keeps_pixels_within_quantisation(self, tmp_path):
        pixels = np.random.default_rng(6).uniform(0.0, 1.0, (IMAGE_SIZE, IMAGE_SIZE))
        path = write_pgm(ClipImage(pixels, None, 'rec/0_w5000'), tmp_path / 'img.pgm')
        loaded = read_pgm(path, 'rec/0_w5000')
        assert loaded.clip_id == 'rec/0_w5000'
        np.testing.assert_allclose(loaded.pixels, pixels, atol=0.5 / 255 + 1e-12)


class TestFeatureVector:
    """MFCC means plus mean ZCR"""

    def test_length(self, make_tone):
        vector = feature_vector(make_tone(3000, 1.0), clip_id='rec/0_w1000')
        assert vector.values.shape == (FEATURE_LENGTH,)
        assert vector.clip_id == 'rec/0_w1000'

    def test_one_frame_is_enough(self, params):
        x = np.random.default_rng(7).normal(size=params.n_fft)
        assert np.all(np.isfinite(feature_vector(x, params).values))

    def test_shorter_than_a_frame(self, params):
        with pytest.raises(TooShort):
            feature_vector(np.ones(params.n_fft - 1), params)

    def test_doubling_a_stationary_signal_keeps_the_vector(self, params):
        x = 0.5 * (-1.0) ** np.arange(22050)
        single = feature_vector(x, params).values
        doubled = feature_vector(np.concatenate([x, x]), params).values
        np.testing.assert_allclose(doubled, single, atol=1e-3)

    def test_zcr_ignores_amplitude(self, params):
        x = np.random.default_rng(8).normal(size=6000)
        assert feature_vector(3.0 * x, params).zcr == feature_vector(x, params).zcr
