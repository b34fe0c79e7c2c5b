"""Band-pass filtering, Welch noise spectra and squeezing metrics.

Squeezing is quantified as noise power of the intensity difference relative
to the shot-noise-limited (SQL) reference pair, in dB, averaged over the
analysis band (1.5-3.5 MHz by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve, firwin, welch

from .trace import Trace


@dataclass(frozen=True)
class BandSpec:
    """Analysis band in Hz."""

    f_lo_hz: float = 1.5e6
    f_hi_hz: float = 3.5e6

    def __post_init__(self):
        if not 0 < self.f_lo_hz < self.f_hi_hz:
            raise ValueError("band requires 0 < f_lo < f_hi")


@dataclass(frozen=True)
class WelchParams:
    """Averaged-periodogram settings."""

    segment_length: int = 4096
    overlap_fraction: float = 0.5
    window_kind: str = "hann"

    def __post_init__(self):
        if self.segment_length < 4 or self.segment_length & (self.segment_length - 1):
            raise ValueError("segment_length must be a power of two >= 4")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must be in [0, 1)")
        if self.window_kind not in ("hann", "rectangular"):
            raise ValueError(f"unknown window kind {self.window_kind!r}")

    @property
    def scipy_window(self) -> str:
        return "hann" if self.window_kind == "hann" else "boxcar"


@dataclass(frozen=True)
class Spectrum:
    """One-sided spectrum; ``kind`` is 'psd' (linear density) or 'db_rel_sql'."""

    freqs_hz: np.ndarray
    power: np.ndarray
    kind: str = "psd"

    def __post_init__(self):
        freqs = np.asarray(self.freqs_hz, dtype=np.float64)
        power = np.asarray(self.power, dtype=np.float64)
        if freqs.size != power.size:
            raise ValueError("freqs and power must have equal length")
        if freqs.size >= 2 and not np.all(np.diff(freqs) > 0):
            raise ValueError("freqs must be strictly increasing")
        object.__setattr__(self, "freqs_hz", freqs)
        object.__setattr__(self, "power", power)

    def band_mask(self, band: BandSpec) -> np.ndarray:
        return (self.freqs_hz >= band.f_lo_hz) & (self.freqs_hz <= band.f_hi_hz)


def save_spectrum_csv(spectrum: Spectrum, path) -> None:
    with open(path, "w") as fh:
        fh.write("freq_hz,value\n")
        for f, v in zip(spectrum.freqs_hz, spectrum.power):
            fh.write(f"{f!r},{v!r}\n")


_kernel_cache: dict = {}


def _bandpass_kernel(fs: float, f_lo: float, f_hi: float) -> np.ndarray:
    """Windowed-sinc FIR band-pass kernel (Hamming window), exact DC null.

    Cutoffs sit halfway through the transition bands so that the passband
    [f_lo, f_hi] stays flat and the stopband edges at 0.5*f_lo and 2*f_hi get
    the full window attenuation.  Sized so the Hamming transition width fits
    the narrower (lower) transition.
    """
    key = (fs, f_lo, f_hi)
    kernel = _kernel_cache.get(key)
    if kernel is not None:
        return kernel
    nyq = 0.5 * fs
    c_lo = 0.75 * f_lo
    c_hi = min(1.5 * f_hi, 0.5 * (f_hi + nyq))
    half_transition = min(0.25 * f_lo, c_hi - f_hi)
    taps = int(np.ceil(1.65 * fs / half_transition)) | 1  # odd, type-I linear phase
    kernel = firwin(taps, [c_lo, c_hi], fs=fs, pass_zero=False, window="hamming")
    kernel = kernel - kernel.sum() / kernel.size
    _kernel_cache[key] = kernel
    return kernel


def bandpass_filter(t: Trace, band: BandSpec = BandSpec()) -> Trace:
    """Zero-phase band-pass: the windowed-sinc kernel is applied forward and
    backward so no group delay biases downstream delay measurements.

    Edge transients are handled by reflect-padding before the two passes.
    """
    nyquist = t.sample_rate_hz / 2
    if not band.f_hi_hz < nyquist:
        raise ValueError(f"band [{band.f_lo_hz}, {band.f_hi_hz}] exceeds Nyquist {nyquist}")
    kernel = _bandpass_kernel(t.sample_rate_hz, band.f_lo_hz, band.f_hi_hz)
    pad = kernel.size
    if t.samples.size <= pad:
        raise ValueError(
            f"trace too short to filter: {t.samples.size} samples <= {pad} taps")
    x = np.concatenate([t.samples[pad:0:-1], t.samples, t.samples[-2:-pad - 2:-1]])
    y = fftconvolve(x, kernel, mode="same")
    y = fftconvolve(y, kernel, mode="same")
    return Trace(y[pad:pad + t.samples.size], t.sample_rate_hz,
                 t.label + "_bp" if t.label else "bp")


def estimate_psd(t: Trace, w: WelchParams = WelchParams()) -> Spectrum:
    """Mean-removed Welch periodogram, density scaling (units^2/Hz)."""
    if w.segment_length > t.samples.size:
        raise ValueError(
            f"segment_length {w.segment_length} exceeds trace length {t.samples.size}")
    freqs, psd = welch(
        t.samples, fs=t.sample_rate_hz, window=w.scipy_window,
        nperseg=w.segment_length, noverlap=int(w.segment_length * w.overlap_fraction),
        detrend="constant", scaling="density", return_onesided=True)
    return Spectrum(freqs, psd, kind="psd")


def intensity_difference_spectrum(a: Trace, b: Trace, sql_pair,
                                  w: WelchParams = WelchParams()) -> Spectrum:
    """Noise power of (a - b) in dB relative to the SQL pair difference.

    The SQL traces may have a different length; the frequency grids match as
    long as the sample rates do.
    """
    sql_a, sql_b = sql_pair
    if a.samples.size != b.samples.size:
        raise ValueError("misaligned traces: a and b differ in length")
    if sql_a.samples.size != sql_b.samples.size:
        raise ValueError("misaligned traces: SQL pair differs in length")
    rates = {a.sample_rate_hz, b.sample_rate_hz, sql_a.sample_rate_hz, sql_b.sample_rate_hz}
    if len(rates) != 1:
        raise ValueError("misaligned traces: sample rates differ")
    diff = Trace(a.samples - b.samples, a.sample_rate_hz, "diff")
    sql_diff = Trace(sql_a.samples - sql_b.samples, a.sample_rate_hz, "sql_diff")
    num = estimate_psd(diff, w)
    den = estimate_psd(sql_diff, w)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_db = 10.0 * np.log10(num.power / den.power)
    return Spectrum(num.freqs_hz, ratio_db, kind="db_rel_sql")


def band_average_squeezing(s: Spectrum, band: BandSpec = BandSpec()) -> float:
    """Arithmetic mean of the dB values over bins inside the band."""
    if s.kind != "db_rel_sql":
        raise ValueError("spectrum must be in dB relative to the SQL")
    mask = s.band_mask(band)
    if not mask.any():
        raise ValueError(f"no spectrum bins inside band [{band.f_lo_hz}, {band.f_hi_hz}]")
    return float(np.mean(s.power[mask]))


def squeezing_recovery_fraction(recovered_db: float, original_db: float):
    """Recovery percentage as a ratio of dB squeezing levels.

    Returns ``(percent, out_of_range)``.  When the recovered level lies
    between the original level and 0 dB the ratio is naturally within
    [0, 100]; values outside that range are returned unclamped with the flag
    set.
    """
    if not original_db < 0:
        raise ValueError(f"original squeezing must be below 0 dB, got {original_db}")
    percent = 100.0 * recovered_db / original_db
    out_of_range = not (original_db <= recovered_db <= 0.0)
    if not out_of_range:
        percent = min(max(percent, 0.0), 100.0)
    return percent, out_of_range
