"""Statistical twin-beam simulator.

Generates correlated Gaussian intensity-fluctuation traces with programmable
intensity-difference squeezing, a shot-noise-limited (SQL) reference pair at
the same optical powers, and a scatterer disruption model (attenuation +
smoothing + electronic noise + delay).

The model is second-order only: each beam is mean + shared band-limited
component + independent white component.  The shared component enters both
beams with equal amplitude (photon pairs produce equal number fluctuations),
so it cancels in the intensity difference; the independent white parts are
scaled so that

    Var(probe - conj) / Var_SQL = 10 ** (-squeezing_db / 10)

holds exactly at the requested means, in and out of the analysis band.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trace import Trace

# Shot-noise conversion: fluctuation variance (levels^2) per mean level.
SHOT_VARIANCE_PER_LEVEL = 1.0

# Shared (pair-correlated) component variance relative to the shot variance at
# the mean beam power.  Sets how strongly super-Poissonian each beam is alone;
# the paper's beams show strong excess noise in the analysis band.
EXCESS_NOISE_FACTOR = 12.0

_TWIN_STREAM = 1
_SQL_STREAM = 2
_SCATTER_STREAM = 3


@dataclass(frozen=True)
class SqueezedPairParams:
    """Twin-beam generation parameters (means in digitization levels)."""

    squeezing_db: float = 7.8
    mean_probe: float = 128.0
    mean_conj: float = 115.0
    correlation_bandwidth_hz: float = 3.5e6
    length: int = 100_000
    sample_rate_hz: float = 2.0e9
    seed: int = 12345

    def __post_init__(self):
        if self.squeezing_db < 0:
            raise ValueError("squeezing_db must be >= 0")
        if self.mean_probe <= 0 or self.mean_conj <= 0:
            raise ValueError("beam means must be > 0")
        if not 0 < self.correlation_bandwidth_hz < self.sample_rate_hz / 2:
            raise ValueError("correlation_bandwidth_hz must lie in (0, Nyquist)")
        if self.length < 2:
            raise ValueError("length must be >= 2")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be > 0")


@dataclass(frozen=True)
class ScattererParams:
    """Disruption model: attenuation, low-pass smoothing, electronic noise, delay."""

    transmission: float = 0.126
    smoothing_tau_s: float = 2.5e-7
    electronic_noise_rms: float = 6.0
    delay_samples: int = 0

    def __post_init__(self):
        if not 0.0 <= self.transmission <= 1.0:
            raise ValueError("transmission must be in [0, 1]")
        if self.smoothing_tau_s < 0:
            raise ValueError("smoothing_tau_s must be >= 0")
        if self.electronic_noise_rms < 0:
            raise ValueError("electronic_noise_rms must be >= 0")
        if self.delay_samples < 0:
            raise ValueError("delay_samples must be >= 0")


# Disruption preset mirroring the experiment: ~12.6% transmission with the
# residual fluctuations smoothed and buried under detector electronic noise.
DEFAULT_SCATTERER = ScattererParams()


def _one_pole_lowpass(x: np.ndarray, cutoff_hz: float, fs: float) -> np.ndarray:
    """Single-pole IIR low-pass, unity DC gain: y[n] = (1-a)*x[n] + a*y[n-1]."""
    from scipy.signal import lfilter
    phi = np.exp(-2.0 * np.pi * cutoff_hz / fs)
    return lfilter([1.0 - phi], [1.0, -phi], x)


def _band_limited_unit_noise(rng: np.random.Generator, n: int,
                             cutoff_hz: float, fs: float) -> np.ndarray:
    """Low-passed white noise rescaled analytically to unit variance."""
    white = rng.standard_normal(n)
    y = _one_pole_lowpass(white, cutoff_hz, fs)
    phi = np.exp(-2.0 * np.pi * cutoff_hz / fs)
    stationary_var = (1.0 - phi) / (1.0 + phi)
    return y / np.sqrt(stationary_var)


def generate_twin_beams(p: SqueezedPairParams):
    """Correlated twin-beam pair; returns (probe, conj) traces.

    Deterministic in ``p.seed``.  The intensity-difference variance relative
    to the SQL reference at the same means equals 10**(-squeezing_db/10).
    """
    rng = np.random.default_rng((p.seed, _TWIN_STREAM))
    shared = _band_limited_unit_noise(rng, p.length, p.correlation_bandwidth_hz,
                                      p.sample_rate_hz)
    mean_bar = 0.5 * (p.mean_probe + p.mean_conj)
    shared_amp = np.sqrt(EXCESS_NOISE_FACTOR * SHOT_VARIANCE_PER_LEVEL * mean_bar)
    ratio = 10.0 ** (-p.squeezing_db / 10.0)
    w_probe = rng.standard_normal(p.length) * np.sqrt(
        ratio * SHOT_VARIANCE_PER_LEVEL * p.mean_probe)
    w_conj = rng.standard_normal(p.length) * np.sqrt(
        ratio * SHOT_VARIANCE_PER_LEVEL * p.mean_conj)
    probe = p.mean_probe + shared_amp * shared + w_probe
    conj = p.mean_conj + shared_amp * shared + w_conj
    return (Trace(probe, p.sample_rate_hz, "probe"),
            Trace(conj, p.sample_rate_hz, "conj"))


def generate_sql_reference(p: SqueezedPairParams):
    """Independent shot-noise-limited pair at the same means.

    Fluctuation variance follows shot-noise scaling (proportional to the
    mean); the two traces are statistically independent white noise.
    """
    rng = np.random.default_rng((p.seed, _SQL_STREAM))
    s_probe = p.mean_probe + rng.standard_normal(p.length) * np.sqrt(
        SHOT_VARIANCE_PER_LEVEL * p.mean_probe)
    s_conj = p.mean_conj + rng.standard_normal(p.length) * np.sqrt(
        SHOT_VARIANCE_PER_LEVEL * p.mean_conj)
    return (Trace(s_probe, p.sample_rate_hz, "sql_probe"),
            Trace(s_conj, p.sample_rate_hz, "sql_conj"))


def apply_scatterer(t: Trace, s: ScattererParams, seed: int) -> Trace:
    """Pass a trace through the scatterer model.

    Mean is attenuated by the transmission; fluctuations are attenuated,
    smoothed by a single-pole low-pass of time constant ``smoothing_tau_s``,
    delayed by ``delay_samples`` and buried under additive white electronic
    noise of the given RMS.
    """
    if (s.transmission == 1.0 and s.smoothing_tau_s == 0.0
            and s.electronic_noise_rms == 0.0 and s.delay_samples == 0):
        return Trace(t.samples, t.sample_rate_hz, t.label + "_scattered")
    mean = float(np.mean(t.samples))
    fluct = s.transmission * (t.samples - mean)
    if s.smoothing_tau_s > 0:
        phi = np.exp(-t.dt_s / s.smoothing_tau_s)
        from scipy.signal import lfilter
        fluct = lfilter([1.0 - phi], [1.0, -phi], fluct)
    if s.delay_samples > 0:
        delayed = np.zeros_like(fluct)
        delayed[s.delay_samples:] = fluct[:fluct.size - s.delay_samples]
        fluct = delayed
    out = s.transmission * mean + fluct
    if s.electronic_noise_rms > 0:
        rng = np.random.default_rng((seed, _SCATTER_STREAM))
        out = out + rng.standard_normal(out.size) * s.electronic_noise_rms
    return Trace(out, t.sample_rate_hz, t.label + "_scattered")
