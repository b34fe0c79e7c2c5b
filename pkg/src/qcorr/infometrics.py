"""Mutual information between twin-beam intensity fluctuations.

MI is computed from a 2-D histogram of the two traces, each axis binned
independently over its own data range, with the plug-in (raw) estimator

    I = sum P(p, c) * log2( P(p, c) / (P(p) P(c)) )

in bits.  A time-shift scan slides the conjugate against the probe in
single-sample steps and reports the MI peak height and delay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trace import Trace


@dataclass(frozen=True)
class JointHistogram:
    counts: np.ndarray            # (n_p, n_c) integer counts
    p_edges: np.ndarray
    c_edges: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MICurve:
    """MI versus time shift; positive shift = conjugate delayed vs probe."""

    shifts_s: np.ndarray
    mi_bits: np.ndarray

    def __post_init__(self):
        shifts = np.asarray(self.shifts_s, dtype=np.float64)
        mi = np.asarray(self.mi_bits, dtype=np.float64)
        if shifts.size != mi.size:
            raise ValueError("shifts and mi must have equal length")
        if shifts.size >= 2 and not np.all(np.diff(shifts) > 0):
            raise ValueError("shifts must be strictly increasing")
        object.__setattr__(self, "shifts_s", shifts)
        object.__setattr__(self, "mi_bits", mi)


@dataclass(frozen=True)
class MIPeak:
    height_bits: float
    delay_s: float


def _values(x) -> np.ndarray:
    return x.samples if isinstance(x, Trace) else np.asarray(x, dtype=np.float64)


def joint_histogram(p, c, n_p: int = 100, n_c: int = 100) -> JointHistogram:
    """2-D histogram with each axis binned over [min, max] of its own trace.

    Maximum values land in the top bin; a constant axis has zero range and is
    rejected as degenerate.
    """
    pv, cv = _values(p), _values(c)
    if pv.size != cv.size:
        raise ValueError("traces must be aligned (equal length)")
    if n_p < 2 or n_c < 2:
        raise ValueError("need at least 2 bins per axis")
    if pv.min() == pv.max() or cv.min() == cv.max():
        raise ValueError("degenerate axis: trace has zero range")
    counts, p_edges, c_edges = np.histogram2d(
        pv, cv, bins=(n_p, n_c),
        range=((pv.min(), pv.max()), (cv.min(), cv.max())))
    return JointHistogram(counts.astype(np.int64), p_edges, c_edges)


def mutual_information(h: JointHistogram) -> float:
    """Plug-in MI of the histogram, in bits; zero-count cells contribute 0."""
    total = h.total
    if total <= 0:
        raise ValueError("histogram is empty")
    joint = h.counts / total
    p_marg = joint.sum(axis=1)
    c_marg = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(p_marg, c_marg)
    return float(np.sum(joint[nz] * np.log2(joint[nz] / outer[nz])))


def mi_timeshift_scan(p: Trace, c: Trace, max_shift_samples: int,
                      n_p: int = 100, n_c: int = 100) -> MICurve:
    """MI for every integer shift in [-max, +max], overlap-truncated.

    Positive shifts pair p[t] with c[t + k], i.e. the conjugate delayed
    relative to the probe; no wraparound is used.
    """
    pv, cv = p.samples, c.samples
    n = pv.size
    if cv.size != n:
        raise ValueError("traces must be aligned (equal length)")
    if not 0 <= max_shift_samples < n // 2:
        raise ValueError("max_shift_samples must be < length/2")
    shifts = np.arange(-max_shift_samples, max_shift_samples + 1)
    mi = np.empty(shifts.size)
    for idx, k in enumerate(shifts):
        if k >= 0:
            a, b = pv[:n - k], cv[k:]
        else:
            a, b = pv[-k:], cv[:n + k]
        mi[idx] = mutual_information(joint_histogram(a, b, n_p, n_c))
    return MICurve(shifts / p.sample_rate_hz, mi)


def peak_metrics(m: MICurve) -> MIPeak:
    """Peak height and its (signed) delay; ties resolve to the smallest |shift|."""
    if m.mi_bits.size == 0:
        raise ValueError("empty MI curve")
    best = np.flatnonzero(m.mi_bits == m.mi_bits.max())
    delays = m.shifts_s[best]
    order = np.lexsort((delays, np.abs(delays)))
    return MIPeak(float(m.mi_bits.max()), float(delays[order[0]]))


def mi_recovery_fraction(recovered: MIPeak, original: MIPeak) -> float:
    """Recovered MI peak height as a percentage of the original peak height."""
    if not original.height_bits > 0:
        raise ValueError("original MI peak height must be > 0")
    return 100.0 * recovered.height_bits / original.height_bits


def save_mi_curve_csv(curve: MICurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("shift_ns,mi_bits\n")
        for s, v in zip(curve.shifts_s, curve.mi_bits):
            fh.write(f"{s * 1e9!r},{v!r}\n")
