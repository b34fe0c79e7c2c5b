"""Photocurrent trace data model and file I/O.

A :class:`Trace` is a uniformly sampled photocurrent time sequence in
oscilloscope digitization levels.  A :class:`TraceSet` bundles the three
aligned input streams of a recovery experiment (probe and conjugate before
the scatterer epoch, conjugate during the scatterer epoch) together with the
simulation ground truth of the undisrupted probe.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

_MAGIC = b"QTRC"
_VERSION = 1
_DTYPE_F64 = 0


class TraceFormatError(Exception):
    """Base class for trace file format errors."""


class UnknownMagicError(TraceFormatError):
    """File does not start with the expected magic bytes."""


class MalformedHeaderError(TraceFormatError):
    """Header exists but cannot be parsed."""


class LengthMismatchError(TraceFormatError):
    """Declared sample count does not match the payload."""


@dataclass(frozen=True)
class DigitizationSpec:
    """ADC resolution; level range is [0, max_level)."""

    bits: int = 8

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")

    @property
    def max_level(self) -> int:
        return 2 ** self.bits


@dataclass(frozen=True)
class Trace:
    """Uniformly sampled time sequence in digitization levels.

    ``samples`` are stored as floats even when ``digitized`` is set so that
    filtered or normalized derivatives reuse the same type.  Instances are
    immutable; the sample buffer is marked read-only.
    """

    samples: np.ndarray
    sample_rate_hz: float
    label: str = ""
    digitized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("samples must be a nonempty 1-D sequence")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    @property
    def dt_s(self) -> float:
        return 1.0 / self.sample_rate_hz

    def with_samples(self, samples, label: Optional[str] = None,
                     digitized: bool = False) -> "Trace":
        """New trace with the same rate but different samples."""
        return Trace(samples, self.sample_rate_hz,
                     self.label if label is None else label, digitized)


@dataclass(frozen=True)
class TraceSet:
    """Aligned probe/conjugate streams before and during the scatterer epoch."""

    probe_pre: Trace
    conj_pre: Trace
    conj_post: Trace
    probe_truth: Optional[Trace] = None

    def streams(self):
        """The three model input streams, in block order."""
        return (self.probe_pre, self.conj_pre, self.conj_post)


def digitize(samples: Sequence[float], spec: DigitizationSpec = DigitizationSpec()) -> "np.ndarray":
    """Round to the nearest digitization level (ties away from zero) and
    saturate into [0, max_level - 1], mimicking ADC clipping."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot digitize an empty sequence")
    rounded = np.copysign(np.floor(np.abs(arr) + 0.5), arr)
    return np.clip(rounded, 0.0, float(spec.max_level - 1))


def digitize_trace(trace: Trace, spec: DigitizationSpec = DigitizationSpec()) -> Trace:
    return Trace(digitize(trace.samples, spec), trace.sample_rate_hz, trace.label,
                 digitized=True)


def save_trace(trace: Trace, path, format: str = "binary") -> None:
    if format == "binary":
        _save_binary(trace, path)
    elif format == "csv":
        _save_csv(trace, path)
    else:
        raise ValueError(f"unknown trace format: {format!r}")


def load_trace(path, format: str = "binary") -> Trace:
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown trace format: {format!r}")


def _save_binary(trace: Trace, path) -> None:
    label_bytes = trace.label.encode("utf-8")
    header = struct.pack(
        "<4sHdQBBI", _MAGIC, _VERSION, trace.sample_rate_hz, trace.samples.size,
        _DTYPE_F64, int(trace.digitized), len(label_bytes))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(label_bytes)
        fh.write(trace.samples.astype("<f8").tobytes())


_HEADER_FMT = "<4sHdQBBI"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


def _load_binary(path) -> Trace:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise UnknownMagicError(f"unknown magic: {raw[:4]!r}")
    if len(raw) < _HEADER_SIZE:
        raise MalformedHeaderError("truncated header")
    magic, version, rate, length, dtype_tag, digitized, label_len = struct.unpack(
        _HEADER_FMT, raw[:_HEADER_SIZE])
    if version != _VERSION:
        raise MalformedHeaderError(f"unsupported version {version}")
    if dtype_tag != _DTYPE_F64:
        raise MalformedHeaderError(f"unsupported dtype tag {dtype_tag}")
    off = _HEADER_SIZE
    if len(raw) < off + label_len:
        raise MalformedHeaderError("truncated label")
    label = raw[off:off + label_len].decode("utf-8")
    off += label_len
    payload = raw[off:]
    if len(payload) != 8 * length:
        raise LengthMismatchError(
            f"length mismatch: header declares {length} samples, "
            f"payload holds {len(payload) // 8}")
    samples = np.frombuffer(payload, dtype="<f8")
    return Trace(samples, rate, label, digitized=bool(digitized))


def _save_csv(trace: Trace, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"sample_rate_hz={trace.sample_rate_hz!r},label={trace.label},"
                 f"digitized={int(trace.digitized)}\n")
        fh.write("\n".join(repr(x) for x in trace.samples))
        fh.write("\n")


def _load_csv(path) -> Trace:
    with open(path, "r") as fh:
        header = fh.readline().strip()
        fields = {}
        for item in header.split(","):
            if "=" not in item:
                raise MalformedHeaderError(f"malformed CSV header field: {item!r}")
            key, value = item.split("=", 1)
            fields[key.strip()] = value.strip()
        if "sample_rate_hz" not in fields:
            raise MalformedHeaderError("CSV header missing sample_rate_hz")
        try:
            rate = float(fields["sample_rate_hz"])
        except ValueError as exc:
            raise MalformedHeaderError(f"bad sample_rate_hz: {fields['sample_rate_hz']!r}") from exc
        body = fh.read().split()
    if not body:
        raise LengthMismatchError("length mismatch: CSV holds no samples")
    samples = np.array(body, dtype=np.float64)
    return Trace(samples, rate, fields.get("label", ""),
                 digitized=fields.get("digitized", "0") not in ("0", "", "False"))


def _consensus(values):
    """Most common value; ties broken by first occurrence."""
    best, best_count = values[0], 0
    for v in values:
        count = sum(1 for w in values if w == v)
        if count > best_count:
            best, best_count = v, count
    return best


def validate_traceset(ts: TraceSet) -> list:
    """Return every invariant violation; an empty list means the set is valid.

    Members disagreeing with the consensus length/rate are named, so a single
    odd trace is reported as the violator rather than the rest of the set.
    """
    violations = []
    members = [("probe_pre", ts.probe_pre), ("conj_pre", ts.conj_pre),
               ("conj_post", ts.conj_post)]
    if ts.probe_truth is not None:
        members.append(("probe_truth", ts.probe_truth))
    for name, tr in members:
        if tr.samples.size == 0:
            violations.append(f"empty trace: {name}")
    ref_len = _consensus([tr.samples.size for _, tr in members])
    ref_rate = _consensus([tr.sample_rate_hz for _, tr in members])
    for name, tr in members:
        if tr.samples.size != ref_len:
            violations.append(f"length mismatch: {name}")
        if tr.sample_rate_hz != ref_rate:
            violations.append(f"rate mismatch: {name}")
    return violations
