"""Reconstruction-error scoring, percentile calibration and the band decision rule."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .imageio import ImageDecodeError, load_frame
from .tensor import ShapeError

NORMAL = "normal"
ANOMALOUS = "anomalous"
TWO_SIDED = "two-sided"
UPPER_ONLY = "upper-only"


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class FrameScore:
    frame_index: int
    rmse: float
    latency_ms: float = 0.0


@dataclass(frozen=True)
class ThresholdBand:
    """Error band; in ``upper-only`` mode the upper bound itself is anomalous."""

    lower: float | None = None
    upper: float | None = None
    mode: str = TWO_SIDED

    def __post_init__(self):
        if self.lower is None and self.upper is None:
            raise CalibrationError("a threshold band needs at least one bound")
        if self.mode not in (TWO_SIDED, UPPER_ONLY):
            raise CalibrationError(f"unknown band mode {self.mode!r}")
        if self.mode == UPPER_ONLY and (self.upper is None or self.lower is not None):
            raise CalibrationError("upper-only bands carry exactly one (upper) bound")
        for name, v in (("lower", self.lower), ("upper", self.upper)):
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise CalibrationError(f"{name} bound must be finite and non-negative, got {v}")
        if self.lower is not None and self.upper is not None and not self.lower < self.upper:
            raise CalibrationError(f"degenerate band: lower {self.lower} >= upper {self.upper}")


@dataclass(frozen=True)
class CalibrationSpec:
    n_low: float = 1.0
    n_high: float = 99.0
    mode: str = TWO_SIDED

    def __post_init__(self):
        for v in (self.n_low, self.n_high):
            if not 0.0 <= v <= 100.0:
                raise CalibrationError(f"percentiles must lie in [0, 100], got {v}")
        if not self.n_low < self.n_high:
            raise CalibrationError(f"n_low ({self.n_low}) must be below n_high ({self.n_high})")
        if self.mode not in (TWO_SIDED, UPPER_ONLY):
            raise CalibrationError(f"unknown calibration mode {self.mode!r}")


@dataclass(frozen=True)
class Verdict:
    frame_index: int
    label: str
    bound: str = "none"

    @property
    def anomalous(self) -> bool:
        return self.label == ANOMALOUS


@dataclass(frozen=True)
class ErrorRecord:
    """A frame that could not be scored; the stream carries on past it."""

    frame_index: int
    source: str
    message: str


def frame_error(reference: np.ndarray, reconstruction: np.ndarray) -> float:
    """RMSE between a frame and its reconstruction, in 8-bit pixel units.

    Both arrays hold values normalized to [0, 1]; the reconstruction is
    clamped to that range first. The mean runs over every pixel and channel.
    """
    ref = np.asarray(reference, dtype=np.float64)
    rec = np.asarray(reconstruction, dtype=np.float64)
    if ref.shape != rec.shape:
        raise ShapeError(f"frame_error shape mismatch: {ref.shape} vs {rec.shape}")
    diff = np.clip(rec, 0.0, 1.0) - ref
    return 255.0 * math.sqrt(float(np.mean(diff * diff)))


def batch_errors(model, frames: np.ndarray) -> np.ndarray:
    """frame_error for every frame of a (B, C, S, S) batch in one forward pass."""
    recon = model.reconstruct(frames)
    return np.array([frame_error(f, r) for f, r in zip(frames, recon)])


def nearest_rank(values: Sequence[float], percentile: float) -> float:
    """Value at rank ceil(p/100 * n), clamped to [1, n], of the ascending sort."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = min(max(math.ceil(percentile / 100.0 * len(v)), 1), len(v))
    return float(v[rank - 1])


def calibrate(normal_errors: Sequence[float], spec: CalibrationSpec | None = None) -> ThresholdBand:
    spec = spec or CalibrationSpec()
    errs = np.asarray(normal_errors, dtype=np.float64)
    if errs.size == 0:
        raise CalibrationError("cannot calibrate on an empty error list")
    if not np.all(np.isfinite(errs)):
        raise CalibrationError("calibration errors must all be finite")
    upper = nearest_rank(errs, spec.n_high)
    if spec.mode == UPPER_ONLY:
        return ThresholdBand(None, upper, UPPER_ONLY)
    lower = nearest_rank(errs, spec.n_low)
    if lower >= upper:
        raise CalibrationError(f"degenerate band: lower {lower} >= upper {upper}")
    return ThresholdBand(lower, upper, TWO_SIDED)


def classify(score: FrameScore | float, band: ThresholdBand, frame_index: int | None = None) -> Verdict:
    if isinstance(score, FrameScore):
        rmse, idx = score.rmse, score.frame_index
    else:
        rmse, idx = float(score), frame_index if frame_index is not None else -1
    if band.mode == UPPER_ONLY:
        if rmse >= band.upper:
            return Verdict(idx, ANOMALOUS, "upper")
        return Verdict(idx, NORMAL)
    if band.lower is not None and rmse < band.lower:
        return Verdict(idx, ANOMALOUS, "lower")
    if band.upper is not None and rmse > band.upper:
        return Verdict(idx, ANOMALOUS, "upper")
    return Verdict(idx, NORMAL)


def score_frame(model, frame: np.ndarray, index: int = 0) -> FrameScore:
    t0 = time.perf_counter()
    recon = model.reconstruct(frame[None])
    err = frame_error(frame, recon[0])
    return FrameScore(index, err, (time.perf_counter() - t0) * 1000.0)


def score_sequence(model, frames: Iterable, band: ThresholdBand, size: int | None = None,
                   trace_path=None) -> Iterator[tuple[FrameScore, Verdict] | ErrorRecord]:
    """Score frames in order, yielding ``(FrameScore, Verdict)`` or an ``ErrorRecord``.

    Items are (C, S, S) arrays or image paths; paths are decoded and resized
    to ``size`` (the model input size by default). When ``trace_path`` is
    given the error trace is written there as CSV, one row per frame.
    """
    size = size or model.config.input_size
    writer = TraceWriter(trace_path) if trace_path is not None else None
    try:
        for i, item in enumerate(frames):
            if isinstance(item, np.ndarray):
                frame = item
            else:
                try:
                    frame = load_frame(item, size)
                except (OSError, ImageDecodeError, ValueError) as exc:
                    rec = ErrorRecord(i, os.fspath(item), str(exc))
                    if writer:
                        writer.error(rec)
                    yield rec
                    continue
            score = score_frame(model, frame, i)
            verdict = classify(score, band)
            if writer:
                writer.row(score, verdict)
            yield score, verdict
    finally:
        if writer:
            writer.close()


TRACE_FIELDS = ("frame_index", "rmse", "verdict", "bound")


class TraceWriter:
    """Error-trace CSV: frame_index,rmse,verdict,bound."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(TRACE_FIELDS)

    def row(self, score: FrameScore, verdict: Verdict) -> None:
        self._w.writerow([score.frame_index, f"{score.rmse:.6f}", verdict.label, verdict.bound])

    def error(self, rec: ErrorRecord) -> None:
        self._w.writerow([rec.frame_index, "", "error", "none"])

    def close(self) -> None:
        self._fh.close()


@dataclass
class TraceRow:
    frame_index: int
    rmse: float | None
    verdict: str
    bound: str


def read_trace(path) -> list[TraceRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [TraceRow(int(r["frame_index"]), float(r["rmse"]) if r["rmse"] else None, r["verdict"], r["bound"])
                for r in csv.DictReader(fh)]


def write_band(band: ThresholdBand, path) -> None:
    lines = [f"mode={band.mode}"]
    if band.lower is not None:
        lines.append(f"lower={band.lower!r}")
    if band.upper is not None:
        lines.append(f"upper={band.upper!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_band(path) -> ThresholdBand:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
    try:
        return ThresholdBand(
            float(values["lower"]) if "lower" in values else None,
            float(values["upper"]) if "upper" in values else None,
            values.get("mode", TWO_SIDED),
        )
    except ValueError as exc:
        raise CalibrationError(f"bad band file {path}: {exc}") from exc
