"""Deterministic synthetic endoscopy-like scenes with labeled anomalies.

A scene is a stationary, quasi-periodic process: tissue-coloured background
with drifting shading and fine ridge texture, a few metallic tools sweeping
in from the border, and a drifting vignette. Every scene parameter is a sum
of slow sinusoids of frame time, so frame ``t`` is a pure function of
``(spec, t)``; neighbouring frames differ only slightly and frames far apart
sample new configurations from the same distribution.
"""

from __future__ import annotations

import csv
import enum
import functools
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .imageio import write_ppm
from .tensor import RngState

TWO_PI = 2.0 * np.pi
TEST_GAP = 256
_SURROUND = 0.02
_RIM = 0.08
_HAZE = np.array([0.97, 0.96, 0.96])
_HAZE_SPREAD = 0.3
NORMAL = "normal"


class AnomalyKind(str, enum.Enum):
    BLEED = "bleed"
    SMOKE = "smoke"
    OCCLUSION = "occlusion"
    BLUR = "blur"
    OUT_OF_VIEW = "out_of_view"

    @property
    def code(self) -> int:
        return list(AnomalyKind).index(self) + 1


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: int = 128
    tool_count: int = 2
    drift: float = 1.0
    illumination: float = 0.35
    exposure: float = 0.15
    texture: float = 0.06
    glint_count: int = 8
    fat_count: int = 3
    glare_max: float = 0.0
    aperture: float = 0.49
    min_period: float = 60.0
    max_period: float = 120.0
    grain: float = 0.05

    def delta_cap(self) -> float:
        """Upper bound on the mean absolute 8-bit difference between consecutive frames.

        Scene motion contributes at most 6 levels per unit drift; independent
        grain adds E|n1 - n2| = 2 * grain / sqrt(pi) in 8-bit units.
        """
        return 6.0 * max(self.drift, 1e-9) + 255.0 * 2.0 * self.grain / np.sqrt(np.pi)


@dataclass
class LabeledFrame:
    frame_index: int
    image: np.ndarray
    label: str = NORMAL

    @property
    def is_normal(self) -> bool:
        return self.label == NORMAL


@dataclass
class _Wave:
    # value(t) = sum_i amp_i * sin(2 pi t / period_i + phase_i)
    amps: np.ndarray
    periods: np.ndarray
    phases: np.ndarray

    def __call__(self, t: float) -> float:
        return float(np.sum(self.amps * np.sin(TWO_PI * t / self.periods + self.phases)))


def _wave(rng: RngState, spec: SceneSpec, amp: float, terms: int = 2) -> _Wave:
    periods = rng.uniform(spec.min_period, spec.max_period, terms) / max(spec.drift, 1e-9)
    amps = amp * rng.uniform(0.5, 1.0, terms) / terms
    return _Wave(amps, periods, rng.uniform(0, TWO_PI, terms))


@dataclass
class _Scene:
    base: np.ndarray
    blobs: list
    fat: list
    ridges: np.ndarray
    ridge_shift: tuple
    tools: list
    light: tuple
    gain: _Wave
    glints: list
    glare: _Wave


@functools.lru_cache(maxsize=16)
def _scene(spec: SceneSpec) -> _Scene:
    rng = RngState(spec.seed).child(0)
    base = np.array([0.80, 0.38, 0.36]) + rng.uniform(-0.03, 0.03, 3)
    blobs = []
    for _ in range(5):
        blobs.append(dict(
            center=rng.uniform(0.15, 0.85, 2),
            dx=_wave(rng, spec, 0.18), dy=_wave(rng, spec, 0.18),
            sigma=rng.uniform(0.12, 0.28),
            tint=np.array([1.0, 0.8, 0.8]) * rng.uniform(-0.22, 0.14),
        ))
    # pale fat and fascia patches
    fat = []
    for _ in range(spec.fat_count):
        fat.append(dict(
            center=rng.uniform(0.1, 0.9, 2),
            dx=_wave(rng, spec, 0.15), dy=_wave(rng, spec, 0.15),
            sigma=rng.uniform(0.07, 0.14),
            colour=np.array([0.95, 0.88, 0.72]) + rng.uniform(-0.04, 0.05, 3),
        ))
    # fine ridge texture: random plane waves, 5-16 cycles across the frame
    n_ridges = 14
    freq = rng.uniform(5.0, 16.0, n_ridges)
    ang = rng.uniform(0, np.pi, n_ridges)
    ridges = np.stack([freq * np.cos(ang), freq * np.sin(ang), rng.uniform(0, TWO_PI, n_ridges)], axis=1)
    ridge_shift = (_wave(rng, spec, 0.12), _wave(rng, spec, 0.12))
    tools = []
    for _ in range(spec.tool_count):
        edge_angle = rng.uniform(0, TWO_PI)
        tools.append(dict(
            entry=0.5 + 0.62 * np.array([np.cos(edge_angle), np.sin(edge_angle)]),
            heading=edge_angle + np.pi + rng.uniform(-0.35, 0.35),
            swing=_wave(rng, spec, 0.5),
            reach=_wave(rng, spec, 0.18),
            base_reach=rng.uniform(0.45, 0.65),
            width=rng.uniform(0.035, 0.05),
            grey=rng.uniform(0.55, 0.75),
        ))
    light = (_wave(rng, spec, 0.12), _wave(rng, spec, 0.12))
    gain = _wave(rng, spec, spec.exposure)
    glare = _wave(rng, spec, 0.6 * spec.glare_max)
    # specular glints on wet tissue, riding on the ridge drift
    glints = []
    for _ in range(spec.glint_count):
        glints.append(dict(
            center=rng.uniform(0.1, 0.9, 2),
            sigma=rng.uniform(0.015, 0.05),
            aspect=rng.uniform(1.0, 2.5),
            angle=rng.uniform(0, np.pi),
            level=_wave(rng, spec, 0.3),
        ))
    return _Scene(base, blobs, fat, ridges, ridge_shift, tools, light, gain, glints, glare)


@functools.lru_cache(maxsize=8)
def aperture_mask(size: int, radius: float) -> np.ndarray:
    """Soft-edged disc of the optics' field of view; 1 inside, 0 in the dark surround.

    ``radius`` is a fraction of the frame side; 0 disables the mask.
    """
    if radius <= 0:
        return np.ones((size, size))
    x, y = _grid(size)
    r = np.hypot(x - 0.5, y - 0.5)
    # vignetting: a smoothstep falloff over the outer rim rather than a hard edge
    t = np.clip((radius - r) / _RIM, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@functools.lru_cache(maxsize=8)
def _grid(size: int):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")


def _segment_distance(x, y, p0, p1):
    d = p1 - p0
    t = np.clip(((x - p0[0]) * d[0] + (y - p0[1]) * d[1]) / max(float(d @ d), 1e-12), 0.0, 1.0)
    return np.hypot(x - (p0[0] + t * d[0]), y - (p0[1] + t * d[1]))


def render_frame(spec: SceneSpec, t: int) -> np.ndarray:
    """Render frame ``t`` as an (H, W, 3) uint8 array."""
    sc = _scene(spec)
    x, y = _grid(spec.size)
    img = np.broadcast_to(sc.base, x.shape + (3,)).copy()

    for b in sc.blobs:
        cx = b["center"][0] + b["dx"](t)
        cy = b["center"][1] + b["dy"](t)
        g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * b["sigma"] ** 2))
        img += g[..., None] * b["tint"]

    for f in sc.fat:
        r2 = (x - f["center"][0] - f["dx"](t)) ** 2 + (y - f["center"][1] - f["dy"](t)) ** 2
        a = 0.9 * np.clip(2.0 * np.exp(-r2 / (2 * f["sigma"] ** 2)) - 0.5, 0.0, 1.0)
        img = img * (1.0 - a[..., None]) + f["colour"] * a[..., None]

    sx, sy = sc.ridge_shift[0](t), sc.ridge_shift[1](t)
    phase = (sc.ridges[:, 0, None, None] * (x - sx) + sc.ridges[:, 1, None, None] * (y - sy)) * TWO_PI
    tex = np.cos(phase + sc.ridges[:, 2, None, None]).sum(axis=0) / np.sqrt(len(sc.ridges))
    img *= 1.0 + spec.texture * tex[..., None] * np.array([0.6, 1.0, 1.0])

    for gl in sc.glints:
        u = x - (gl["center"][0] + sx)
        v = y - (gl["center"][1] + sy)
        ca, sa = np.cos(gl["angle"]), np.sin(gl["angle"])
        r2 = ((u * ca + v * sa) / gl["aspect"]) ** 2 + (v * ca - u * sa) ** 2
        a = np.clip(0.75 + gl["level"](t), 0.0, 1.0) * np.exp(-r2 / (2 * gl["sigma"] ** 2))
        img = img * (1.0 - a[..., None]) + 0.98 * a[..., None]

    px = 1.5 / spec.size
    for tool in sc.tools:
        heading = tool["heading"] + tool["swing"](t)
        reach = tool["base_reach"] + tool["reach"](t)
        p0 = tool["entry"]
        p1 = p0 + reach * np.array([np.cos(heading), np.sin(heading)])
        w = tool["width"]
        d = _segment_distance(x, y, p0, p1)
        alpha = np.clip((w - d) / px, 0.0, 1.0)
        shade = tool["grey"] * (0.7 + 0.3 * np.clip(1.0 - (d / w) ** 2, 0.0, 1.0))
        # metallic streak along the shaft
        shade = shade + (0.97 - shade) * 0.8 * np.exp(-((d - 0.35 * w) / (0.2 * w)) ** 2)
        jaw = np.hypot(x - p1[0], y - p1[1])
        jaw_alpha = np.clip((1.4 * w - jaw) / px, 0.0, 1.0)
        shade = shade * (1.0 - 0.6 * jaw_alpha)
        alpha = np.maximum(alpha, jaw_alpha)
        img = img * (1.0 - alpha[..., None]) + (shade[..., None] * np.array([1.0, 1.0, 1.02])) * alpha[..., None]

    lx, ly = 0.5 + sc.light[0](t), 0.5 + sc.light[1](t)
    r2 = (x - lx) ** 2 + (y - ly) ** 2
    img *= ((1.0 - spec.illumination * r2 / 0.5) * (1.0 + sc.gain(t)))[..., None]
    # veiling glare: a faint white veil whose strength drifts over time
    veil = float(np.clip(0.5 * spec.glare_max + sc.glare(t), 0.0, spec.glare_max))
    img = img * (1.0 - veil) + 0.97 * veil
    m = aperture_mask(spec.size, spec.aperture)[..., None]
    img = img * m + _SURROUND * (1.0 - m)
    if spec.grain > 0:
        # sensor noise, independent per frame
        img = img + spec.grain * RngState(spec.seed).child(1, t).normal(size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_normal(spec: SceneSpec, count: int, start: int = 0) -> list[LabeledFrame]:
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    return [LabeledFrame(start + i, render_frame(spec, start + i)) for i in range(count)]


# ---------------------------------------------------------------------------
# anomaly injectors; each takes and returns float images in [0, 1]


def _smooth_noise(rng: RngState, size: int, sigma_frac: float) -> np.ndarray:
    n = gaussian_filter(rng.normal(size=(size, size)), sigma=max(sigma_frac * size, 0.5), mode="wrap")
    n -= n.min()
    return n / max(n.max(), 1e-12)


def _bleed(img, intensity, rng, size, mask):
    x, y = _grid(size)
    cx, cy = rng.uniform(0.3, 0.7, 2)
    radius = 0.14 + 0.24 * intensity
    harmonics = rng.uniform(-0.18, 0.18, (3, 2))
    ang = np.arctan2(y - cy, x - cx)
    wobble = 1.0 + sum(a * np.cos((k + 2) * ang) + b * np.sin((k + 2) * ang) for k, (a, b) in enumerate(harmonics))
    r = np.hypot(x - cx, y - cy) / (radius * wobble)
    alpha = np.clip((1.0 - r) * size * radius / 2.0, 0.0, 1.0) * 0.96
    depth = np.clip(1.0 - r, 0.0, 1.0)
    blood = np.stack([0.50 - 0.22 * depth, 0.03 + 0.0 * depth, 0.04 + 0.0 * depth], axis=-1)
    return img * (1.0 - alpha[..., None]) + blood * alpha[..., None]


def _soften(img, sigma, mask):
    # normalized convolution over the lit field, so the dark surround does not bleed in
    w = mask[..., None]
    num = gaussian_filter(img * w, sigma=(sigma, sigma, 0), mode="reflect")
    den = gaussian_filter(w, sigma=(sigma, sigma, 0), mode="reflect")
    return num / np.maximum(den, 1e-6)


def _smoke(img, intensity, rng, size, mask):
    field = _smooth_noise(rng, size, 0.12)
    x, y = _grid(size)
    # scattering in the haze softens detail beneath it
    soft = _soften(img, (size / 128.0) * (1.0 + 2.5 * intensity), mask)
    # lit by the scope's own light, the haze is densest on the optical axis
    falloff = np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / (2 * _HAZE_SPREAD ** 2))
    alpha = (0.03 + 0.12 * intensity) * (0.75 + 0.25 * field) * falloff
    return soft * (1.0 - alpha[..., None]) + _HAZE * alpha[..., None]


def _occlusion(img, intensity, rng, size, mask):
    area = 0.40 + 0.25 * intensity
    wf = rng.uniform(np.sqrt(area), 1.0)
    pw = int(np.ceil(wf * size))
    ph = int(np.ceil(area * size * size / pw))
    ph = min(ph, size)
    x0 = int(rng.integers(0, size - pw + 1))
    y0 = int(rng.integers(0, size - ph + 1))
    out = img.copy()
    tex = _smooth_noise(rng, size, 0.03)[:ph, :pw]
    patch = (0.06 + 0.10 * tex)[..., None] * np.array([1.0, 0.95, 0.9])
    out[y0 : y0 + ph, x0 : x0 + pw] = patch
    return out


def _blur(img, intensity, rng, size, mask):
    return _soften(img, (size / 128.0) * (1.0 + 2.5 * intensity), mask)


def _out_of_view(img, intensity, rng, size, mask):
    x, y = _grid(size)
    folds = _smooth_noise(rng, size, 0.15)
    drape = np.array([0.52, 0.70, 0.76]) * (0.95 + 0.08 * folds - 0.1 * ((x - 0.5) ** 2 + (y - 0.5) ** 2))[..., None]
    alpha = 0.55 + 0.45 * intensity
    return img * (1.0 - alpha) + drape * alpha


_INJECTORS = {
    AnomalyKind.BLEED: _bleed,
    AnomalyKind.SMOKE: _smoke,
    AnomalyKind.OCCLUSION: _occlusion,
    AnomalyKind.BLUR: _blur,
    AnomalyKind.OUT_OF_VIEW: _out_of_view,
}


def inject_anomaly(frame: LabeledFrame, kind, intensity: float, rng: RngState,
                   aperture: float = SceneSpec.aperture) -> LabeledFrame:
    """Apply one anomaly to a normal frame; placement and noise come from ``rng``.

    Anomalies happen in front of the lens, so the dark surround outside the
    ``aperture`` disc is left untouched.
    """
    kind = AnomalyKind(kind)
    if not frame.is_normal:
        raise ValueError(f"frame {frame.frame_index} is already labeled {frame.label!r}")
    if not 0.0 < intensity <= 1.0:
        raise ValueError(f"intensity must lie in (0, 1], got {intensity}")
    img = frame.image.astype(np.float64) / 255.0
    size = img.shape[0]
    mask = aperture_mask(size, aperture)
    out = _INJECTORS[kind](img, float(intensity), rng, size, mask)
    out = img + mask[..., None] * (out - img)
    out = np.round(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)
    return LabeledFrame(frame.frame_index, out, kind.value)


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class AnomalySegment:
    kind: AnomalyKind
    start: int
    length: int
    intensity: float = 1.0

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class ManifestRow:
    frame_index: int
    filename: str
    label: str


def parse_plan(text: str) -> list[AnomalySegment]:
    """Parse ``kind:start:length[:intensity]`` items separated by commas."""
    plan = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (3, 4):
            raise PlanError(f"bad plan item {item!r}; expected kind:start:length[:intensity]")
        try:
            kind = AnomalyKind(parts[0])
        except ValueError:
            raise PlanError(f"unknown anomaly kind {parts[0]!r}") from None
        try:
            seg = AnomalySegment(kind, int(parts[1]), int(parts[2]),
                                 float(parts[3]) if len(parts) == 4 else 1.0)
        except ValueError as exc:
            raise PlanError(f"bad number in plan item {item!r}") from exc
        plan.append(seg)
    return plan


def validate_plan(plan: Sequence[AnomalySegment], frame_count: int) -> list[AnomalySegment]:
    segs = sorted(plan, key=lambda s: s.start)
    for s in segs:
        if s.start < 0 or s.length < 1:
            raise PlanError(f"segment {s.kind.value}@{s.start} needs start >= 0 and length >= 1")
        if s.end > frame_count:
            raise PlanError(f"segment {s.kind.value} [{s.start}, {s.end}) exceeds {frame_count} test frames")
        if not 0.0 < s.intensity <= 1.0:
            raise PlanError(f"segment {s.kind.value}@{s.start} intensity {s.intensity} outside (0, 1]")
    for a, b in zip(segs, segs[1:]):
        if b.start < a.end:
            raise PlanError(f"segments overlap: {a.kind.value} [{a.start}, {a.end}) and "
                            f"{b.kind.value} [{b.start}, {b.end})")
    return segs


def labeled_test_frames(spec: SceneSpec, plan: Sequence[AnomalySegment], test_count: int,
                        first_frame: int) -> list[LabeledFrame]:
    """Test sequence with the plan applied; frame indices are test-local."""
    segs = validate_plan(plan, test_count)
    frames = generate_normal(spec, test_count, first_frame)
    root = RngState(spec.seed)
    for seg in segs:
        rng_key = (2, seg.kind.code, seg.start)
        for i in range(seg.start, seg.end):
            # bleeding spreads over its segment; other kinds hold their strength
            progress = (i - seg.start + 1) / seg.length
            level = seg.intensity * (0.7 + 0.3 * progress) if seg.kind is AnomalyKind.BLEED else seg.intensity
            frames[i] = inject_anomaly(frames[i], seg.kind, level, root.child(*rng_key), spec.aperture)
    return [LabeledFrame(i, f.image, f.label) for i, f in enumerate(frames)]


def build_corpus(spec: SceneSpec, normal_count: int, anomaly_plan: Sequence[AnomalySegment],
                 output_dir, test_count: int | None = None, calibration_count: int = 0) -> list[ManifestRow]:
    """Write ``train/``, ``test/`` and ``manifest.csv`` (plus ``calib/``) under ``output_dir``.

    Training frames are scene frames ``[0, normal_count)``. An optional
    all-normal ``calib/`` partition of ``calibration_count`` frames follows
    after a ``TEST_GAP`` frame gap, and the test sequence after another gap,
    so no two partitions share a frame. The manifest labels the test partition.
    """
    plan = list(anomaly_plan)
    if normal_count < 0 or calibration_count < 0:
        raise PlanError("frame counts must be non-negative")
    max_end = max((s.end for s in plan), default=0)
    if test_count is None:
        test_count = max(max_end, normal_count // 4, 1)
    validate_plan(plan, test_count)
    out = Path(output_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    for f in generate_normal(spec, normal_count):
        write_ppm(out / "train" / f"{f.frame_index:06d}.ppm", f.image)
    test_start = normal_count + TEST_GAP
    if calibration_count:
        (out / "calib").mkdir(exist_ok=True)
        for f in generate_normal(spec, calibration_count, test_start):
            write_ppm(out / "calib" / f"{f.frame_index - test_start:06d}.ppm", f.image)
        test_start += calibration_count + TEST_GAP
    rows = []
    for f in labeled_test_frames(spec, plan, test_count, test_start):
        name = f"test/{f.frame_index:06d}.ppm"
        write_ppm(out / name, f.image)
        rows.append(ManifestRow(f.frame_index, name, f.label))
    write_manifest(rows, out / "manifest.csv")
    return rows


def write_manifest(rows: Iterable[ManifestRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "filename", "label"])
        for r in rows:
            w.writerow([r.frame_index, r.filename, r.label])


def read_manifest(path) -> list[ManifestRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [ManifestRow(int(r["frame_index"]), r["filename"], r["label"]) for r in csv.DictReader(fh)]
