"""Metrics for edited clips, built on the world's exact ground truth.

The mouth aperture of a rendered (or generated) frame is measured by a
darkness integral: sample the max RGB channel along the rotated mouth axis,
convert to "darkness" relative to the pinned face brightness, and integrate;
the mouth ellipse height falls out in pixels and maps back to an aperture.
Linear in brightness, so sync correlations are invariant to uniform
brightness changes, and accurate to a fraction of a pixel thanks to
anti-aliased rendering and bilinear sampling.

Avatar position is re-detected per frame as the centroid of pixels close to
a face color, which makes trajectory checks independent of the renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .world import (
    FACE_VALUE,
    MOUTH_CENTER_FACTOR,
    MOUTH_MAX_FACTOR,
    MOUTH_MIN_PX,
    SceneSpec,
)

MSE_FLOOR = 1e-12  # psnr reporting floor for identical inputs


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(mse_value: float) -> float:
    """-10 log10(mse) for unit-range images, floored at mse = 1e-12."""
    if mse_value < 0:
        raise ValidationError(f"mse must be >= 0, got {mse_value}")
    return -10.0 * math.log10(max(mse_value, MSE_FLOOR))


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; nan when either side is (near) constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError(f"pearson needs equal-length 1-d arrays, got {x.shape}, {y.shape}")
    if len(x) < 3:
        raise ValidationError(f"pearson needs >= 3 points, got {len(x)}")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom < 1e-12:
        return float("nan")
    return float(xc @ yc / denom)


def detect_centroid(
    frame: np.ndarray, face_color, threshold: float = 0.22, min_pixels: int = 8
) -> Optional[tuple[float, float]]:
    """Centroid (x, y) of pixels within `threshold` RGB distance of face_color."""
    frame = np.asarray(frame, dtype=np.float64)
    color = np.asarray(face_color, dtype=np.float64)[:, None, None]
    dist = np.sqrt(((frame - color) ** 2).sum(axis=0))
    mask = dist < threshold
    count = int(mask.sum())
    if count < min_pixels:
        return None
    ys, xs = np.nonzero(mask)
    return float(xs.mean() + 0.5), float(ys.mean() + 0.5)


def _bilinear_max_channel(frame: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    maxch = np.asarray(frame, dtype=np.float64).max(axis=0)
    coords = np.stack([ys - 0.5, xs - 0.5])  # map pixel units to index space
    return ndimage.map_coordinates(maxch, coords, order=1, mode="nearest")


def extract_aperture(
    frame: np.ndarray,
    pose: np.ndarray,
    face_radius: float,
    step: float = 0.25,
) -> float:
    """Mouth aperture of one frame from the darkness integral along the mouth axis.

    Samples the max channel along the avatar-frame vertical through the mouth
    center, integrates darkness = 1 - value / FACE_VALUE, subtracts the
    closed-mouth line and rescales by the open-close range. Unclipped, so
    noise can push estimates slightly outside [0, 1]; correlation consumers
    do not care.
    """
    r = float(face_radius)
    cx, cy, theta = float(pose[0]), float(pose[1]), float(pose[2])
    mouth_v = MOUTH_CENTER_FACTOR * r
    span = min(MOUTH_MAX_FACTOR * r / 2.0 + 1.5, (r - mouth_v) * 0.95)
    vs = np.arange(mouth_v - span, mouth_v + span + step / 2, step)
    c, s = math.cos(math.radians(theta)), math.sin(math.radians(theta))
    # avatar-frame (0, v) mapped to image coordinates
    xs = cx - s * vs
    ys = cy + c * vs
    vals = _bilinear_max_channel(frame, xs, ys)
    darkness = np.clip(1.0 - vals / FACE_VALUE, 0.0, 1.0)
    integral = float(darkness.sum() * step)
    full_range = MOUTH_MAX_FACTOR * r - MOUTH_MIN_PX
    return (integral - MOUTH_MIN_PX) / full_range


def extract_apertures(
    frames: np.ndarray,
    spec: SceneSpec,
    face_color=None,
    use_detection: bool = True,
) -> np.ndarray:
    """Per-frame apertures; poses come from the spec trajectory, recentered by
    detection when it finds the avatar (rotation always from the spec)."""
    color = face_color if face_color is not None else spec.identity.face_color
    out = np.empty(len(frames))
    for i, frame in enumerate(frames):
        pose = np.array(spec.trajectory[i], dtype=np.float64)
        if use_detection:
            found = detect_centroid(frame, color)
            if found is not None:
                pose[0], pose[1] = found
        out[i] = extract_aperture(frame, pose, spec.identity.face_radius)
    return out


def sync_score(apertures: np.ndarray, aperture_target: np.ndarray) -> float:
    """Pearson correlation between measured and target mouth apertures."""
    return pearson(np.asarray(apertures), np.asarray(aperture_target))


def identity_score(frames: np.ndarray, fg_masks: np.ndarray, face_color) -> float:
    """Mean RGB distance to a face color over foreground pixels (lower = closer)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] != fg_masks.shape[0] or frames.shape[-2:] != fg_masks.shape[-2:]:
        raise ValidationError(f"frames {frames.shape} and masks {fg_masks.shape} disagree")
    color = np.asarray(face_color, dtype=np.float64)[None, :, None, None]
    dist = np.sqrt(((frames - color) ** 2).sum(axis=1))  # [F, H, W]
    total = fg_masks.sum()
    if total == 0:
        raise ValidationError("foreground masks are empty")
    return float(dist[fg_masks].mean())


def background_mse(frames: np.ndarray, ref_frames: np.ndarray, fg_masks: np.ndarray) -> float:
    """MSE restricted to the complement of the foreground masks."""
    frames = np.asarray(frames, dtype=np.float64)
    ref_frames = np.asarray(ref_frames, dtype=np.float64)
    if frames.shape != ref_frames.shape:
        raise ValidationError(f"shapes differ: {frames.shape} vs {ref_frames.shape}")
    bg = ~np.asarray(fg_masks, dtype=bool)
    if not bg.any():
        raise ValidationError("background masks are empty")
    diff = ((frames - ref_frames) ** 2).mean(axis=1)  # [F, H, W] over channels
    return float(diff[bg].mean())


def temporal_energy_ratio(frames: np.ndarray, ref_frames: np.ndarray) -> float:
    """Frame-difference energy of `frames` relative to `ref_frames`."""
    frames = np.asarray(frames, dtype=np.float64)
    ref_frames = np.asarray(ref_frames, dtype=np.float64)
    if len(frames) < 2 or frames.shape != ref_frames.shape:
        raise ValidationError("temporal energy needs >= 2 equally shaped frames")
    num = float(((frames[1:] - frames[:-1]) ** 2).sum())
    den = float(((ref_frames[1:] - ref_frames[:-1]) ** 2).sum())
    if den < 1e-12:
        return float("nan")
    return num / den


def trajectory_correlation(
    frames: np.ndarray, spec: SceneSpec, face_color=None, min_detected: float = 0.8
) -> float:
    """Mean per-axis Pearson correlation between detected and true centroids.

    Axes whose true motion is under half a pixel of standard deviation are
    skipped as unmeasurable; nan if detection fails on too many frames or
    no axis is measurable.
    """
    color = face_color if face_color is not None else spec.identity.face_color
    det = []
    truth = []
    for i, frame in enumerate(frames):
        found = detect_centroid(frame, color)
        if found is not None:
            det.append(found)
            truth.append(spec.trajectory[i, :2])
    if len(det) < max(3, int(min_detected * len(frames))):
        return float("nan")
    det_arr = np.asarray(det)
    truth_arr = np.asarray(truth)
    corrs = []
    for axis in range(2):
        if truth_arr[:, axis].std() < 0.5:
            continue
        corrs.append(pearson(det_arr[:, axis], truth_arr[:, axis]))
    if not corrs:
        return float("nan")
    return float(np.mean(corrs))


def boundary_seam_ratio(frames: np.ndarray, emit_starts: list) -> float:
    """Seam severity: max boundary frame-difference energy over the median
    within-window frame-difference energy.

    `emit_starts` lists the first frame each window contributed to the
    assembled clip (EditResult.emit_starts); the scored boundaries are the
    transitions into those frames.
    """
    frames = np.asarray(frames, dtype=np.float64)
    diffs = ((frames[1:] - frames[:-1]) ** 2).sum(axis=(1, 2, 3))  # energy at i -> i+1
    boundaries = set()
    for s in emit_starts[1:]:
        if 1 <= s <= len(diffs):
            boundaries.add(s - 1)  # transition into the first frame this window emits
    if not boundaries:
        raise ValidationError("no window boundaries to score")
    interior = [d for i, d in enumerate(diffs) if i not in boundaries]
    if not interior:
        raise ValidationError("no interior transitions to compare against")
    return float(max(diffs[i] for i in boundaries) / np.median(interior))


@dataclass
class MetricReport:
    """Flat key/value bundle of edit metrics; nan marks unavailable entries."""

    psnr: float = float("nan")
    mse: float = float("nan")
    sync_corr: float = float("nan")
    identity_dist: float = float("nan")
    bg_mse: float = float("nan")
    temporal_energy_ratio: float = float("nan")
    trajectory_corr: float = float("nan")
    mean_aperture: float = float("nan")
    extra: dict = dc_field(default_factory=dict)

    def items(self):
        base = [
            ("psnr", self.psnr),
            ("mse", self.mse),
            ("sync_corr", self.sync_corr),
            ("identity_dist", self.identity_dist),
            ("bg_mse", self.bg_mse),
            ("temporal_energy_ratio", self.temporal_energy_ratio),
            ("trajectory_corr", self.trajectory_corr),
            ("mean_aperture", self.mean_aperture),
        ]
        return base + sorted(self.extra.items())

    def to_text(self) -> str:
        return "".join(f"{k}={v:.6g}\n" for k, v in self.items())

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "MetricReport":
        report = cls()
        known = {k for k, _ in cls().items() if k != "extra"}
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                if key in known:
                    setattr(report, key, float(value))
                else:
                    report.extra[key] = float(value)
        return report


def evaluate_edit(
    frames: np.ndarray,
    source_clip,
    aperture_target: Optional[np.ndarray] = None,
    face_color=None,
) -> MetricReport:
    """Score edited frames against the source clip's ground truth.

    aperture_target defaults to the source aperture (reconstruction / self
    edits); appearance edits pass the new identity's face_color so both the
    identity distance and detection use it.
    """
    clip = source_clip
    spec = clip.spec
    target = clip.aperture_gt if aperture_target is None else np.asarray(aperture_target)
    color = face_color if face_color is not None else spec.identity.face_color
    apertures = extract_apertures(frames, spec, face_color=color)
    m = mse(frames, clip.frames)
    return MetricReport(
        psnr=psnr(m),
        mse=m,
        sync_corr=sync_score(apertures, target),
        identity_dist=identity_score(frames, clip.fg_mask, color),
        bg_mse=background_mse(frames, clip.frames, clip.fg_mask),
        temporal_energy_ratio=temporal_energy_ratio(frames, clip.frames),
        trajectory_corr=trajectory_correlation(frames, spec, face_color=color),
        mean_aperture=float(np.clip(apertures, 0.0, None).mean()),
    )
