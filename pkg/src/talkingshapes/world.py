"""Procedural talking-shapes world with exact ground truth.

Every clip shows a bright disc avatar moving over a static background, with
two dark eye dots and a black mouth ellipse whose vertical opening follows
the audio envelope exactly. Identity is the face color and geometry; the
background is a flat, striped, or checkered pattern. Because the world is
analytic, every quantity a metric could want (foreground masks, mouth
aperture, trajectory) is available exactly.

Conventions: image coordinates are (x right, y down) in pixel units with
pixel (i, j) covering [i, i+1) x [j, j+1); rotations are in degrees about
the face center. All shape sizes derive from the face radius, so the same
world renders at any resolution. Rendering supersamples each pixel on a
4 x 4 grid, giving smooth anti-aliased coverage that sub-pixel mouth
measurements can rely on.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from . import audio as audio_mod
from .container import read_tensors, write_tensors
from .errors import ValidationError
from .rng import substream

FACE_VALUE = 0.9  # max RGB channel of every identity color, pinned
EYE_COLOR = (0.15, 0.15, 0.15)
EYE_OFFSET_X = 0.35  # eye center offsets in face radii, x mirrored
EYE_OFFSET_Y = -0.38
MOUTH_CENTER_FACTOR = 0.45  # mouth center below face center, in radii
MOUTH_WIDTH_FACTOR = 0.42  # mouth half-width, in radii
MOUTH_MAX_FACTOR = 0.60  # fully open mouth height, in radii
MOUTH_MIN_PX = 1.0  # closed-mouth line thickness, pixels
SUPERSAMPLE = 4

CLIP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Identity:
    face_color: tuple[float, float, float]
    face_radius: float
    eye_radius: float


@dataclass(frozen=True)
class Background:
    pattern: str  # "flat" | "stripes" | "checker"
    palette: tuple[tuple[float, float, float], tuple[float, float, float]]
    cell: int = 4


@dataclass(frozen=True)
class SceneSpec:
    """Full generative description of one clip."""

    identity: Identity
    background: Background
    trajectory: np.ndarray  # [frames, 3] = (cx, cy, rotation_deg)
    waveform: np.ndarray  # [frames * sample_rate / fps] float32
    fps: int = 8
    sample_rate: int = 1024
    res: int = 32
    eye_openness: float = 1.0

    @property
    def frames(self) -> int:
        return len(self.trajectory)

    def validate(self) -> None:
        traj = np.asarray(self.trajectory)
        if traj.ndim != 2 or traj.shape[1] != 3:
            raise ValidationError(f"trajectory must be [frames, 3], got {traj.shape}")
        spf = audio_mod.samples_per_frame(self.sample_rate, self.fps)
        if len(self.waveform) != self.frames * spf:
            raise ValidationError(
                f"waveform has {len(self.waveform)} samples, expected {self.frames * spf}"
            )
        r = self.identity.face_radius
        if not 2.0 <= r <= self.res / 2:
            raise ValidationError(f"face radius {r} out of range for res {self.res}")
        if MOUTH_MAX_FACTOR * r <= MOUTH_MIN_PX:
            raise ValidationError(f"face radius {r} too small for a visible mouth range")
        if not 0.05 <= self.eye_openness <= 1.0:
            raise ValidationError(f"eye_openness {self.eye_openness} outside [0.05, 1]")
        margin = r + 0.5
        cx, cy = traj[:, 0], traj[:, 1]
        if (
            cx.min() < margin
            or cy.min() < margin
            or cx.max() > self.res - margin
            or cy.max() > self.res - margin
        ):
            raise ValidationError("trajectory takes the avatar out of frame")
        if self.background.pattern not in ("flat", "stripes", "checker"):
            raise ValidationError(f"unknown background pattern {self.background.pattern!r}")


@dataclass
class Clip:
    """A rendered clip plus its exact ground truth."""

    frames: np.ndarray  # [F, 3, H, W] float32 in [0, 1]
    audio_feats: np.ndarray  # [F, D] float32
    aperture_gt: np.ndarray  # [F] float64 in [0, 1]
    fg_mask: np.ndarray  # [F, H, W] bool, face disc footprint
    spec: SceneSpec

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def res(self) -> int:
        return self.frames.shape[-1]


def mouth_height(aperture: float, face_radius: float) -> float:
    """Full mouth-ellipse height in pixels for an aperture in [0, 1]."""
    return MOUTH_MIN_PX + float(aperture) * (MOUTH_MAX_FACTOR * face_radius - MOUTH_MIN_PX)


def color_distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b)))


def _subpixel_grid(res: int):
    pos = (np.arange(res * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    return np.meshgrid(pos, pos)  # xx, yy with shape [res*SS, res*SS]


def _downsample(mask: np.ndarray, res: int) -> np.ndarray:
    return mask.reshape(res, SUPERSAMPLE, res, SUPERSAMPLE).mean(axis=(1, 3))


def render_avatar_coverage(
    identity: Identity,
    pose: np.ndarray,
    aperture: float,
    res: int,
    eye_openness: float = 1.0,
):
    """Anti-aliased coverage maps (face, eyes, mouth), each [res, res] in [0, 1]."""
    cx, cy, theta = float(pose[0]), float(pose[1]), float(pose[2])
    r = identity.face_radius
    xx, yy = _subpixel_grid(res)
    dx = xx - cx
    dy = yy - cy
    c, s = np.cos(np.radians(theta)), np.sin(np.radians(theta))
    u = c * dx + s * dy  # avatar-frame coordinates
    v = -s * dx + c * dy

    face = (dx * dx + dy * dy) <= r * r

    er = identity.eye_radius
    ev = er * eye_openness
    ey = EYE_OFFSET_Y * r
    eyes = np.zeros_like(face)
    for ex in (-EYE_OFFSET_X * r, EYE_OFFSET_X * r):
        eyes |= ((u - ex) / er) ** 2 + ((v - ey) / ev) ** 2 <= 1.0

    half_w = MOUTH_WIDTH_FACTOR * r
    half_h = mouth_height(aperture, r) / 2.0
    mv = MOUTH_CENTER_FACTOR * r
    mouth = (u / half_w) ** 2 + ((v - mv) / half_h) ** 2 <= 1.0

    return _downsample(face, res), _downsample(eyes, res), _downsample(mouth, res)


def render_background(background: Background, res: int) -> np.ndarray:
    """Static background image [3, res, res] float32."""
    a = np.asarray(background.palette[0], dtype=np.float32)
    b = np.asarray(background.palette[1], dtype=np.float32)
    xs = np.arange(res)
    if background.pattern == "flat":
        sel = np.zeros((res, res), dtype=bool)
    elif background.pattern == "stripes":
        sel = np.broadcast_to((xs // background.cell) % 2 == 1, (res, res))
    elif background.pattern == "checker":
        sel = ((xs[None, :] // background.cell) + (xs[:, None] // background.cell)) % 2 == 1
    else:
        raise ValidationError(f"unknown background pattern {background.pattern!r}")
    img = np.where(sel[None], b[:, None, None], a[:, None, None])
    return img.astype(np.float32)


def render_frame(
    spec: SceneSpec,
    pose: np.ndarray,
    aperture: float,
    background_img: Optional[np.ndarray] = None,
    eye_openness: Optional[float] = None,
):
    """Composite one frame; returns (image [3, res, res] float32, fg_mask [res, res] bool)."""
    if background_img is None:
        background_img = render_background(spec.background, spec.res)
    open_eyes = spec.eye_openness if eye_openness is None else eye_openness
    face_cov, eye_cov, mouth_cov = render_avatar_coverage(
        spec.identity, pose, aperture, spec.res, open_eyes
    )
    img = background_img.astype(np.float64).copy()
    for cov, color in (
        (face_cov, spec.identity.face_color),
        (eye_cov, EYE_COLOR),
        (mouth_cov, (0.0, 0.0, 0.0)),
    ):
        col = np.asarray(color, dtype=np.float64)[:, None, None]
        img = img * (1.0 - cov) + col * cov
    return img.astype(np.float32), face_cov > 0.5


def render_clip(spec: SceneSpec, feature_dim: int = 8) -> Clip:
    """Render all frames of a scene and bundle exact ground truth."""
    spec.validate()
    f = spec.frames
    aperture = audio_mod.aperture_envelope(spec.waveform, f, spec.fps, spec.sample_rate)
    bg = render_background(spec.background, spec.res)
    frames = np.empty((f, 3, spec.res, spec.res), dtype=np.float32)
    masks = np.empty((f, spec.res, spec.res), dtype=bool)
    for i in range(f):
        frames[i], masks[i] = render_frame(spec, spec.trajectory[i], aperture[i], bg)
    feats = audio_mod.waveform_features(spec.waveform, f, spec.fps, spec.sample_rate, feature_dim)
    return Clip(frames=frames, audio_feats=feats, aperture_gt=aperture, fg_mask=masks, spec=spec)


def synth_audio(
    rng_or_seed,
    frames: int,
    fps: int = 8,
    sample_rate: int = 1024,
    silent: bool = False,
):
    """Synthesize syllable-like audio; returns (waveform float32, aperture [0, 1]).

    Voiced bursts of a ramped sine carrier alternate with silent gaps, with
    random amplitude, carrier frequency and a slow intra-burst modulation.
    `silent=True` is the silence-only branch: all-zero waveform, all-zero
    aperture.
    """
    rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) else substream(
        rng_or_seed, "audio"
    )
    spf = audio_mod.samples_per_frame(sample_rate, fps)
    n = frames * spf
    wave = np.zeros(n, dtype=np.float64)
    if not silent:
        pos = int(rng.uniform(0.0, 0.25) * sample_rate)
        while pos < n:
            length = int(rng.uniform(0.25, 0.8) * sample_rate)
            end = min(pos + length, n)
            k = end - pos
            if k > 8:
                amp = rng.uniform(0.4, 1.0)
                carrier = rng.uniform(70.0, 280.0)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                mod_f = rng.uniform(0.8, 3.0)
                t = np.arange(k) / sample_rate
                ramp = np.minimum(1.0, np.minimum(np.arange(k), k - 1 - np.arange(k)) / (0.03 * sample_rate))
                mod = 0.75 + 0.25 * np.sin(2.0 * np.pi * mod_f * t)
                wave[pos:end] = amp * ramp * mod * np.sin(2.0 * np.pi * carrier * t + phase)
            pos = end + int(rng.uniform(0.08, 0.5) * sample_rate)
    aperture = audio_mod.aperture_envelope(wave, frames, fps, sample_rate)
    return wave.astype(np.float32), aperture


def _random_color(rng, s_range=(0.45, 0.95), value=FACE_VALUE):
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(*s_range)
    return colorsys.hsv_to_rgb(h, s, value)


def make_scene_spec(
    seed: int,
    index: int = 0,
    attempt: int = 0,
    frames: int = 48,
    res: int = 32,
    fps: int = 8,
    sample_rate: int = 1024,
    face_color: Optional[tuple] = None,
    motion_scale: float = 1.0,
    silent: bool = False,
) -> SceneSpec:
    """Draw one scene deterministically from (seed, index, attempt)."""
    rng = substream(seed, "scene", index, attempt)
    radius = rng.uniform(0.28, 0.34) * res
    color = tuple(face_color) if face_color is not None else _random_color(rng)
    eye_radius = rng.uniform(0.05, 0.07) * res
    identity = Identity(face_color=color, face_radius=radius, eye_radius=eye_radius)

    pattern = ["flat", "stripes", "checker"][int(rng.integers(3))]
    palette = []
    for _ in range(2):
        for _try in range(100):
            cand = _random_color(rng, s_range=(0.15, 0.6), value=rng.uniform(0.45, 0.8))
            if color_distance(cand, color) >= 0.3:
                palette.append(cand)
                break
        else:
            raise ValidationError("could not draw a background color distinct from the face")
    background = Background(pattern=pattern, palette=(palette[0], palette[1]), cell=max(2, res // 8))

    margin = res / 2.0 - radius - 1.0
    if margin <= 0:
        raise ValidationError(f"face radius {radius} leaves no room to move at res {res}")
    amp_cap = min(0.12 * res, margin)
    ax = rng.uniform(0.3, 1.0) * amp_cap * motion_scale
    ay = rng.uniform(0.3, 1.0) * amp_cap * motion_scale
    fx, fy = rng.uniform(0.5, 1.6, size=2)
    px, py = rng.uniform(0.0, 2.0 * np.pi, size=2)
    rot_amp = rng.uniform(2.0, 16.0) * motion_scale
    rot_f = rng.uniform(0.5, 1.5)
    rot_p = rng.uniform(0.0, 2.0 * np.pi)
    tau = np.arange(frames) / frames
    traj = np.stack(
        [
            res / 2.0 + ax * np.sin(2.0 * np.pi * fx * tau + px),
            res / 2.0 + ay * np.sin(2.0 * np.pi * fy * tau + py),
            rot_amp * np.sin(2.0 * np.pi * rot_f * tau + rot_p),
        ],
        axis=1,
    )

    wave, _ = synth_audio(substream(seed, "scene", index, attempt, "audio"), frames, fps, sample_rate, silent=silent)
    spec = SceneSpec(
        identity=identity,
        background=background,
        trajectory=traj,
        waveform=wave,
        fps=fps,
        sample_rate=sample_rate,
        res=res,
    )
    spec.validate()
    return spec


def draw_separated_colors(
    n: int, seed: int, min_dist: float = 0.1, candidates: int = 128
) -> list[tuple]:
    """n face colors with pairwise RGB distance >= min_dist.

    Each identity takes the best of `candidates` draws from its own
    substream (the one farthest from everything accepted so far). Plain
    rejection jams well below the slice's true capacity; the value-0.9
    hue/saturation slice holds on the order of a hundred points at 0.1
    separation either way, so very large n fails loudly here.
    """
    colors: list[tuple] = []
    for i in range(n):
        rng = substream(seed, "identity-color", i)
        best = None
        best_d = -1.0
        for _ in range(candidates):
            cand = _random_color(rng, s_range=(0.25, 0.95))
            d = min((color_distance(cand, c) for c in colors), default=float("inf"))
            if d > best_d:
                best, best_d = cand, d
        if best_d < min_dist:
            raise ValidationError(
                f"could not place identity {i} with color separation {min_dist}; "
                f"the color space is saturated"
            )
        colors.append(best)
    return colors


def generate_dataset(
    n: int,
    seed: int,
    frames: int = 48,
    res: int = 32,
    fps: int = 8,
    sample_rate: int = 1024,
    feature_dim: int = 8,
    min_color_dist: float = 0.1,
) -> list[Clip]:
    """Render n clips with pairwise face-color separation >= min_color_dist."""
    colors = draw_separated_colors(n, seed, min_dist=min_color_dist)
    clips: list[Clip] = []
    for i in range(n):
        spec = make_scene_spec(
            seed, i, frames=frames, res=res, fps=fps, sample_rate=sample_rate, face_color=colors[i]
        )
        clips.append(render_clip(spec, feature_dim))
    return clips


# --- reference-frame edits ---------------------------------------------------


@dataclass(frozen=True)
class IdentityEdit:
    """Swap the avatar: donor foreground over the source's pattern background."""

    scene: SceneSpec


@dataclass(frozen=True)
class PoseEdit:
    """Move/rotate the avatar in-plane; exposed background is pattern-filled."""

    scene: SceneSpec
    rotation_deg: float = 0.0
    dx: float = 0.0
    dy: float = 0.0


@dataclass(frozen=True)
class ExpressionEdit:
    """Re-render mouth/eyes at a requested openness, same pose and identity."""

    scene: SceneSpec
    mouth_openness: Optional[float] = None
    eye_openness: Optional[float] = None
    frame_index: int = 0


def _mask3(mask: np.ndarray) -> np.ndarray:
    return np.broadcast_to(mask[None], (3,) + mask.shape)


def edit_reference_frame(
    frame: np.ndarray,
    fg_mask: np.ndarray,
    edit,
    donor: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
    """Produce an edited first frame for appearance control.

    `frame` is [3, H, W] float32, `fg_mask` its boolean avatar footprint.
    For IdentityEdit, `donor` is the (frame, fg_mask) pair supplying the new
    avatar; its foreground is composited over the source background with a
    one-pixel feathered boundary.
    """
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[0] != 3 or frame.shape[1:] != fg_mask.shape:
        raise ValidationError(
            f"frame {frame.shape} and fg_mask {fg_mask.shape} shapes are inconsistent"
        )
    res = frame.shape[-1]

    if isinstance(edit, IdentityEdit):
        if donor is None:
            raise ValidationError("IdentityEdit requires a donor (frame, fg_mask) pair")
        donor_frame, donor_mask = donor
        if donor_frame.shape != frame.shape or donor_mask.shape != fg_mask.shape:
            raise ValidationError("donor shapes do not match the source frame")
        bg = render_background(edit.scene.background, res)
        base = np.where(_mask3(fg_mask), bg, frame)
        # feather ramps inward only: the mask complement must stay untouched;
        # integer neighbor counts keep alpha exactly 1 in the interior
        counts = ndimage.correlate(
            donor_mask.astype(np.int64), np.ones((3, 3), dtype=np.int64), mode="nearest"
        )
        alpha = (counts / 9.0) * donor_mask
        out = alpha[None] * donor_frame.astype(np.float64) + (1.0 - alpha[None]) * base
        return out.astype(np.float32)

    if isinstance(edit, PoseEdit):
        scene = edit.scene
        r = scene.identity.face_radius
        c0 = scene.trajectory[0, :2].astype(np.float64)
        nc = c0 + np.array([edit.dx, edit.dy])
        if (nc - r - 0.5).min() < 0 or (nc + r + 0.5).max() > res:
            raise ValidationError("pose edit would move the avatar out of frame")
        bg = render_background(scene.background, res)
        base = np.where(_mask3(fg_mask), bg, frame).astype(np.float64)
        if edit.rotation_deg == 0.0 and edit.dx == 0.0 and edit.dy == 0.0:
            return frame.copy()
        phi = np.radians(edit.rotation_deg)
        cphi, sphi = np.cos(phi), np.sin(phi)
        # inverse rotation in (row, col) = (y, x) index space
        m = np.array([[cphi, -sphi], [sphi, cphi]])
        c0_yx = c0[::-1] - 0.5
        nc_yx = nc[::-1] - 0.5
        offset = c0_yx - m @ nc_yx
        maskf = fg_mask.astype(np.float64)
        cov = ndimage.affine_transform(maskf, m, offset=offset, order=1, mode="constant")
        warped = np.stack(
            [
                ndimage.affine_transform(frame[ch] * maskf, m, offset=offset, order=1, mode="constant")
                for ch in range(3)
            ]
        )
        out = warped + (1.0 - cov[None]) * base
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    if isinstance(edit, ExpressionEdit):
        scene = edit.scene
        aperture = audio_mod.aperture_envelope(
            scene.waveform, scene.frames, scene.fps, scene.sample_rate
        )[edit.frame_index]
        if edit.mouth_openness is not None:
            if not 0.0 <= edit.mouth_openness <= 1.0:
                raise ValidationError(f"mouth_openness {edit.mouth_openness} outside [0, 1]")
            aperture = edit.mouth_openness
        rerendered, _ = render_frame(
            scene,
            scene.trajectory[edit.frame_index],
            aperture,
            eye_openness=edit.eye_openness,
        )
        return np.where(_mask3(fg_mask), rerendered, frame).astype(np.float32)

    raise ValidationError(f"unknown edit type {type(edit).__name__}")


# --- clip persistence --------------------------------------------------------


def save_clip(clip: Clip, path) -> None:
    """Write a clip directory: frames/NNNN.png, arrays.ten, meta.json."""
    from pathlib import Path

    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        img = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img.transpose(1, 2, 0)).save(path / "frames" / f"{i:04d}.png")
    write_tensors(
        path / "arrays.ten",
        {
            "waveform": clip.spec.waveform.astype(np.float32),
            "audio_feats": clip.audio_feats.astype(np.float32),
            "aperture_gt": clip.aperture_gt.astype(np.float64),
            "fg_mask": clip.fg_mask,
            "trajectory": clip.spec.trajectory.astype(np.float64),
        },
    )
    spec = clip.spec
    meta = {
        "format_version": CLIP_FORMAT_VERSION,
        "frames": clip.n_frames,
        "res": spec.res,
        "fps": spec.fps,
        "sample_rate": spec.sample_rate,
        "eye_openness": spec.eye_openness,
        "identity": {
            "face_color": list(spec.identity.face_color),
            "face_radius": spec.identity.face_radius,
            "eye_radius": spec.identity.eye_radius,
        },
        "background": {
            "pattern": spec.background.pattern,
            "palette": [list(c) for c in spec.background.palette],
            "cell": spec.background.cell,
        },
    }
    with open(path / "meta.json", "w") as f:
        json.dump(meta, f, indent=1)


def load_clip(path) -> Clip:
    """Read a clip directory written by `save_clip`."""
    from pathlib import Path

    path = Path(path)
    try:
        with open(path / "meta.json") as f:
            meta = json.load(f)
    except FileNotFoundError as exc:
        raise ValidationError(f"{path}: not a clip directory (missing meta.json)") from exc
    if meta.get("format_version") != CLIP_FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported clip format {meta.get('format_version')}")
    arrays = read_tensors(path / "arrays.ten")
    n = meta["frames"]
    frames = np.empty((n, 3, meta["res"], meta["res"]), dtype=np.float32)
    for i in range(n):
        img = np.asarray(Image.open(path / "frames" / f"{i:04d}.png"), dtype=np.float32)
        frames[i] = img.transpose(2, 0, 1) / 255.0
    ident = Identity(
        face_color=tuple(meta["identity"]["face_color"]),
        face_radius=meta["identity"]["face_radius"],
        eye_radius=meta["identity"]["eye_radius"],
    )
    bg = Background(
        pattern=meta["background"]["pattern"],
        palette=tuple(tuple(c) for c in meta["background"]["palette"]),
        cell=meta["background"]["cell"],
    )
    spec = SceneSpec(
        identity=ident,
        background=bg,
        trajectory=arrays["trajectory"],
        waveform=arrays["waveform"],
        fps=meta["fps"],
        sample_rate=meta["sample_rate"],
        res=meta["res"],
        eye_openness=meta["eye_openness"],
    )
    return Clip(
        frames=frames,
        audio_feats=arrays["audio_feats"],
        aperture_gt=arrays["aperture_gt"],
        fg_mask=arrays["fg_mask"],
        spec=spec,
    )


def new_scene_like(spec: SceneSpec, **overrides) -> SceneSpec:
    """Copy a scene with selected fields replaced (trajectory, waveform, ...)."""
    out = replace(spec, **overrides)
    out.validate()
    return out
