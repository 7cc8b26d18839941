import numpy as np
import pytest
from scipy import ndimage

from talkingshapes.errors import ValidationError
from talkingshapes.world import (
    MOUTH_MAX_FACTOR,
    MOUTH_MIN_PX,
    ExpressionEdit,
    IdentityEdit,
    PoseEdit,
    color_distance,
    draw_separated_colors,
    edit_reference_frame,
    generate_dataset,
    load_clip,
    make_scene_spec,
    mouth_height,
    new_scene_like,
    render_background,
    render_clip,
    render_frame,
    save_clip,
    synth_audio,
)

RES = 16
FRAMES = 6


def static_spec(seed=21, silent=False, face_color=None):
    return make_scene_spec(
        seed, frames=FRAMES, res=RES, motion_scale=0.0, silent=silent, face_color=face_color
    )


def dark_mouth_pixels(img) -> int:
    return int(np.sum(img.max(axis=0) < 0.1))


def test_scene_spec_is_pure_function_of_seed():
    a = make_scene_spec(7, index=3, frames=FRAMES, res=RES)
    b = make_scene_spec(7, index=3, frames=FRAMES, res=RES)
    assert a.identity == b.identity
    assert np.array_equal(a.trajectory, b.trajectory)
    assert np.array_equal(a.waveform, b.waveform)
    c = make_scene_spec(7, index=4, frames=FRAMES, res=RES)
    assert not np.array_equal(a.trajectory, c.trajectory)


def test_render_clip_determinism():
    spec = make_scene_spec(9, frames=FRAMES, res=RES)
    a = render_clip(spec)
    b = render_clip(spec)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.audio_feats, b.audio_feats)
    assert np.array_equal(a.fg_mask, b.fg_mask)


def test_frame_format():
    clip = render_clip(static_spec())
    assert clip.frames.dtype == np.float32
    assert clip.frames.shape == (FRAMES, 3, RES, RES)
    assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0
    assert clip.fg_mask.dtype == bool
    assert clip.aperture_gt.shape == (FRAMES,)


def test_dataset_color_separation():
    clips = generate_dataset(16, seed=3, frames=4, res=RES)
    colors = [c.spec.identity.face_color for c in clips]
    for i in range(16):
        for j in range(i + 1, 16):
            assert color_distance(colors[i], colors[j]) >= 0.1


def test_color_capacity_exhaustion_fails_loudly():
    with pytest.raises(ValidationError, match="saturated"):
        draw_separated_colors(180, seed=0)


def test_mouth_height_endpoints():
    assert mouth_height(0.0, 10.0) == MOUTH_MIN_PX
    assert mouth_height(1.0, 10.0) == MOUTH_MAX_FACTOR * 10.0


def test_mouth_grows_with_aperture():
    spec = static_spec()
    pose = spec.trajectory[0]
    closed, _ = render_frame(spec, pose, 0.0)
    opened, _ = render_frame(spec, pose, 1.0)
    assert dark_mouth_pixels(opened) > 3 * max(dark_mouth_pixels(closed), 1)


def test_silent_static_scene_renders_constant_frames():
    clip = render_clip(static_spec(silent=True))
    assert np.array_equal(clip.aperture_gt, np.zeros(FRAMES))
    assert np.array_equal(clip.spec.waveform, np.zeros_like(clip.spec.waveform))
    for i in range(1, FRAMES):
        assert np.array_equal(clip.frames[i], clip.frames[0])


def test_zeroed_waveform_stills_the_mouth():
    spec = make_scene_spec(13, frames=FRAMES, res=RES)
    quiet = new_scene_like(spec, waveform=np.zeros_like(spec.waveform))
    clip = render_clip(quiet)
    assert np.array_equal(clip.aperture_gt, np.zeros(FRAMES))
    # every frame equals a fresh render at aperture exactly 0
    for i in range(FRAMES):
        img, _ = render_frame(quiet, quiet.trajectory[i], 0.0)
        assert np.array_equal(clip.frames[i], img)


def test_synth_audio_silent_branch():
    wave, aperture = synth_audio(0, frames=FRAMES, silent=True)
    assert np.array_equal(wave, np.zeros_like(wave))
    assert np.array_equal(aperture, np.zeros(FRAMES))


def test_synth_audio_envelope_normalized():
    wave, aperture = synth_audio(1, frames=24)
    assert wave.min() >= -1.0 and wave.max() <= 1.0
    assert aperture.min() >= 0.0
    assert aperture.max() == pytest.approx(1.0)


def test_fg_mask_matches_disc_geometry():
    spec = static_spec()
    clip = render_clip(spec)
    mask = clip.fg_mask[0]
    r = spec.identity.face_radius
    cx, cy = spec.trajectory[0, :2]
    area = mask.sum()
    assert area == pytest.approx(np.pi * r * r, rel=0.10)
    ys, xs = np.nonzero(mask)
    assert np.mean(xs) + 0.5 == pytest.approx(cx, abs=0.5)
    assert np.mean(ys) + 0.5 == pytest.approx(cy, abs=0.5)


def test_pixels_far_from_disc_equal_background():
    spec = static_spec()
    clip = render_clip(spec)
    bg = render_background(spec.background, RES)
    r = spec.identity.face_radius
    cx, cy = spec.trajectory[0, :2]
    xs, ys = np.meshgrid(np.arange(RES) + 0.5, np.arange(RES) + 0.5)
    far = (xs - cx) ** 2 + (ys - cy) ** 2 > (r + 1.5) ** 2
    assert np.array_equal(clip.frames[0][:, far], bg[:, far])


def test_identity_edit_swaps_face_and_keeps_background():
    from talkingshapes.world import Identity

    src_spec = static_spec(seed=31, face_color=(0.9, 0.2, 0.2))
    src = render_clip(src_spec)
    donor_spec = new_scene_like(
        src_spec,
        identity=Identity(
            face_color=(0.2, 0.2, 0.9),
            face_radius=src_spec.identity.face_radius,
            eye_radius=src_spec.identity.eye_radius,
        ),
    )
    donor = render_clip(donor_spec)
    out = edit_reference_frame(
        src.frames[0], src.fg_mask[0], IdentityEdit(scene=src_spec), donor=(donor.frames[0], donor.fg_mask[0])
    )
    block = np.ones((3, 3), dtype=bool)
    inner = ndimage.binary_erosion(donor.fg_mask[0], structure=block)
    assert np.array_equal(out[:, inner], donor.frames[0][:, inner])
    # the whole mask complement is untouched, donor color never bleeds out
    outside = ~(src.fg_mask[0] | donor.fg_mask[0])
    assert np.array_equal(out[:, outside], src.frames[0][:, outside])
    # and the face really changed color inside
    assert np.abs(out[:, inner] - src.frames[0][:, inner]).max() > 0.3


def test_identity_edit_with_source_donor_changes_only_feather_band():
    spec = static_spec(seed=33)
    clip = render_clip(spec)
    out = edit_reference_frame(
        clip.frames[0], clip.fg_mask[0], IdentityEdit(scene=spec), donor=(clip.frames[0], clip.fg_mask[0])
    )
    mask = clip.fg_mask[0]
    inner = ndimage.binary_erosion(mask, structure=np.ones((3, 3), dtype=bool))
    assert np.array_equal(out[:, inner], clip.frames[0][:, inner])
    assert np.array_equal(out[:, ~mask], clip.frames[0][:, ~mask])


def test_identity_edit_requires_donor():
    spec = static_spec()
    clip = render_clip(spec)
    with pytest.raises(ValidationError, match="donor"):
        edit_reference_frame(clip.frames[0], clip.fg_mask[0], IdentityEdit(scene=spec))


def test_pose_edit_zero_is_identity():
    spec = static_spec()
    clip = render_clip(spec)
    out = edit_reference_frame(clip.frames[0], clip.fg_mask[0], PoseEdit(scene=spec))
    assert np.array_equal(out, clip.frames[0])
    assert out is not clip.frames[0]


def test_pose_edit_translates_the_avatar():
    from talkingshapes.evaluation import detect_centroid

    spec = static_spec(seed=35)
    clip = render_clip(spec)
    edit = PoseEdit(scene=spec, dx=2.0, dy=-1.0)
    out = edit_reference_frame(clip.frames[0], clip.fg_mask[0], edit)
    before = detect_centroid(clip.frames[0], spec.identity.face_color)
    after = detect_centroid(out, spec.identity.face_color)
    assert after[0] - before[0] == pytest.approx(2.0, abs=0.35)
    assert after[1] - before[1] == pytest.approx(-1.0, abs=0.35)


def test_pose_edit_out_of_frame_raises():
    spec = static_spec()
    clip = render_clip(spec)
    with pytest.raises(ValidationError, match="out of frame"):
        edit_reference_frame(clip.frames[0], clip.fg_mask[0], PoseEdit(scene=spec, dx=50.0))


def test_expression_edit_opens_mouth_in_place():
    spec = static_spec(seed=37, silent=True)
    clip = render_clip(spec)
    opened = edit_reference_frame(
        clip.frames[0], clip.fg_mask[0], ExpressionEdit(scene=spec, mouth_openness=1.0)
    )
    assert dark_mouth_pixels(opened) > dark_mouth_pixels(clip.frames[0])
    outside = ~clip.fg_mask[0]
    assert np.array_equal(opened[:, outside], clip.frames[0][:, outside])


def test_expression_edit_validation():
    spec = static_spec()
    clip = render_clip(spec)
    with pytest.raises(ValidationError):
        edit_reference_frame(
            clip.frames[0], clip.fg_mask[0], ExpressionEdit(scene=spec, mouth_openness=1.5)
        )


def test_unknown_edit_type_raises():
    spec = static_spec()
    clip = render_clip(spec)
    with pytest.raises(ValidationError, match="unknown edit"):
        edit_reference_frame(clip.frames[0], clip.fg_mask[0], object())


def test_save_load_round_trip(tmp_path):
    clip = render_clip(make_scene_spec(17, frames=5, res=RES))
    save_clip(clip, tmp_path / "clip")
    back = load_clip(tmp_path / "clip")
    quantized = np.clip(np.round(clip.frames * 255.0), 0, 255).astype(np.float32) / 255.0
    assert np.array_equal(back.frames, quantized)
    assert np.abs(back.frames - clip.frames).max() <= 0.5 / 255.0 + 1e-7
    assert np.array_equal(back.aperture_gt, clip.aperture_gt)
    assert np.array_equal(back.fg_mask, clip.fg_mask)
    assert np.array_equal(back.audio_feats, clip.audio_feats)
    assert np.array_equal(back.spec.waveform, clip.spec.waveform)
    assert np.array_equal(back.spec.trajectory, clip.spec.trajectory)
    assert back.spec.identity.face_radius == clip.spec.identity.face_radius
    assert back.spec.background == clip.spec.background


def test_load_clip_rejects_bad_directories(tmp_path):
    with pytest.raises(ValidationError, match="meta.json"):
        load_clip(tmp_path)
    clip = render_clip(make_scene_spec(17, frames=2, res=RES))
    save_clip(clip, tmp_path / "c")
    import json

    meta = json.loads((tmp_path / "c" / "meta.json").read_text())
    meta["format_version"] = 99
    (tmp_path / "c" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(ValidationError, match="format"):
        load_clip(tmp_path / "c")


def test_scene_validation_rejects_out_of_frame_trajectory():
    spec = static_spec()
    bad_traj = spec.trajectory.copy()
    bad_traj[0, 0] = RES - 1.0
    with pytest.raises(ValidationError, match="out of frame"):
        new_scene_like(spec, trajectory=bad_traj)


def test_scene_validation_rejects_waveform_length_mismatch():
    spec = static_spec()
    with pytest.raises(ValidationError, match="samples"):
        new_scene_like(spec, waveform=spec.waveform[:-3])
