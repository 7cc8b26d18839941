"""Metric tests: hand oracles for the arithmetic, rendered scenes with exact
ground truth for the extraction-based scores."""

import math

import numpy as np
import pytest

from talkingshapes.errors import ValidationError
from talkingshapes.evaluation import (
    MetricReport,
    background_mse,
    boundary_seam_ratio,
    detect_centroid,
    evaluate_edit,
    extract_aperture,
    extract_apertures,
    identity_score,
    mse,
    pearson,
    psnr,
    sync_score,
    temporal_energy_ratio,
    trajectory_correlation,
)
from talkingshapes.world import make_scene_spec, render_clip, render_frame

from conftest import TINY_FRAMES, TINY_RES


@pytest.fixture(scope="module")
def moving_clip():
    return render_clip(make_scene_spec(3, 1, frames=24, res=TINY_RES))


def test_mse_matches_direct_sum():
    a = np.array([[0.0, 0.5], [1.0, 0.25]])
    b = np.array([[0.5, 0.5], [0.0, 0.75]])
    expected = (0.25 + 0.0 + 1.0 + 0.25) / 4.0
    assert mse(a, b) == expected
    assert mse(a, a) == 0.0
    with pytest.raises(ValidationError):
        mse(a, b[0])


def test_psnr_known_values():
    assert psnr(1.0) == 0.0
    assert math.isclose(psnr(1e-4), 40.0, rel_tol=1e-12)
    # identical inputs hit the floor instead of diverging
    assert psnr(0.0) == 120.0
    assert psnr(1e-15) == 120.0
    with pytest.raises(ValidationError):
        psnr(-1e-9)


def test_pearson_affine_and_degenerate():
    x = np.linspace(0.0, 1.0, 17)
    assert math.isclose(pearson(x, 3.0 * x + 2.0), 1.0, abs_tol=1e-12)
    assert math.isclose(pearson(x, -0.5 * x + 1.0), -1.0, abs_tol=1e-12)
    assert math.isnan(pearson(x, np.full_like(x, 0.7)))
    with pytest.raises(ValidationError):
        pearson(x[:2], x[:2])
    with pytest.raises(ValidationError):
        pearson(x, x[:-1])
    with pytest.raises(ValidationError):
        pearson(x.reshape(-1, 1), x.reshape(-1, 1))


def test_pearson_matches_numpy():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(64)
    y = 0.3 * x + rng.standard_normal(64)
    assert math.isclose(pearson(x, y), np.corrcoef(x, y)[0, 1], rel_tol=1e-12)


def test_detect_centroid_centered_face():
    spec = make_scene_spec(3, 0, frames=TINY_FRAMES, res=TINY_RES)
    pose = np.array([TINY_RES / 2.0, TINY_RES / 2.0, 0.0])
    img, _ = render_frame(spec, pose, 0.3)
    found = detect_centroid(img, spec.identity.face_color)
    assert found is not None
    assert abs(found[0] - pose[0]) < 0.3 and abs(found[1] - pose[1]) < 0.3


def test_detect_centroid_none_without_face():
    spec = make_scene_spec(3, 0, frames=TINY_FRAMES, res=TINY_RES)
    from talkingshapes.world import render_background

    bg = render_background(spec.background, TINY_RES)
    assert detect_centroid(bg, spec.identity.face_color) is None


def test_extract_aperture_tracks_rendered_levels():
    spec = make_scene_spec(3, 0, frames=TINY_FRAMES, res=TINY_RES)
    pose = np.array([TINY_RES / 2.0, TINY_RES / 2.0, 0.0])
    levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    estimates = []
    for level in levels:
        img, _ = render_frame(spec, pose, level)
        estimates.append(extract_aperture(img, pose, spec.identity.face_radius))
    for level, est in zip(levels, estimates):
        assert abs(est - level) < 0.05
    assert all(b > a for a, b in zip(estimates, estimates[1:]))


def test_extract_aperture_handles_rotation():
    spec = make_scene_spec(3, 0, frames=TINY_FRAMES, res=TINY_RES)
    pose = np.array([TINY_RES / 2.0, TINY_RES / 2.0, 25.0])
    img, _ = render_frame(spec, pose, 0.6)
    est = extract_aperture(img, pose, spec.identity.face_radius)
    assert abs(est - 0.6) < 0.07


def test_sync_correlation_on_rendered_clip(moving_clip):
    apertures = extract_apertures(moving_clip.frames, moving_clip.spec)
    assert sync_score(apertures, moving_clip.aperture_gt) > 0.98


def test_sync_invariant_to_brightness_scale(moving_clip):
    base = sync_score(extract_apertures(moving_clip.frames, moving_clip.spec), moving_clip.aperture_gt)
    dim = sync_score(
        extract_apertures(moving_clip.frames * 0.8, moving_clip.spec), moving_clip.aperture_gt
    )
    assert dim > 0.97
    assert abs(base - dim) < 0.02


def test_trajectory_correlation_on_rendered_clip(moving_clip):
    assert trajectory_correlation(moving_clip.frames, moving_clip.spec) > 0.97


def test_trajectory_correlation_nan_when_static():
    spec = make_scene_spec(3, 0, frames=TINY_FRAMES, res=TINY_RES, motion_scale=0.0)
    clip = render_clip(spec)
    assert math.isnan(trajectory_correlation(clip.frames, spec))


def test_trajectory_correlation_nan_without_detections(moving_clip):
    # a color far from every frame pixel leaves nothing to detect
    assert math.isnan(trajectory_correlation(moving_clip.frames, moving_clip.spec, face_color=(0.0, 0.0, 0.0)))


def test_identity_score_prefers_own_color(moving_clip):
    spec = moving_clip.spec
    own = identity_score(moving_clip.frames, moving_clip.fg_mask, spec.identity.face_color)
    far = (0.9, 0.0, 0.0) if spec.identity.face_color[1] > 0.4 else (0.0, 0.9, 0.0)
    wrong = identity_score(moving_clip.frames, moving_clip.fg_mask, far)
    # eyes and mouth sit inside the face disc, so "own" is small but not zero
    assert own < 0.3
    assert wrong > 0.45
    assert own < wrong


def test_identity_score_validation(moving_clip):
    with pytest.raises(ValidationError):
        identity_score(moving_clip.frames, moving_clip.fg_mask[:-1], (0.9, 0.5, 0.5))
    with pytest.raises(ValidationError):
        identity_score(moving_clip.frames, np.zeros_like(moving_clip.fg_mask), (0.9, 0.5, 0.5))


def test_background_mse_self_and_sensitivity(moving_clip):
    assert background_mse(moving_clip.frames, moving_clip.frames, moving_clip.fg_mask) == 0.0
    shifted = moving_clip.frames.astype(np.float64) + 0.25
    assert math.isclose(
        background_mse(shifted, moving_clip.frames, moving_clip.fg_mask), 0.0625, rel_tol=1e-12
    )
    with pytest.raises(ValidationError):
        background_mse(moving_clip.frames, moving_clip.frames[:-1], moving_clip.fg_mask)
    with pytest.raises(ValidationError):
        background_mse(moving_clip.frames, moving_clip.frames, np.ones_like(moving_clip.fg_mask))


def test_temporal_energy_ratio_values(moving_clip):
    frames = moving_clip.frames
    assert temporal_energy_ratio(frames, frames) == 1.0
    # doubling every frame difference quadruples the energy
    amplified = frames[0][None] + 2.0 * (frames - frames[0][None])
    assert math.isclose(temporal_energy_ratio(amplified, frames), 4.0, rel_tol=1e-6)
    static = np.repeat(frames[:1], len(frames), axis=0)
    assert math.isnan(temporal_energy_ratio(frames, static))
    with pytest.raises(ValidationError):
        temporal_energy_ratio(frames[:1], frames[:1])


def test_boundary_seam_ratio_hand_case():
    # constant drift of 0.01 per frame, plus a 0.5 jump entering frame 4
    frames = np.zeros((8, 3, 4, 4))
    for i in range(8):
        frames[i] = i * 0.01
    frames[4:] += 0.5
    smooth = frames - np.where(np.arange(8) >= 4, 0.5, 0.0)[:, None, None, None]
    ratio = boundary_seam_ratio(frames, [0, 4])
    assert math.isclose(ratio, (0.51 / 0.01) ** 2, rel_tol=1e-9)
    assert math.isclose(boundary_seam_ratio(smooth, [0, 4]), 1.0, rel_tol=1e-9)


def test_boundary_seam_ratio_validation():
    frames = np.zeros((4, 3, 2, 2))
    with pytest.raises(ValidationError):
        boundary_seam_ratio(frames, [0])
    with pytest.raises(ValidationError):
        boundary_seam_ratio(frames[:2], [0, 1])


def test_metric_report_text_and_round_trip(tmp_path):
    report = MetricReport(psnr=31.5, mse=7.079458e-4, sync_corr=0.93)
    report.extra["tau_audio"] = 0.5
    text = report.to_text()
    assert "psnr=31.5\n" in text
    assert "sync_corr=0.93\n" in text
    assert "tau_audio=0.5\n" in text
    assert all("=" in line for line in text.strip().split("\n"))

    path = tmp_path / "report.txt"
    report.save(path)
    loaded = MetricReport.load(path)
    assert loaded.psnr == report.psnr
    assert loaded.sync_corr == report.sync_corr
    assert loaded.extra == {"tau_audio": 0.5}
    # unset fields stay nan through the round trip
    assert math.isnan(loaded.bg_mse)


def test_metric_report_extras_sorted():
    report = MetricReport()
    report.extra = {"zeta": 1.0, "alpha": 2.0}
    keys = [k for k, _ in report.items()]
    assert keys.index("alpha") < keys.index("zeta")


def test_evaluate_edit_self_reconstruction(moving_clip):
    report = evaluate_edit(moving_clip.frames, moving_clip)
    assert report.psnr == 120.0
    assert report.mse == 0.0
    assert report.bg_mse == 0.0
    assert report.temporal_energy_ratio == 1.0
    assert report.sync_corr > 0.98
    assert report.trajectory_corr > 0.97
    assert report.identity_dist < 0.3
    assert abs(report.mean_aperture - moving_clip.aperture_gt.mean()) < 0.08


def test_evaluate_edit_respects_new_face_color(moving_clip):
    spec = moving_clip.spec
    report = evaluate_edit(moving_clip.frames, moving_clip, face_color=(0.0, 0.0, 0.9))
    own = evaluate_edit(moving_clip.frames, moving_clip)
    assert report.identity_dist > own.identity_dist
