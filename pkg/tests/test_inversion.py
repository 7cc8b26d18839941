import numpy as np
import pytest

from talkingshapes.errors import NumericError, ValidationError
from talkingshapes.inversion import (
    InversionTrace,
    invert_window,
    load_trace,
    reconstruct_window,
    save_trace,
    trace_path,
)
from talkingshapes.schedule import CLEAN_T, make_step_grid
from tests.stubs import ConstantEps, NonFiniteEps, default_cond

RES = 16
FRAMES = 4


def unit_latents(seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=(FRAMES, 3, RES, RES)).astype(dtype)


def test_round_trip_with_constant_eps(sched):
    # a constant predictor makes inversion-then-sampling exactly invertible,
    # so the pipeline must return the input up to accumulated rounding
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-10)):
        z0 = unit_latents(dtype=dtype)
        cond = default_cond(FRAMES, RES)
        model = ConstantEps(0.37)
        trace = invert_window(z0, cond, model, sched, steps=50)
        recon, _ = reconstruct_window(trace, cond, model, sched, trace.grid)
        err = float(np.max(np.abs(recon.astype(np.float64) - z0.astype(np.float64))))
        assert err <= tol
        assert recon.astype(dtype).dtype == dtype


def test_inversion_is_deterministic(sched):
    z0 = unit_latents(1)
    cond = default_cond(FRAMES, RES)
    t1 = invert_window(z0, cond, ConstantEps(0.2), sched, steps=12)
    t2 = invert_window(z0, cond, ConstantEps(0.2), sched, steps=12)
    for t in t1.latents:
        assert np.array_equal(t1.latents[t], t2.latents[t])


def test_trace_contents_all_vs_endpoints(sched):
    z0 = unit_latents(2)
    cond = default_cond(FRAMES, RES)
    full = invert_window(z0, cond, ConstantEps(), sched, steps=10)
    ends = invert_window(z0, cond, ConstantEps(), sched, steps=10, record="endpoints")
    grid = full.grid.indices.tolist()
    assert set(full.latents) == set(grid) | {CLEAN_T}
    assert set(ends.latents) == {CLEAN_T, grid[0]}
    assert np.array_equal(ends.noisiest, full.noisiest)
    assert np.array_equal(ends.latent(CLEAN_T), z0.astype(np.float64))
    assert full.latents[CLEAN_T].dtype == np.float64
    with pytest.raises(ValidationError, match="record"):
        invert_window(z0, cond, ConstantEps(), sched, steps=10, record="some")
    with pytest.raises(ValidationError, match="no latent"):
        ends.latent(grid[1])


def test_endpoint_trace_supports_reconstruction(sched):
    z0 = unit_latents(3)
    cond = default_cond(FRAMES, RES)
    model = ConstantEps(0.1)
    ends = invert_window(z0, cond, model, sched, steps=20, record="endpoints")
    recon, _ = reconstruct_window(ends, cond, model, sched, make_step_grid(1000, 10))
    assert np.max(np.abs(recon - z0)) < 1e-6


def test_reconstruction_requires_nested_grid(sched):
    z0 = unit_latents(4)
    cond = default_cond(FRAMES, RES)
    trace = invert_window(z0, cond, ConstantEps(), sched, steps=12)
    with pytest.raises(ValidationError, match="subgrid"):
        reconstruct_window(trace, cond, ConstantEps(), sched, make_step_grid(1000, 5))


def test_non_finite_model_output_raises(sched):
    z0 = unit_latents(5)
    cond = default_cond(FRAMES, RES)
    with pytest.raises(NumericError, match="non-finite"):
        invert_window(z0, cond, NonFiniteEps(), sched, steps=4)


def test_latent_shape_validation(sched):
    with pytest.raises(ValidationError, match="F, C, H, W"):
        invert_window(np.zeros((3, RES, RES), dtype=np.float32), default_cond(FRAMES, RES),
                      ConstantEps(), sched, steps=4)


def test_trace_save_load_round_trip(tmp_path, sched):
    z0 = unit_latents(6)
    cond = default_cond(FRAMES, RES)
    trace = invert_window(z0, cond, ConstantEps(), sched, steps=8)
    path = trace_path(tmp_path, 3)
    assert path.name == "window_003.trace"
    save_trace(trace, path)
    back = load_trace(path)
    assert back.grid.indices.tolist() == trace.grid.indices.tolist()
    assert set(back.latents) == set(trace.latents)
    for t in trace.latents:
        assert np.array_equal(back.latents[t], trace.latents[t])
        assert back.latents[t].dtype == np.float64


def test_trace_rejects_foreign_and_inconsistent_files(tmp_path, sched):
    from talkingshapes.container import write_tensors

    path = tmp_path / "x.trace"
    write_tensors(path, {"stuff": np.zeros(3)})
    with pytest.raises(ValidationError, match="not an inversion trace"):
        load_trace(path)

    z0 = unit_latents(7)
    trace = invert_window(z0, default_cond(FRAMES, RES), ConstantEps(), sched, steps=6)
    # drop the clean latent: required key, load must refuse
    trace2 = InversionTrace(grid=trace.grid, latents=dict(trace.latents))
    del trace2.latents[CLEAN_T]
    save_trace(trace2, path)
    with pytest.raises(ValidationError, match="inconsistent"):
        load_trace(path)


def test_capture_fills_bank_and_leaves_values_alone(tiny_trained, sched):
    from talkingshapes.model import ConditioningBundle

    rng = np.random.default_rng(8)
    z0 = rng.uniform(-1, 1, size=(FRAMES, 3, RES, RES)).astype(np.float32)
    cond = ConditioningBundle(
        audio_feats=rng.uniform(0, 1, size=(FRAMES, 8)).astype(np.float32),
        ref_latent=z0[0],
    )
    trace = invert_window(z0, cond, tiny_trained, sched, steps=6)
    plain, none_bank = reconstruct_window(trace, cond, tiny_trained, sched, trace.grid)
    assert none_bank is None
    captured, bank = reconstruct_window(trace, cond, tiny_trained, sched, trace.grid, capture=True)
    assert np.array_equal(plain, captured)
    assert len(bank) == 6 * 6  # sites x steps
    assert bank.sites() == {s.block_id for s in tiny_trained.attention_sites()}


def test_more_inversion_steps_reconstruct_better(tiny_trained, sched):
    # discretization error of the inversion ODE shrinks with step count
    from talkingshapes.model import ConditioningBundle

    rng = np.random.default_rng(9)
    z0 = rng.uniform(-1, 1, size=(FRAMES, 3, RES, RES)).astype(np.float32)
    cond = ConditioningBundle(
        audio_feats=rng.uniform(0, 1, size=(FRAMES, 8)).astype(np.float32),
        ref_latent=z0[0],
    )
    errs = []
    for steps in (8, 32):
        trace = invert_window(z0, cond, tiny_trained, sched, steps=steps)
        recon, _ = reconstruct_window(trace, cond, tiny_trained, sched, trace.grid)
        errs.append(float(np.mean((recon - z0.astype(np.float64)) ** 2)))
    assert errs[1] < errs[0]
