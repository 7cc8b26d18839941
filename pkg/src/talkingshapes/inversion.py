"""DDIM inversion of latent windows and source attention capture.

Inversion walks a clean latent window up the step grid, evaluating the
model at the timestep each latent currently lives at (the sentinel start
uses the destination index, since there is no t = -1 embedding) and applying
the affine inversion update. The inversion is unguided: editing intent
enters later, during target denoising. The recorded per-timestep latents
form an InversionTrace; coarser sampling grids can consume a finer trace
because step grids nest.

Source attention capture happens on a reconstruction branch: the trace's
noisiest latent is re-denoised under the source conditioning on the coarse
grid, and a recording hook stores every attention site's q, k, v per step.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .container import read_tensors, write_tensors
from .errors import NumericError, ValidationError
from .injection import HookContext, RecordingHook, SourceAttentionBank
from .model import ConditioningBundle, Denoiser, denoise
from .schedule import CLEAN_T, NoiseSchedule, StepGrid, ddim_invert_step, ddim_sample_step, make_step_grid

TRACE_FORMAT_VERSION = 1


@dataclass
class InversionTrace:
    """Latents recorded along one inversion run, keyed by timestep index.

    Contains the clean input under the sentinel key -1 and one entry per
    grid index; `latent(t)` is the window state at timestep t.
    """

    grid: StepGrid
    latents: dict[int, np.ndarray]

    def latent(self, t: int) -> np.ndarray:
        if t not in self.latents:
            raise ValidationError(f"trace has no latent for timestep {t}")
        return self.latents[t]

    @property
    def noisiest(self) -> np.ndarray:
        return self.latents[int(self.grid.indices[0])]


def invert_window(
    z0: np.ndarray,
    cond: ConditioningBundle,
    model: Denoiser,
    sched: NoiseSchedule,
    steps: int = 500,
    grid: Optional[StepGrid] = None,
    record: str = "all",
) -> InversionTrace:
    """Invert one clean latent window [F, C, H, W] up the step grid.

    record="all" keeps every intermediate latent (full trace); "endpoints"
    keeps only the clean input and the noisiest latent, which is all the
    editing pipeline consumes and two orders of magnitude smaller.
    """
    if z0.ndim != 4:
        raise ValidationError(f"window latents must be [F, C, H, W], got {z0.shape}")
    if record not in ("all", "endpoints"):
        raise ValidationError(f"record must be 'all' or 'endpoints', got {record!r}")
    if grid is None:
        grid = make_step_grid(sched.t_train, steps)
    # state and stored latents are float64: inversion contracts the clean
    # signal by sqrt(abar_T) (~0.006 at t=999) and sampling re-amplifies it,
    # so a single float32 quantization of the noisiest latent would cost
    # ~1e-5 on the round trip; the model still consumes float32 casts
    z = np.array(z0, dtype=np.float64)
    latents = {CLEAN_T: z.copy()}
    last = int(grid.indices[0])
    for step_index, (t_prev, t) in enumerate(grid.inversion_transitions()):
        t_eval = t_prev if t_prev != CLEAN_T else t
        eps = denoise(model, z, step_index, t_eval, cond)
        z = ddim_invert_step(z, eps.astype(np.float64), t_prev, t, sched)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite latent while inverting step {t_prev} -> {t}")
        if record == "all" or t == last:
            latents[t] = z.copy()
    return InversionTrace(grid=grid, latents=latents)


def reconstruct_window(
    trace: InversionTrace,
    cond: ConditioningBundle,
    model: Denoiser,
    sched: NoiseSchedule,
    denoise_grid: StepGrid,
    capture: bool = False,
    bank: Optional[SourceAttentionBank] = None,
    z_init: Optional[np.ndarray] = None,
):
    """Re-denoise a trace's noisiest latent under its own conditioning.

    Returns (clean latents, bank). With capture=True every attention site's
    q, k, v is recorded per step into `bank` (a fresh one if not given);
    recording is transparent, so the reconstruction itself is identical with
    capture on or off. `z_init` overrides the starting latent; the windowed
    pipeline passes the carry-adjusted state so this branch steps in lockstep
    with the branch consuming its records.
    """
    if not denoise_grid.is_subgrid_of(trace.grid):
        raise ValidationError(
            f"denoise grid ({denoise_grid.count} steps) is not a subgrid of the "
            f"inversion grid ({trace.grid.count} steps)"
        )
    ctx = None
    if capture:
        bank = bank if bank is not None else SourceAttentionBank()
        ctx = HookContext([RecordingHook(bank)], branch="source")
    start = trace.latent(int(denoise_grid.indices[0])) if z_init is None else z_init
    z = np.array(start, dtype=np.float64)
    for step_index, (t, t_prev) in enumerate(denoise_grid.sampling_transitions()):
        eps = denoise(model, z, step_index, t, cond, hooks=ctx)
        z = ddim_sample_step(z, eps.astype(np.float64), t, t_prev, sched)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite latent while reconstructing step {t} -> {t_prev}")
    return z, bank


def save_trace(trace: InversionTrace, path) -> None:
    """Write a trace as one tensor container."""
    entries: dict[str, np.ndarray] = {
        "__grid__": trace.grid.indices.astype(np.float64),
        "__version__": np.array([TRACE_FORMAT_VERSION], dtype=np.float64),
    }
    for t in sorted(trace.latents):
        entries[f"latent_{t}"] = trace.latents[t].astype(np.float64)
    write_tensors(path, entries)


def load_trace(path) -> InversionTrace:
    entries = read_tensors(path)
    if "__grid__" not in entries or "__version__" not in entries:
        raise ValidationError(f"{path}: not an inversion trace")
    version = int(entries["__version__"][0])
    if version != TRACE_FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported trace format {version}")
    grid = StepGrid(indices=entries["__grid__"].astype(np.int64))
    latents = {}
    for name, arr in entries.items():
        if name.startswith("latent_"):
            latents[int(name[len("latent_") :])] = arr
    allowed = {CLEAN_T, *grid.indices.tolist()}
    required = {CLEAN_T, int(grid.indices[0])}
    if not required.issubset(latents) or not set(latents).issubset(allowed):
        raise ValidationError(f"{path}: trace latents inconsistent with the grid")
    return InversionTrace(grid=grid, latents=latents)


def trace_path(base_dir, window_index: int) -> Path:
    return Path(base_dir) / f"window_{window_index:03d}.trace"
