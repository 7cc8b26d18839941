"""Training-free editing of a clip via inversion and attention injection.

An edit job names a source clip and what should change: new audio (lip
edit), a new reference frame (appearance edit), both, or neither (self
reconstruction). Long clips are processed in overlapping fixed-size windows:

  1. each window of source latents is DDIM-inverted under the source
     conditioning (unguided),
  2. a source branch re-denoises the inverted window and records all
     attention q/k/v per step,
  3. the target branch denoises the same noisy latents under the edit
     conditioning with classifier-free guidance over audio, while injection
     hooks swap in recorded queries/keys for the first ceil(tau * N) steps.

Windows after the first start from frames the previous window already
generated: those latents are masked elementwise (Bernoulli(strength) to
fresh unit noise) and re-noised to the window's starting timestep, which
keeps content continuity without freezing the seam. Both branches chain
this way, each through its own generated history but with shared mask and
noise draws, so their per-step states correspond and an edit that changes
nothing degenerates to the plain reconstruction. Assembled output takes
the first generated occurrence of every frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import audio as audio_mod
from .codec import PixelCodec
from .errors import NumericError, ValidationError
from .injection import HookContext, InjectionConfig, SourceAttentionBank, control_hooks
from .inversion import (
    InversionTrace,
    invert_window,
    load_trace,
    reconstruct_window,
    save_trace,
    trace_path,
)
from .model import ConditioningBundle, Denoiser, denoise
from .rng import substream
from .schedule import NoiseSchedule, ddim_sample_step, make_step_grid, q_sample
from .world import Clip


@dataclass(frozen=True)
class WindowSlot:
    start: int
    emit_start: int
    emit_stop: int


def window_plan(total_frames: int, window: int, overlap: int) -> list[WindowSlot]:
    """Overlapping window starts plus the frame range each one emits.

    Regular starts advance by window - overlap; a final right-aligned window
    covers any remainder. Emitted ranges partition [0, total_frames) with
    earlier windows winning ties.
    """
    if window < 2:
        raise ValidationError(f"window must be >= 2, got {window}")
    if not 0 <= overlap < window:
        raise ValidationError(f"overlap must be in [0, window), got {overlap}")
    if total_frames < window:
        raise ValidationError(f"clip of {total_frames} frames shorter than window {window}")
    stride = window - overlap
    starts = list(range(0, total_frames - window + 1, stride))
    if starts[-1] + window < total_frames:
        starts.append(total_frames - window)
    plan = []
    covered = 0
    for s in starts:
        plan.append(WindowSlot(start=s, emit_start=max(covered, s), emit_stop=s + window))
        covered = s + window
    return plan


def overlap_mask(latent_frames: np.ndarray, strength: float, rng_or_seed) -> np.ndarray:
    """Replace a Bernoulli(strength) subset of latent elements with unit noise.

    strength 0 returns the input unchanged; strength 1 is an all-fresh draw.
    The mask is drawn first, then the noise, so the same seed gives the same
    replacement pattern regardless of downstream consumers.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValidationError(f"mask strength must be in [0, 1], got {strength}")
    latent_frames = np.asarray(latent_frames)
    rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) else substream(
        rng_or_seed, "overlap-mask"
    )
    if strength == 0.0:
        return latent_frames.copy()
    mask = rng.random(latent_frames.shape) < strength
    fresh = rng.standard_normal(latent_frames.shape).astype(latent_frames.dtype)
    return np.where(mask, fresh, latent_frames)


def cfg_eps(
    model: Denoiser,
    z: np.ndarray,
    step_index: int,
    t: int,
    cond: ConditioningBundle,
    null_cond: ConditioningBundle,
    scale: float,
    hooks: Optional[HookContext] = None,
) -> np.ndarray:
    """Classifier-free guided noise: eps_u + scale * (eps_c - eps_u).

    scale 1 short-circuits to the conditional pass and scale 0 to the
    unconditional pass, keeping those cases bitwise identical to a single
    unguided call. Injection hooks apply to both passes.
    """
    if not np.isfinite(scale) or scale < 0.0:
        raise ValidationError(f"guidance scale must be finite and >= 0, got {scale}")
    if scale == 1.0:
        return denoise(model, z, step_index, t, cond, hooks=hooks)
    if scale == 0.0:
        return denoise(model, z, step_index, t, null_cond, hooks=hooks)
    eps_c = denoise(model, z, step_index, t, cond, hooks=hooks)
    eps_u = denoise(model, z, step_index, t, null_cond, hooks=hooks)
    return eps_u + np.float32(scale) * (eps_c - eps_u)


@dataclass
class EditJob:
    """One edit request over a source clip."""

    source_clip: Clip
    new_audio: Optional[np.ndarray] = None  # waveform, frames * spf samples
    new_reference: Optional[np.ndarray] = None  # [3, H, W] pixel frame
    control: InjectionConfig = field(default_factory=InjectionConfig)
    guidance_scale: float = 3.5
    denoise_steps: int = 50
    invert_steps: int = 500
    window: int = 16
    overlap: int = 2
    mask_strength: float = 0.25
    seed: int = 0

    def validate(self, model: Denoiser) -> None:
        clip = self.source_clip
        self.control.validate()
        if self.window > model.config.max_frames:
            raise ValidationError(
                f"window {self.window} exceeds model max_frames {model.config.max_frames}"
            )
        window_plan(clip.n_frames, self.window, self.overlap)
        if not 0.0 <= self.mask_strength <= 1.0:
            raise ValidationError(f"mask_strength must be in [0, 1], got {self.mask_strength}")
        if self.denoise_steps > self.invert_steps:
            raise ValidationError(
                f"denoise_steps {self.denoise_steps} exceeds invert_steps {self.invert_steps}"
            )
        if self.new_reference is not None and self.new_reference.shape != clip.frames[0].shape:
            raise ValidationError(
                f"new_reference shape {self.new_reference.shape} != frame shape {clip.frames[0].shape}"
            )
        if self.new_audio is not None:
            spf = audio_mod.samples_per_frame(clip.spec.sample_rate, clip.spec.fps)
            if len(self.new_audio) != clip.n_frames * spf:
                raise ValidationError(
                    f"new_audio has {len(self.new_audio)} samples, expected "
                    f"{clip.n_frames * spf}; trim or pad first"
                )
            if not np.all(np.isfinite(self.new_audio)):
                raise ValidationError("new_audio contains non-finite samples")


@dataclass
class EditResult:
    frames: np.ndarray  # [F, 3, H, W] float32, assembled output
    latents: np.ndarray  # [F, C, H, W] float32 clean latents
    window_starts: list
    emit_starts: list  # first frame index each window contributes to the output
    audit: list  # one dict per hook application
    target_audio_feats: np.ndarray
    target_aperture: Optional[np.ndarray]
    reference_frame: np.ndarray


def _window_traces(
    job: EditJob,
    src_latents: np.ndarray,
    src_feats: np.ndarray,
    src_ref: np.ndarray,
    model: Denoiser,
    sched: NoiseSchedule,
    plan: list[WindowSlot],
    inv_grid,
    trace_dir,
):
    """Yield (window index, trace), inverting on demand and caching to disk."""
    for w, slot in enumerate(plan):
        s = slot.start
        path = trace_path(trace_dir, w) if trace_dir is not None else None
        if path is not None and path.exists():
            yield w, load_trace(path)
            continue
        cond = ConditioningBundle(
            audio_feats=src_feats[s : s + job.window], ref_latent=src_ref
        )
        trace = invert_window(
            src_latents[s : s + job.window], cond, model, sched,
            steps=job.invert_steps, grid=inv_grid, record="endpoints",
        )
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_trace(trace, path)
        yield w, trace


def _window_start_latent(
    trace, t_top: int, gen_z0: np.ndarray, gen_mask: np.ndarray,
    s: int, job: EditJob, w: int, sched: NoiseSchedule,
) -> np.ndarray:
    """Initial latent for one window: the trace's noisiest state, with frames
    this run already generated masked and re-noised back to t_top.

    float64 state for integration accuracy; the model consumes float32 casts.
    Carry draws depend only on (job.seed, w), so the source and target
    branches degrade their carried frames identically.
    """
    z = np.array(trace.latent(t_top), dtype=np.float64)
    carried = gen_mask[s : s + job.window]
    if carried.any():
        vals = gen_z0[s : s + job.window][carried]
        masked = overlap_mask(vals, job.mask_strength, substream(job.seed, "overlap", w))
        noise = substream(job.seed, "renoise", w).standard_normal(vals.shape).astype(np.float32)
        z[carried] = q_sample(masked, t_top, noise, sched)
    return z


def edit(
    job: EditJob,
    model: Denoiser,
    sched: NoiseSchedule,
    trace_dir=None,
    force_hooks: bool = False,
    codec=None,
    log_every: int = 0,
) -> EditResult:
    """Run one edit job; see the module docstring for the procedure.

    `trace_dir` caches per-window inversion traces across jobs on the same
    clip. `force_hooks` attaches the hook stack even when every tau is zero
    (all taus zero normally skips the capture branch entirely).
    """
    job.validate(model)
    codec = codec if codec is not None else PixelCodec()
    clip = job.source_clip
    n = clip.n_frames
    plan = window_plan(n, job.window, job.overlap)
    inv_grid = make_step_grid(sched.t_train, job.invert_steps)
    den_grid = make_step_grid(sched.t_train, job.denoise_steps)
    if not den_grid.is_subgrid_of(inv_grid):
        raise ValidationError(
            f"{job.denoise_steps}-step denoise grid is not nested in the "
            f"{job.invert_steps}-step inversion grid"
        )
    t_top = int(den_grid.indices[0])

    src_latents = codec.encode(clip.frames)
    src_ref = src_latents[0]
    src_feats = np.asarray(clip.audio_feats, dtype=np.float32)

    ref_frame = job.new_reference if job.new_reference is not None else clip.frames[0]
    tgt_ref = codec.encode(np.asarray(ref_frame, dtype=np.float32))
    spec = clip.spec
    if job.new_audio is not None:
        tgt_feats = audio_mod.waveform_features(
            job.new_audio, n, spec.fps, spec.sample_rate, src_feats.shape[1]
        )
        tgt_aperture = audio_mod.aperture_envelope(job.new_audio, n, spec.fps, spec.sample_rate)
    else:
        tgt_feats = src_feats
        tgt_aperture = None

    need_bank = job.control.any_active
    out_z0 = np.zeros_like(src_latents)
    gen_z0 = np.zeros_like(src_latents)
    src_gen_z0 = np.zeros_like(src_latents) if need_bank else None
    gen_mask = np.zeros(n, dtype=bool)
    audit: list[dict] = []

    for w, trace in _window_traces(
        job, src_latents, src_feats, src_ref, model, sched, plan, inv_grid, trace_dir
    ):
        slot = plan[w]
        s = slot.start
        src_cond = ConditioningBundle(
            audio_feats=src_feats[s : s + job.window], ref_latent=src_ref
        )
        bank = SourceAttentionBank()
        if need_bank:
            # the source branch chains through its own windowed history with
            # the same carry draws, so a self-edit collapses to the plain
            # reconstruction job and its records stay step-aligned
            z_src = _window_start_latent(
                trace, t_top, src_gen_z0, gen_mask, s, job, w, sched
            )
            src_z0, bank = reconstruct_window(
                trace, src_cond, model, sched, den_grid, capture=True, bank=bank,
                z_init=z_src,
            )
            src_gen_z0[s : s + job.window] = src_z0.astype(np.float32)

        z = _window_start_latent(trace, t_top, gen_z0, gen_mask, s, job, w, sched)

        tgt_cond = ConditioningBundle(audio_feats=tgt_feats[s : s + job.window], ref_latent=tgt_ref)
        null_cond = tgt_cond.nulled()
        ctx = None
        if need_bank or force_hooks:
            ctx = HookContext(control_hooks(bank, job.control, den_grid.count), audit=audit)
            ctx.window = w
        for si, (t, t_prev) in enumerate(den_grid.sampling_transitions()):
            eps = cfg_eps(model, z, si, t, tgt_cond, null_cond, job.guidance_scale, hooks=ctx)
            z = ddim_sample_step(z, eps.astype(np.float64), t, t_prev, sched)
            if not np.all(np.isfinite(z)):
                raise NumericError(f"non-finite latent in window {w} at step {si} (t={t})")
            if log_every and si % log_every == 0:
                print(f"window {w} step {si}/{den_grid.count}", flush=True)

        z32 = z.astype(np.float32)
        gen_z0[s : s + job.window] = z32
        gen_mask[s : s + job.window] = True
        out_z0[slot.emit_start : slot.emit_stop] = z32[slot.emit_start - s : slot.emit_stop - s]

    return EditResult(
        frames=codec.decode(out_z0),
        latents=out_z0,
        window_starts=[slot.start for slot in plan],
        emit_starts=[slot.emit_start for slot in plan],
        audit=audit,
        target_audio_feats=tgt_feats,
        target_aperture=tgt_aperture,
        reference_frame=np.asarray(ref_frame, dtype=np.float32),
    )


def reconstruct_clip(
    clip: Clip,
    model: Denoiser,
    sched: NoiseSchedule,
    invert_steps: int = 500,
    denoise_steps: int = 50,
    window: int = 16,
    overlap: int = 2,
    trace_dir=None,
    codec=None,
) -> np.ndarray:
    """Windowed invert-and-reconstruct baseline, assembled like an edit.

    Windows are reconstructed independently from their own inverted latents
    (no carried-frame re-noising, no guidance, no hooks); this is the
    fidelity ceiling edits are compared against.
    """
    codec = codec if codec is not None else PixelCodec()
    job = EditJob(
        source_clip=clip, invert_steps=invert_steps, denoise_steps=denoise_steps,
        window=window, overlap=overlap,
    )
    job.validate(model)
    plan = window_plan(clip.n_frames, window, overlap)
    inv_grid = make_step_grid(sched.t_train, invert_steps)
    den_grid = make_step_grid(sched.t_train, denoise_steps)
    src_latents = codec.encode(clip.frames)
    src_feats = np.asarray(clip.audio_feats, dtype=np.float32)
    out_z0 = np.zeros_like(src_latents)
    for w, trace in _window_traces(
        job, src_latents, src_feats, src_latents[0], model, sched, plan, inv_grid, trace_dir
    ):
        slot = plan[w]
        s = slot.start
        cond = ConditioningBundle(audio_feats=src_feats[s : s + window], ref_latent=src_latents[0])
        z0, _ = reconstruct_window(trace, cond, model, sched, den_grid)
        out_z0[slot.emit_start : slot.emit_stop] = z0[slot.emit_start - s : slot.emit_stop - s]
    return codec.decode(out_z0)
