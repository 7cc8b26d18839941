"""Source-to-target attention injection.

During editing, two denoising branches run over the same inverted latents:
a source branch that reconstructs the clip and records attention tensors,
and a target branch that receives the edit conditioning. Hooks installed on
the target branch replace selected query/key tensors with the recorded ones
for the first ceil(tau * N) of N denoising steps, transplanting the source's
layout, motion, and articulation style while values (and hence content)
stay native to the target:

    shape control      spatial self  -> source Q (layout), never K or V
    speaking control   audio cross   -> source Q and K, target audio V
    temporal control   temporal      -> source Q and K, frame aligned

All three controls compose freely because they touch disjoint sites. A
missing record while a control is active is a hard error: it means the two
branches have desynchronized, and silently skipping would fake a result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import torch

from .errors import InjectionError, ValidationError
from .model import AttentionKind, AttentionRecord, AttentionSite

# absorbs float representation error in tau * total (e.g. 0.3 * 50)
_TAU_EPS = 1e-9


@dataclass(frozen=True)
class InjectionConfig:
    """Per-control injection horizons, as fractions of the denoising run."""

    tau_shape: float = 0.2
    tau_audio: float = 0.2
    tau_temporal: float = 0.4
    site_allowlist: Optional[frozenset[str]] = None  # block ids, None = all

    def validate(self) -> None:
        for name, tau in (
            ("tau_shape", self.tau_shape),
            ("tau_audio", self.tau_audio),
            ("tau_temporal", self.tau_temporal),
        ):
            if not 0.0 <= tau <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {tau}")

    @property
    def any_active(self) -> bool:
        return max(self.tau_shape, self.tau_audio, self.tau_temporal) > 0.0


def injection_steps(tau: float, total_steps: int) -> int:
    """Number of leading denoising steps a horizon tau covers: ceil(tau * N)."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    if total_steps < 1:
        raise ValidationError(f"total_steps must be >= 1, got {total_steps}")
    return min(total_steps, math.ceil(tau * total_steps - _TAU_EPS))


def should_inject(step_index: int, total_steps: int, tau: float) -> bool:
    """True on the first ceil(tau * N) steps; step 0 is the noisiest."""
    if not 0 <= step_index < total_steps:
        raise ValidationError(f"step_index {step_index} outside [0, {total_steps})")
    return step_index < injection_steps(tau, total_steps)


class SourceAttentionBank:
    """Write-once store of attention records keyed by (site id, step index)."""

    def __init__(self):
        self._records: dict[tuple[str, int], AttentionRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def put(self, record: AttentionRecord) -> None:
        key = (record.site.block_id, record.step_index)
        if key in self._records:
            raise InjectionError(
                f"duplicate record for site {record.site.block_id} step {record.step_index}"
            )
        self._records[key] = record

    def get(self, site: AttentionSite, step_index: int) -> AttentionRecord:
        key = (site.block_id, step_index)
        rec = self._records.get(key)
        if rec is None:
            raise InjectionError(
                f"no source record for site {site.block_id} step {step_index}; "
                "source and target branches have desynchronized"
            )
        return rec

    def sites(self) -> set[str]:
        return {block_id for block_id, _ in self._records}


class HookContext:
    """Carries hooks plus step/window state into the denoiser.

    `apply` offers each attention site's tensors to every hook in order;
    hooks return a dict of field replacements ({"q": ...}) or {} to pass.
    Replacements are shape-checked here so failures carry site and step
    context, and each application is appended to the audit log.
    """

    def __init__(self, hooks: Iterable, audit: Optional[list] = None, branch: str = "target"):
        self.hooks = list(hooks)
        self.audit = audit
        self.branch = branch
        self.step_index = 0
        self.window: Optional[int] = None

    def apply(self, site: AttentionSite, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
        current = {"q": q, "k": k, "v": v}
        for hook in self.hooks:
            overrides = hook(site, self.step_index, current["q"], current["k"], current["v"])
            if not overrides:
                continue
            for name, tensor in overrides.items():
                if name not in current:
                    raise InjectionError(
                        f"hook returned unknown field {name!r} at {site.block_id}"
                    )
                if tuple(tensor.shape) != tuple(current[name].shape):
                    raise InjectionError(
                        f"{site.block_id} step {self.step_index}: replacement {name} shape "
                        f"{tuple(tensor.shape)} != live shape {tuple(current[name].shape)}"
                    )
                current[name] = tensor
            if self.audit is not None:
                self.audit.append(
                    {
                        "branch": self.branch,
                        "window": self.window,
                        "step": self.step_index,
                        "site": site.block_id,
                        "kind": site.kind.value,
                        "fields": ",".join(sorted(overrides)),
                        "hook": type(hook).__name__,
                    }
                )
        return current["q"], current["k"], current["v"]


def format_audit_line(entry: dict) -> str:
    keys = ("branch", "window", "step", "site", "kind", "fields", "hook")
    return " ".join(f"{k}={entry[k]}" for k in keys)


class RecordingHook:
    """Stores detached copies of q, k, v at every offered site; replaces nothing."""

    def __init__(self, bank: SourceAttentionBank, site_allowlist: Optional[frozenset[str]] = None):
        self.bank = bank
        self.site_allowlist = site_allowlist

    def __call__(self, site: AttentionSite, step_index: int, q, k, v) -> dict:
        if self.site_allowlist is None or site.block_id in self.site_allowlist:
            self.bank.put(
                AttentionRecord(
                    site=site,
                    step_index=step_index,
                    q=q.detach().clone(),
                    k=k.detach().clone(),
                    v=v.detach().clone(),
                )
            )
        return {}


class _ControlHook:
    """Shared logic: on active steps, swap in recorded fields at one site kind."""

    kind: AttentionKind
    fields: tuple[str, ...]

    def __init__(
        self,
        bank: SourceAttentionBank,
        tau: float,
        total_steps: int,
        site_allowlist: Optional[frozenset[str]] = None,
    ):
        if total_steps < 1:
            raise ValidationError(f"total_steps must be >= 1, got {total_steps}")
        if not 0.0 <= tau <= 1.0:
            raise ValidationError(f"tau must be in [0, 1], got {tau}")
        self.bank = bank
        self.tau = tau
        self.total_steps = total_steps
        self.site_allowlist = site_allowlist

    def __call__(self, site: AttentionSite, step_index: int, q, k, v) -> dict:
        if site.kind != self.kind:
            return {}
        if self.site_allowlist is not None and site.block_id not in self.site_allowlist:
            return {}
        if not should_inject(step_index, self.total_steps, self.tau):
            return {}
        rec = self.bank.get(site, step_index)
        return {name: getattr(rec, name) for name in self.fields}


class ShapeControlHook(_ControlHook):
    """Source spatial-self queries keep the layout; K and V stay live."""

    kind = AttentionKind.SPATIAL_SELF
    fields = ("q",)


class SpeakingControlHook(_ControlHook):
    """Source audio-cross Q and K keep the articulation pattern; V stays live
    so the target audio supplies the content."""

    kind = AttentionKind.AUDIO_CROSS
    fields = ("q", "k")


class TemporalControlHook(_ControlHook):
    """Source temporal Q and K keep frame-to-frame dynamics; V stays live."""

    kind = AttentionKind.TEMPORAL
    fields = ("q", "k")

    def __call__(self, site: AttentionSite, step_index: int, q, k, v) -> dict:
        out = super().__call__(site, step_index, q, k, v)
        if out and out["q"].shape[-2] != q.shape[-2]:
            raise InjectionError(
                f"{site.block_id}: recorded {out['q'].shape[-2]} frames but live window "
                f"has {q.shape[-2]}; frame-aligned replacement impossible"
            )
        return out


def control_hooks(
    bank: SourceAttentionBank, config: InjectionConfig, total_steps: int
) -> list:
    """The standard hook stack for an edit, one control per attention kind."""
    config.validate()
    allow = config.site_allowlist
    return [
        ShapeControlHook(bank, config.tau_shape, total_steps, allow),
        SpeakingControlHook(bank, config.tau_audio, total_steps, allow),
        TemporalControlHook(bank, config.tau_temporal, total_steps, allow),
    ]
