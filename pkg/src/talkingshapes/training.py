"""Denoiser training loop and checkpoint serialization.

Standard epsilon-prediction: sample a clip window, a timestep and unit
noise, forward-noise the window, and regress the model output onto the
noise. Audio conditioning is dropped per sample with a small probability
(replaced by the learned null row inside the model) so classifier-free
guidance has a usable unconditional direction; the reference frame is never
dropped. An exponential moving average of the weights is maintained and is
what inference uses.

All randomness is drawn from named substreams of the config seed, so two
runs from identical initial weights produce identical loss curves.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .codec import PixelCodec
from .container import read_tensors, write_tensors
from .errors import NumericError, ValidationError
from .model import Denoiser, DenoiserConfig
from .rng import substream
from .schedule import NoiseSchedule
from .world import Clip

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 8
    window: int = 16
    lr: float = 2e-4
    audio_dropout: float = 0.1
    ema_decay: float = 0.999
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.window < 1:
            raise ValidationError("steps must be >= 0, batch_size and window >= 1")
        if not 0.0 <= self.audio_dropout < 1.0:
            raise ValidationError(f"audio_dropout must be in [0, 1), got {self.audio_dropout}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")


class Ema:
    """Exponential moving average over a model's state dict."""

    def __init__(self, model: Denoiser, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: Denoiser) -> None:
        for k, v in model.state_dict().items():
            self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)

    def apply_to(self, model: Denoiser) -> Denoiser:
        model.load_state_dict(self.shadow)
        return model


@dataclass
class TrainResult:
    model: Denoiser  # raw weights, trained in place
    ema_model: Denoiser  # averaged copy used for inference
    loss_log: list  # (step, loss) per optimizer step


def train(
    model: Denoiser,
    clips: list[Clip],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    codec=None,
    log_every: int = 0,
) -> TrainResult:
    """Train in place; returns the raw model, an EMA copy, and the loss log.

    With cfg.steps == 0 both returned models equal the initialization.
    """
    cfg.validate()
    if not clips:
        raise ValidationError("training requires at least one clip")
    codec = codec if codec is not None else PixelCodec()
    window = cfg.window
    if window > model.config.max_frames:
        raise ValidationError(
            f"window {window} exceeds model max_frames {model.config.max_frames}"
        )
    for i, clip in enumerate(clips):
        if clip.n_frames < window:
            raise ValidationError(f"clip {i} has {clip.n_frames} frames < window {window}")

    latents = [codec.encode(c.frames) for c in clips]
    feats = [np.asarray(c.audio_feats, dtype=np.float32) for c in clips]
    refs = [lat[0] for lat in latents]
    alpha_bars = sched.alpha_bars

    pick = substream(cfg.seed, "train", "pick")
    noise_rng = substream(cfg.seed, "train", "noise")
    drop_rng = substream(cfg.seed, "train", "dropout")

    ema = Ema(model, cfg.ema_decay)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    loss_log: list[tuple[int, float]] = []
    model.train()

    for step in range(cfg.steps):
        idx = pick.integers(0, len(clips), size=cfg.batch_size)
        starts = pick.integers(0, [clips[i].n_frames - window + 1 for i in idx])
        ts = pick.integers(0, sched.t_train, size=cfg.batch_size)

        z0 = np.stack([latents[i][s : s + window] for i, s in zip(idx, starts)])
        au = np.stack([feats[i][s : s + window] for i, s in zip(idx, starts)])
        rf = np.stack([refs[i] for i in idx])
        noise = noise_rng.standard_normal(z0.shape).astype(np.float32)
        ab = alpha_bars[ts].astype(np.float32)[:, None, None, None, None]
        zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise
        null_mask = drop_rng.random(cfg.batch_size) < cfg.audio_dropout

        pred = model(
            torch.from_numpy(zt),
            torch.from_numpy(ts),
            torch.from_numpy(rf),
            torch.from_numpy(au),
            null_audio=torch.from_numpy(null_mask),
        )
        loss = torch.mean((pred - torch.from_numpy(noise)) ** 2)
        if not torch.isfinite(loss):
            raise NumericError(f"training loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema.update(model)
        loss_log.append((step, float(loss.item())))
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            recent = np.mean([l for _, l in loss_log[-log_every:]])
            print(f"step {step:6d}  loss {loss.item():.5f}  (mean {recent:.5f})", flush=True)

    model.eval()
    ema_model = copy.deepcopy(model)
    ema.apply_to(ema_model)
    ema_model.eval()
    return TrainResult(model=model, ema_model=ema_model, loss_log=loss_log)


def save_loss_log(path, loss_log) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for step, loss in loss_log:
            f.write(f"{step},{loss:.8g}\n")


def save_checkpoint(
    path,
    result: TrainResult,
    train_cfg: Optional[TrainConfig] = None,
    extra_meta: Optional[dict] = None,
) -> None:
    """Serialize raw and EMA weights plus config into one tensor container."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": result.model.config.to_dict(),
        "steps_trained": len(result.loss_log),
    }
    if train_cfg is not None:
        meta["train_config"] = {
            "steps": train_cfg.steps,
            "batch_size": train_cfg.batch_size,
            "window": train_cfg.window,
            "lr": train_cfg.lr,
            "audio_dropout": train_cfg.audio_dropout,
            "ema_decay": train_cfg.ema_decay,
            "seed": train_cfg.seed,
        }
    if extra_meta:
        meta.update(extra_meta)
    entries: dict[str, np.ndarray] = {
        "__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    }
    for name in sorted(result.model.state_dict()):
        entries[f"raw/{name}"] = result.model.state_dict()[name].detach().numpy().astype(np.float32)
    for name in sorted(result.ema_model.state_dict()):
        entries[f"ema/{name}"] = result.ema_model.state_dict()[name].detach().numpy().astype(np.float32)
    write_tensors(path, entries)


@dataclass
class CheckpointBundle:
    model: Denoiser
    ema_model: Denoiser
    config: DenoiserConfig
    meta: dict


def load_checkpoint(path) -> CheckpointBundle:
    entries = read_tensors(path)
    if "__meta__" not in entries:
        raise ValidationError(f"{path}: not a checkpoint (missing __meta__)")
    meta = json.loads(entries["__meta__"].tobytes().decode("utf-8"))
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
    config = DenoiserConfig.from_dict(meta["model_config"])

    def load_into(prefix: str) -> Denoiser:
        m = Denoiser(config)
        state = {}
        for key, arr in entries.items():
            if key.startswith(prefix):
                state[key[len(prefix) :]] = torch.from_numpy(arr.copy())
        missing = set(m.state_dict()) - set(state)
        if missing:
            raise ValidationError(f"{path}: checkpoint missing weights {sorted(missing)[:3]}...")
        m.load_state_dict(state)
        m.eval()
        return m

    return CheckpointBundle(
        model=load_into("raw/"), ema_model=load_into("ema/"), config=config, meta=meta
    )
