"""Command-line interface.

Subcommands cover the full workflow: gen-data, train, invert, edit, eval,
ablate. Exit codes: 0 success, 1 bad arguments or malformed inputs, 2
runtime numeric/injection failure. A JSON --config file may supply defaults
for any long flag of the chosen subcommand; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import ablation, audio as audio_mod, world
from .errors import TalkingShapesError, ValidationError
from .evaluation import evaluate_edit
from .injection import InjectionConfig, format_audit_line
from .inversion import invert_window, save_trace, trace_path
from .model import ConditioningBundle, DenoiserConfig, build_model
from .pipeline import EditJob, edit, window_plan
from .schedule import make_linear_schedule, make_step_grid
from .training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    save_loss_log,
    train,
)

MANIFEST_NAME = "manifest.json"


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on bad flags (2 is reserved for numeric errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _load_manifest_clips(data_dir: Path) -> list[world.Clip]:
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise ValidationError(f"{data_dir}: no {MANIFEST_NAME}; run gen-data first")
    with open(manifest_path) as f:
        manifest = json.load(f)
    return [world.load_clip(data_dir / name) for name in manifest["clips"]]


def _save_frames(frames: np.ndarray, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        img = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img.transpose(1, 2, 0)).save(out_dir / f"{i:04d}.png")


def _load_frames(path: Path) -> np.ndarray:
    frames_dir = path / "frames" if (path / "frames").is_dir() else path
    files = sorted(frames_dir.glob("*.png"))
    if not files:
        raise ValidationError(f"{path}: no PNG frames found")
    frames = []
    for fp in files:
        img = np.asarray(Image.open(fp), dtype=np.float32)
        frames.append(img.transpose(2, 0, 1) / 255.0)
    return np.stack(frames)


def _load_ref_image(path: Path, res: int) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    if img.shape[0] != res or img.shape[1] != res:
        raise ValidationError(f"{path}: reference image is {img.shape[:2]}, clip is {res}x{res}")
    return img.transpose(2, 0, 1) / 255.0


def _edit_audio(args, clip: world.Clip) -> np.ndarray | None:
    spec = clip.spec
    n_samples = clip.n_frames * audio_mod.samples_per_frame(spec.sample_rate, spec.fps)
    if getattr(args, "silence", False):
        return np.zeros(n_samples, dtype=np.float32)
    if getattr(args, "audio", None):
        wave = audio_mod.load_wav(args.audio, spec.sample_rate)
        return audio_mod.fit_length(wave, n_samples)
    if getattr(args, "audio_seed", None) is not None:
        wave, _ = world.synth_audio(args.audio_seed, clip.n_frames, spec.fps, spec.sample_rate)
        return wave
    return None


def _control_from_args(args) -> InjectionConfig:
    cfg = InjectionConfig(
        tau_shape=args.tau_shape, tau_audio=args.tau_audio, tau_temporal=args.tau_temporal
    )
    cfg.validate()
    return cfg


# short spellings accepted alongside the descriptive axis names
_AXIS_ALIASES = {"tau_s": "tau_shape", "tau_a": "tau_audio", "tau_f": "tau_temporal"}


def _add_edit_flags(p: _Parser) -> None:
    p.add_argument("--ckpt", required=True, help="checkpoint file from train")
    p.add_argument("--clip", required=True, help="source clip directory")
    p.add_argument("--audio", help="WAV file with the new speech")
    p.add_argument("--audio-seed", type=int, help="synthesize new speech from this seed")
    p.add_argument("--silence", action="store_true", help="edit to silent audio")
    p.add_argument("--ref-image", "--ref-frame", help="PNG with the new reference frame")
    p.add_argument("--tau-shape", "--tau-s", type=float, default=0.2)
    p.add_argument("--tau-audio", "--tau-a", type=float, default=0.2)
    p.add_argument("--tau-temporal", "--tau-f", type=float, default=0.4)
    p.add_argument("--guidance", type=float, default=3.5)
    p.add_argument("--denoise-steps", "--steps", type=int, default=50)
    p.add_argument("--invert-steps", type=int, default=500)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--overlap", type=int, default=2)
    p.add_argument("--mask-strength", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--traces", help="directory for cached inversion traces")


def _build_job(args, clip: world.Clip) -> EditJob:
    new_audio = _edit_audio(args, clip)
    new_ref = None
    if args.ref_image:
        new_ref = _load_ref_image(Path(args.ref_image), clip.res)
    return EditJob(
        source_clip=clip,
        new_audio=new_audio,
        new_reference=new_ref,
        control=_control_from_args(args),
        guidance_scale=args.guidance,
        denoise_steps=args.denoise_steps,
        invert_steps=args.invert_steps,
        window=args.window,
        overlap=args.overlap,
        mask_strength=args.mask_strength,
        seed=args.seed,
    )


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = world.generate_dataset(
        args.num_clips,
        args.seed,
        frames=args.frames,
        res=args.res,
        fps=args.fps,
        sample_rate=args.sample_rate,
    )
    names = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:04d}"
        world.save_clip(clip, out / name)
        names.append(name)
    manifest = {
        "format_version": 1,
        "seed": args.seed,
        "num_clips": args.num_clips,
        "frames": args.frames,
        "res": args.res,
        "fps": args.fps,
        "sample_rate": args.sample_rate,
        "clips": names,
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1)
    print(f"wrote {len(names)} clips to {out}")
    return 0


def _cmd_train(args) -> int:
    clips = _load_manifest_clips(Path(args.data))
    model_cfg = DenoiserConfig(
        base_width=args.base_width,
        num_down_levels=args.levels,
        attention_head_dim=args.head_dim,
        audio_feature_dim=clips[0].audio_feats.shape[1],
        max_frames=args.max_frames,
    )
    model_cfg.validate()
    train_cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        window=args.window,
        lr=args.lr,
        audio_dropout=args.audio_dropout,
        ema_decay=args.ema_decay,
        seed=args.seed,
    )
    model = build_model(model_cfg, seed=train_cfg.seed)
    sched = make_linear_schedule()
    result = train(model, clips, sched, train_cfg, log_every=args.log_every)
    save_checkpoint(args.out, result, train_cfg)
    if args.loss_log:
        save_loss_log(args.loss_log, result.loss_log)
    final = np.mean([l for _, l in result.loss_log[-100:]]) if result.loss_log else float("nan")
    print(f"trained {len(result.loss_log)} steps, final loss {final:.5f}, saved {args.out}")
    return 0


def _cmd_invert(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    model = bundle.ema_model
    clip = world.load_clip(Path(args.clip))
    sched = make_linear_schedule()
    from .codec import PixelCodec

    codec = PixelCodec()
    latents = codec.encode(clip.frames)
    plan = window_plan(clip.n_frames, args.window, args.overlap)
    grid = make_step_grid(sched.t_train, args.steps)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for w, slot in enumerate(plan):
        s = slot.start
        cond = ConditioningBundle(
            audio_feats=clip.audio_feats[s : s + args.window], ref_latent=latents[0]
        )
        trace = invert_window(
            latents[s : s + args.window], cond, model, sched,
            grid=grid, record=args.record,
        )
        save_trace(trace, trace_path(out_dir, w))
        print(f"window {w} (frames {s}..{s + args.window - 1}) inverted")
    print(f"wrote {len(plan)} traces to {out_dir}")
    return 0


def _cmd_edit(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    model = bundle.ema_model
    clip = world.load_clip(Path(args.clip))
    sched = make_linear_schedule()
    job = _build_job(args, clip)
    result = edit(job, model, sched, trace_dir=args.traces, log_every=args.log_every)
    out = Path(args.out)
    _save_frames(result.frames, out / "frames")
    with open(out / "audit.log", "w") as f:
        for entry in result.audit:
            f.write(format_audit_line(entry) + "\n")
    report = evaluate_edit(
        result.frames, clip, aperture_target=result.target_aperture
    )
    report.save(out / "report.txt")
    print(report.to_text(), end="")
    print(f"wrote edit to {out}")
    return 0


def _cmd_eval(args) -> int:
    # two spellings: --clip SOURCE --frames EDITED, or --clip EDITED --ref SOURCE
    if (args.frames is None) == (args.ref is None):
        raise ValidationError("provide --frames (edited output) or --ref (source clip), not both")
    src_dir, frames_dir = (args.clip, args.frames) if args.ref is None else (args.ref, args.clip)
    clip = world.load_clip(Path(src_dir))
    frames = _load_frames(Path(frames_dir))
    if frames.shape != clip.frames.shape:
        raise ValidationError(
            f"frames {frames.shape} do not match source clip {clip.frames.shape}"
        )
    target = None
    if args.audio:
        wave = audio_mod.load_wav(args.audio, clip.spec.sample_rate)
        spf = audio_mod.samples_per_frame(clip.spec.sample_rate, clip.spec.fps)
        wave = audio_mod.fit_length(wave, clip.n_frames * spf)
        target = audio_mod.aperture_envelope(
            wave, clip.n_frames, clip.spec.fps, clip.spec.sample_rate
        )
    color = None
    if args.face_color:
        parts = [float(x) for x in args.face_color.split(",")]
        if len(parts) != 3:
            raise ValidationError("--face-color expects r,g,b in [0, 1]")
        color = tuple(parts)
    report = evaluate_edit(frames, clip, aperture_target=target, face_color=color)
    if args.out:
        report.save(args.out)
    print(report.to_text(), end="")
    return 0


def _cmd_ablate(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    model = bundle.ema_model
    clip = world.load_clip(Path(args.clip))
    sched = make_linear_schedule()
    job = _build_job(args, clip)
    values = [float(x) for x in args.values.split(",")]
    axis = _AXIS_ALIASES.get(args.axis, args.axis)
    results = ablation.run_tau_sweep(job, model, sched, axis, values, trace_dir=args.traces)
    ablation.save_sweep(args.out, axis, results)
    for value, report in results:
        print(f"{axis}={value:g}  sync={report.sync_corr:.4f}  psnr={report.psnr:.2f}  "
              f"energy_ratio={report.temporal_energy_ratio:.4f}")
    print(f"wrote sweep to {args.out}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="talkingshapes", description=__doc__)
    parser.add_argument("--config", help="JSON file of default flag values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-clips", "--clips", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--fps", type=int, default=8)
    p.add_argument("--sample-rate", type=int, default=1024)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--audio-dropout", type=float, default=0.1)
    p.add_argument("--ema-decay", type=float, default=0.999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-width", type=int, default=64)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=32)
    p.add_argument("--max-frames", type=int, default=16)
    p.add_argument("--log-every", type=int, default=200)
    p.add_argument("--loss-log", help="also write a step,loss CSV here")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("invert", help="invert a clip's windows and save traces")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--overlap", type=int, default=2)
    p.add_argument("--record", choices=("endpoints", "all"), default="endpoints")
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("edit", help="run a training-free edit")
    _add_edit_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("eval", help="score output frames against a source clip")
    p.add_argument("--clip", required=True)
    p.add_argument("--frames", help="directory of PNG frames (or a clip dir)")
    p.add_argument("--ref", help="source clip directory; --clip then holds the edited frames")
    p.add_argument("--audio", help="WAV the edit was supposed to follow")
    p.add_argument("--face-color", help="r,g,b of the expected identity")
    p.add_argument("--out", help="write the report here as key=value lines")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="sweep one injection horizon")
    _add_edit_flags(p)
    p.add_argument(
        "--axis", required=True, choices=ablation.TAU_AXES + tuple(_AXIS_ALIASES)
    )
    p.add_argument("--values", required=True, help="comma-separated tau values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)
    return parser


def _apply_config_file(parser: _Parser, argv: list[str]) -> list[str]:
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ValidationError("--config requires a file path")
    path = argv[i + 1]
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: unreadable config file ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object of flag defaults")
    defaults = {key.replace("-", "_"): value for key, value in cfg.items()}
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            known = {a.dest for a in sub._actions}
            sub.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    return argv[:i] + argv[i + 2 :]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TalkingShapesError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
