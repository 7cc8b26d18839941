"""Injection-horizon sweeps: rerun one edit while a single tau varies."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .errors import ValidationError
from .evaluation import MetricReport, evaluate_edit
from .pipeline import EditJob, edit

TAU_AXES = ("tau_shape", "tau_audio", "tau_temporal")


def run_tau_sweep(
    job: EditJob,
    model,
    sched,
    axis: str,
    values,
    trace_dir=None,
    aperture_target=None,
    face_color=None,
) -> list[tuple[float, MetricReport]]:
    """Edit once per value of `axis`, scoring each result.

    Inversion traces are shared across the sweep (the source clip does not
    change), so each extra value costs only denoising.
    """
    if axis not in TAU_AXES:
        raise ValidationError(f"axis must be one of {TAU_AXES}, got {axis!r}")
    results = []
    for value in values:
        control = replace(job.control, **{axis: float(value)})
        swept = replace(job, control=control)
        out = edit(swept, model, sched, trace_dir=trace_dir)
        target = aperture_target if aperture_target is not None else out.target_aperture
        report = evaluate_edit(
            out.frames, job.source_clip, aperture_target=target, face_color=face_color
        )
        results.append((float(value), report))
    return results


def save_sweep(out_dir, axis: str, results: list[tuple[float, MetricReport]]) -> None:
    """Write sweep artifacts: table.txt, one report per value, and a plot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in results[0][1].items()]
    with open(out_dir / "table.txt", "w") as f:
        f.write("\t".join([axis] + keys) + "\n")
        for value, report in results:
            f.write("\t".join([f"{value:g}"] + [f"{v:.6g}" for _, v in report.items()]) + "\n")
    for value, report in results:
        report.save(out_dir / f"report_{axis}_{value:g}.txt")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [v for v, _ in results]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, key in zip(axes, ("sync_corr", "psnr", "temporal_energy_ratio")):
        ys = [dict(r.items())[key] for _, r in results]
        ax.plot(xs, ys, "o-")
        ax.set_xlabel(axis)
        ax.set_ylabel(key)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "sweep.png", dpi=120)
    plt.close(fig)
