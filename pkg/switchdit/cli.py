"""
Command Line Interface for switchdit.
"""

import logging
import sys
from pathlib import Path
from typing import List, Optional

import click
import typer
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, TextColumn, TimeRemainingColumn
from rich.table import Table

from .analysis import denoising_paths, match_report, shared_summary, stabilization_step
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ABLATIONS,
    AppSettings,
    RunConfig,
    apply_ablation,
    default_ini,
    load_run_config,
    update_train_config,
)
from .datasets import gen_dataset
from .errors import ConfigError, MissingCheckpointError, SwitchDiTError
from .export import (
    image_grid,
    provenance_lines,
    render_routing_png,
    write_csv,
    write_json,
    write_map_csv,
    write_map_pgm,
    write_pgm,
)
from .gating import stacked_routing
from .matching import Assignment, permute_probs
from .prior import build_prior_mask, mask_summary, random_allocation_mask
from .sampling import eval_mmd, mmd_permutation_threshold, sample
from .schedule import cosine_alphabar
from .trainer import Trainer, training_prior

try:
    # recent typer releases raise from their own bundled copy of click
    from typer._click import exceptions as _bundled_click
except ImportError:
    _bundled_click = click.exceptions

EXIT_ERRORS = (click.exceptions.Exit, _bundled_click.Exit)
USAGE_ERRORS = (click.UsageError, _bundled_click.UsageError)
ABORT_ERRORS = (click.Abort, _bundled_click.Abort)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
CHECKPOINT_NAME = "checkpoint.ckpt"

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="switchdit",
    help="Switch-DiT: diffusion transformers with timestep-gated sparse experts.",
    epilog="\b\nDefault configuration (INI file < SWITCHDIT_OUT_DIR < flags):\n\n" + default_ini(),
    add_completion=False,
    rich_markup_mode=None,
)

console = Console()


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


@app.callback()
def main_options(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", help="INI config file"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override train and sample seeds"),
    out_dir: Optional[Path] = typer.Option(None, "--out-dir", help="Artifact directory"),
    ablation: Optional[str] = typer.Option(
        None, "--ablation", help=f"Ablation preset: {', '.join(ABLATIONS)}"
    ),
    log_level: Optional[str] = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING, ERROR"),
):
    """Global options shared by every command."""
    settings = AppSettings()
    configure_logging(log_level or settings.log_level)
    run = load_run_config(config, settings)
    train = apply_ablation(run.train, ablation)
    sample_cfg = run.sample
    if seed is not None:
        train = update_train_config(train, seed=seed)
        sample_cfg = sample_cfg.model_copy(update={"seed": seed})
    ctx.obj = RunConfig(train=train, sample=sample_cfg, out_dir=out_dir or run.out_dir)


def _run(ctx: typer.Context) -> RunConfig:
    return ctx.obj


def _checkpoint_path(run: RunConfig, checkpoint: Optional[Path]) -> Path:
    return checkpoint if checkpoint is not None else run.out_dir / CHECKPOINT_NAME


def _summary_table(title: str, rows: dict) -> Table:
    table = Table(title=title)
    table.add_column("Quantity", style="cyan", no_wrap=True)
    table.add_column("Value", style="green")
    for key, value in rows.items():
        table.add_row(key, str(value))
    return table


@app.command()
def train(
    ctx: typer.Context,
    steps: Optional[int] = typer.Option(None, "--steps", help="Total optimizer steps"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Continue from a checkpoint"),
    mmd_every: int = typer.Option(0, "--mmd-every", help="Sample MMD every N steps (0 = never)"),
):
    """Train a model and write checkpoint + metrics CSV."""
    run = _run(ctx)
    cfg = run.train if steps is None else update_train_config(run.train, steps=steps)
    out = Path(run.out_dir)
    metrics_path = out / "metrics.csv"
    if resume is not None:
        ckpt = load_checkpoint(resume)
        trainer = Trainer.from_checkpoint(ckpt)
        target = cfg.steps if steps is not None else ckpt.config.steps
    else:
        trainer = Trainer(cfg)
        target = cfg.steps
        if metrics_path.exists():
            metrics_path.unlink()

    console.print(
        Panel.fit(
            f"[bold]dataset[/bold] {trainer.cfg.dataset}  [bold]integration[/bold] "
            f"{trainer.cfg.model.integration.value}  [bold]lambda_dp[/bold] {trainer.cfg.lambda_dp}\n"
            f"[dim]{trainer.model.num_parameters()} parameters, steps {trainer.step} -> {target}[/dim]",
            title="switchdit train",
            border_style="bright_green",
        )
    )
    with Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        TimeRemainingColumn(),
        console=console,
    ) as progress:
        task = progress.add_task("training", total=target, completed=trainer.step)
        metrics = trainer.fit(target, metrics_path, mmd_every=mmd_every, callback=lambda _: progress.advance(task))

    save_checkpoint(out / CHECKPOINT_NAME, trainer)
    if len(metrics):
        last = metrics.iloc[-1]
        console.print(
            _summary_table(
                "Final step",
                {
                    "step": int(last["step"]),
                    "loss_noise": f"{last['loss_noise']:.6f}",
                    "loss_dp": last["loss_dp"],
                    "match_cost": last["match_cost"],
                    "checkpoint": out / CHECKPOINT_NAME,
                    "metrics": metrics_path,
                },
            )
        )


@app.command("sample")
def sample_cmd(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", "-c", help="Checkpoint to sample from"),
    num_samples: Optional[int] = typer.Option(None, "--num-samples", "-n", help="Images to generate"),
    steps: Optional[int] = typer.Option(None, "--steps", help="Sampling steps (clipped to T)"),
    guidance: Optional[float] = typer.Option(None, "--guidance", help="Classifier-free guidance scale"),
    label: Optional[int] = typer.Option(None, "--label", help="Class label"),
    online: bool = typer.Option(False, "--online", help="Use online instead of EMA parameters"),
):
    """Generate images with the EMA model and write them as a PGM grid."""
    run = _run(ctx)
    ckpt = load_checkpoint(_checkpoint_path(run, checkpoint))
    sc = run.sample
    model = ckpt.build_model(use_ema=not online)
    schedule = cosine_alphabar(ckpt.config.schedule.timesteps, ckpt.config.schedule.cosine_s)
    images = sample(
        model,
        schedule,
        num_samples or sc.num_samples,
        steps or sc.steps,
        guidance=guidance if guidance is not None else sc.guidance,
        y=label if label is not None else sc.label,
        seed=sc.seed,
    )
    path = write_pgm(
        Path(run.out_dir) / "samples.pgm",
        image_grid(images),
        provenance_lines(ckpt.config) + [f"sample {sc.model_dump_json()}"],
        lo=-1.0,
        hi=1.0,
    )
    console.print(f"[green]Wrote {len(images)} samples to {path}[/green]")


def _routing_model(ckpt, use_ema: bool):
    model = ckpt.build_model(use_ema=use_ema)
    if model.gating is None:
        raise ConfigError("the plain DiT baseline has no routing to inspect")
    return model


@app.command("inspect-routing")
def inspect_routing(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", "-c", help="Checkpoint to inspect"),
    ema: bool = typer.Option(False, "--ema", help="Inspect the EMA parameters"),
    png: bool = typer.Option(False, "--png", help="Also render a PNG heatmap"),
):
    """Export stacked gate/prior activation maps and the denoising-path summary."""
    run = _run(ctx)
    ckpt = load_checkpoint(_checkpoint_path(run, checkpoint))
    cfg = ckpt.config
    m = cfg.model
    model = _routing_model(ckpt, ema)
    P_tot, W_gate = stacked_routing(model)
    out = Path(run.out_dir)
    write_map_pgm(out / "gate_map.pgm", W_gate, cfg)
    write_map_csv(out / "gate_map.csv", W_gate, cfg)
    payload = {
        "paths": denoising_paths(W_gate, m.depth, m.num_experts),
        "gate_shared": shared_summary(W_gate, m.depth, m.num_experts, m.top_k),
        "p_tot": P_tot.tolist(),
    }
    prior = training_prior(cfg)
    if prior is not None:
        report = match_report(model, prior, cfg.normalize_prior, cfg.random_allocation, cfg.project_prior)

        aligned = permute_probs(W_gate, Assignment(report["assignment"]["perm"]))
        write_map_pgm(out / "gate_map_aligned.pgm", aligned, cfg, note="gate columns moved to matched prior columns")
        write_map_pgm(out / "prior_map.pgm", prior.rows, cfg, note=f"prior kind {prior.kind}")
        write_map_csv(out / "prior_map.csv", prior.rows, cfg)
        payload["assignment"] = report["assignment"]
        payload["prior_hamming"] = report["prior_hamming"]
        if png:
            render_routing_png(out / "routing.png", [("gate (aligned)", aligned), ("prior", prior.rows)])
    elif png:
        render_routing_png(out / "routing.png", [("gate", W_gate)])
    write_json(out / "routing.json", payload, cfg)

    table = Table(title="Denoising paths")
    table.add_column("Block", style="cyan")
    for t in payload["paths"]["timesteps"]:
        table.add_column(f"t={t}", style="magenta")
    table.add_column("Shared (all t)", style="green")
    for block in payload["paths"]["blocks"]:
        table.add_row(
            str(block["block"]),
            *(str(s) for s in block["selected"].values()),
            str(block["shared_all_timesteps"]),
        )
    console.print(table)


@app.command("match-debug")
def match_debug(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", "-c", help="Checkpoint to inspect"),
):
    """Dump the matching cost matrix, permutation and per-timestep L_dp."""
    run = _run(ctx)
    ckpt = load_checkpoint(_checkpoint_path(run, checkpoint))
    cfg = ckpt.config
    model = _routing_model(ckpt, use_ema=False)
    prior = training_prior(cfg)
    if prior is None:
        raise ConfigError("matching needs top_k < num_experts")
    report = match_report(model, prior, cfg.normalize_prior, cfg.random_allocation, cfg.project_prior)
    write_json(Path(run.out_dir) / "match_debug.json", report, cfg)
    console.print(
        _summary_table(
            "Matching",
            {
                "cost": report["assignment"]["cost"],
                "perm": report["assignment"]["perm"],
                "mean L_dp": f"{report['loss_dp_mean']:.6f}",
                "prior hamming": report["prior_hamming"],
            },
        )
    )


@app.command("eval")
def eval_cmd(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", "-c", help="Checkpoint to evaluate"),
    num_samples: Optional[int] = typer.Option(None, "--num-samples", "-n", help="Samples per side"),
    n_perm: int = typer.Option(200, "--n-perm", help="Permutations for the null threshold"),
):
    """Sample MMD^2 against held-out data, with a permutation-test threshold."""
    run = _run(ctx)
    ckpt = load_checkpoint(_checkpoint_path(run, checkpoint))
    cfg, sc = ckpt.config, run.sample
    n = num_samples or sc.num_samples
    model = ckpt.build_model(use_ema=True)
    schedule = cosine_alphabar(cfg.schedule.timesteps, cfg.schedule.cosine_s)
    guidance = sc.guidance if model.conditional else 1.0
    samples = sample(model, schedule, n, sc.steps, guidance=guidance, seed=sc.seed)
    heldout = gen_dataset(cfg.dataset, n, cfg.data_seed + 1, cfg.model.image_size, cfg.model.channels).images
    mmd = eval_mmd(samples, heldout)
    threshold = mmd_permutation_threshold(samples, heldout, n_perm=n_perm, seed=sc.seed)
    payload = {"mmd2": mmd, "threshold_95": threshold, "passed": bool(mmd <= threshold), "num_samples": n}
    write_json(Path(run.out_dir) / "eval.json", payload, cfg)
    console.print(_summary_table("Evaluation", payload))


@app.command("prior")
def prior_cmd(
    ctx: typer.Context,
    blocks: Optional[int] = typer.Option(None, "--blocks", help="Blocks N (default: model depth)"),
    experts: Optional[int] = typer.Option(None, "--experts", help="Experts per block M"),
    top_k: Optional[int] = typer.Option(None, "--top-k", help="Selected experts k"),
    timesteps: Optional[int] = typer.Option(None, "--timesteps", help="Timesteps T"),
    alpha: Optional[float] = typer.Option(None, "--alpha", help="Prior exponent"),
    random: bool = typer.Option(False, "--random", help="Random-allocation baseline instead"),
):
    """Export a prior activation map as CSV + PGM."""
    run = _run(ctx)
    cfg = run.train
    N = blocks or cfg.model.depth
    M = experts or cfg.model.num_experts
    k = top_k or cfg.model.top_k
    T = timesteps or cfg.schedule.timesteps
    a = alpha if alpha is not None else cfg.prior_alpha
    mask = random_allocation_mask(N, M, k, T, cfg.seed, a) if random else build_prior_mask(N, M, k, T, a)
    shared, bound = mask_summary(mask)
    out = Path(run.out_dir)
    description = {"N": N, "M": M, "k": k, "T": T, "alpha": a, "kind": mask.kind}
    write_map_csv(out / "prior.csv", mask.rows, description)
    write_map_pgm(out / "prior.pgm", mask.rows, description)
    write_json(
        out / "prior.json",
        {"shared_columns": shared, "lower_bound": bound, "surplus": mask.deltas().tolist()},
        description,
    )
    console.print(_summary_table("Prior", {**description, "shared columns": shared, "lower bound": bound}))


@app.command("sweep-lambda")
def sweep_lambda(
    ctx: typer.Context,
    lambdas: str = typer.Option("1,0.1", "--lambdas", help="Comma-separated lambda_dp values"),
    steps: Optional[int] = typer.Option(None, "--steps", help="Steps per run"),
    window: int = typer.Option(200, "--window", help="Unchanged steps that count as stable"),
):
    """Train one run per lambda_dp and report when each routing map stabilizes."""
    run = _run(ctx)
    try:
        values = [float(v) for v in lambdas.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--lambdas must be comma-separated numbers, got '{lambdas}'") from None
    out = Path(run.out_dir)
    results = []
    for lam in values:
        cfg = update_train_config(run.train, lambda_dp=lam, **({"steps": steps} if steps else {}))
        trainer = Trainer(cfg)
        metrics = trainer.fit()
        write_csv(out / f"sweep_lambda_{lam:g}.csv", metrics, cfg)
        stable = stabilization_step(metrics, window)
        results.append(
            {
                "lambda_dp": lam,
                "stabilization_step": stable,
                "final_loss_dp": None if metrics["loss_dp"].isna().all() else float(metrics["loss_dp"].iloc[-1]),
                "prior_hamming": trainer.prior_distance(),
            }
        )
        logger.info(f"lambda_dp={lam:g}: stabilized at {stable}")
    write_json(out / "sweep.json", {"window": window, "results": results}, run.train)
    console.print(_summary_table("Stabilization step", {f"lambda_dp={r['lambda_dp']:g}": r["stabilization_step"] for r in results}))


@app.command("defaults")
def defaults():
    """Print the documented default configuration as INI."""
    console.print(default_ini(), markup=False, highlight=False)


def run(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map outcomes to exit codes: 0 ok, 1 usage/config, 2 runtime."""
    try:
        result = app(args=argv, prog_name="switchdit", standalone_mode=False)
        return result if isinstance(result, int) else 0
    except EXIT_ERRORS as exc:
        return exc.exit_code
    except USAGE_ERRORS as exc:
        exc.show()
        return 1
    except ABORT_ERRORS:
        console.print("[yellow]Aborted[/yellow]")
        return 1
    except (ConfigError, MissingCheckpointError) as exc:
        console.print(f"[red]Error: {exc}[/red]")
        return 1
    except SwitchDiTError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        console.print(f"[red]Error: {exc}[/red]")
        return 2
    except Exception as exc:
        logger.error(f"Unexpected {type(exc).__name__}: {exc}", exc_info=logger.isEnabledFor(logging.DEBUG))
        console.print(f"[red]Error: {type(exc).__name__}: {exc}[/red]")
        return 2


def main() -> None:
    sys.exit(run())
