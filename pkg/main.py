#!/usr/bin/env python3
"""
Budgeted Perception Lab

CLI for generating scene sets, training the glimpse policy with SFT and GRPO
under a visual-token budget, and evaluating it constrained and unconstrained.
"""
import functools
import json
import sys
from pathlib import Path

import click

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from config.settings import RunConfig, load_run_config
from src.errors import LabError
from src.eval_harness import budget_sweep, emit_report, emit_sweep, emit_training_log, evaluate
from src.policy import (
    ArmLayout,
    ConstantAnswerPolicy,
    LinearSoftmaxPolicy,
    OraclePolicy,
    PolicyParams,
    annotate_trajectory,
    load_params,
    save_params,
)
from src.rollout_env import trajectory_from_record
from src.synthetic_scenes import SceneSet, read_manifest, write_manifest
from src.trainer import rl_train, save_training_log, sft_train
from src.trajectory_pipeline import (
    RescaleMap,
    dedup_filter,
    difficulty_filter,
    export_trajectories,
    length_filter,
    read_records,
    rejection_sample,
    rescale,
    scene_for_record,
    single_pass_filter,
    validate,
    write_records,
)

POLICY_CHOICES = ["linear", "oracle", "constant"]


def fail(error: Exception):
    """Red message for humans, one JSON record for machines, exit 1."""
    click.echo(click.style(f"\nError: {error}", fg="red"), err=True)
    click.echo(json.dumps({"error": type(error).__name__, "message": str(error)}), err=True)
    sys.exit(1)


def lab_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except LabError as e:
            fail(e)

    return wrapper


def header(text: str):
    click.echo(click.style(f"\n{text}", fg="cyan", bold=True))


def ok(text: str):
    click.echo(f"  {text}: {click.style('OK', fg='green')}")


def train_set(config: RunConfig) -> SceneSet:
    return SceneSet.from_range(config.scene_spec, config.train_scene_start, config.train_scenes)


def eval_set(config: RunConfig) -> SceneSet:
    return SceneSet.from_range(config.scene_spec, config.eval_scene_start, config.eval_scenes)


def scenes_from(config: RunConfig, manifest, default: SceneSet) -> SceneSet:
    return read_manifest(Path(manifest)) if manifest else default


def build_policy(config: RunConfig, kind: str, checkpoint):
    spec = config.scene_spec
    if kind == "oracle":
        return OraclePolicy(spec)
    if kind == "constant":
        return ConstantAnswerPolicy(spec)
    if checkpoint:
        params, _ = load_params(Path(checkpoint))
    else:
        params = PolicyParams.zeros(ArmLayout.from_spec(spec))
    return LinearSoftmaxPolicy(params, spec)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run config file")
@click.option("--seed", type=int, default=None, help="Override SEED")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Override OUTPUT_DIR")
@click.pass_context
def cli(ctx, config_path, seed, out):
    """Budgeted Perception Lab.

    Train a glimpse-and-focus policy under a visual-token budget and measure
    whether it learns to look before it answers.
    """
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = {"SEED": seed, "OUTPUT_DIR": out}


def run_config(ctx, **overrides) -> RunConfig:
    merged = {**ctx.obj["overrides"], **overrides}
    return load_run_config(ctx.obj["config_path"], merged)


@cli.command()
@click.pass_context
@lab_errors
def check(ctx):
    """Check the run configuration."""
    config = run_config(ctx)
    header("Checking configuration...")
    click.echo(f"  Config: {config.source or 'defaults'}")
    click.echo(f"  Scene: {config.scene_spec.canvas}px, {config.scene_spec.grid}x{config.scene_spec.grid} grid, "
               f"{config.scene_spec.num_classes} classes")
    training = config.training_budget()
    click.echo(f"  Training budget: {training if training is not None else 'unconstrained'} "
               f"(glimpse scale {config.overview_scale(training):.3f})")
    click.echo(f"  Eval budget: {config.eval.budget_override} "
               f"(glimpse scale {config.overview_scale(config.eval.budget_override):.3f})")
    click.echo(f"  Output: {config.output_dir}")

    errors = config.validate()
    if errors:
        click.echo(click.style("\nConfiguration problems:", fg="red"))
        for error in errors:
            click.echo(f"  - {error}")
        sys.exit(1)
    click.echo(click.style("\nAll checks passed!", fg="green"))


@cli.command("gen-scenes")
@click.pass_context
@lab_errors
def gen_scenes(ctx):
    """Write train and eval scene manifests."""
    config = run_config(ctx)
    header("Generating scene manifests...")
    scenes_dir = config.output_dir / "scenes"
    for name, scene_set in [("train", train_set(config)), ("eval", eval_set(config))]:
        path = write_manifest(scene_set, scenes_dir / f"{name}.jsonl")
        click.echo(f"  {name}: {len(scene_set)} scenes -> {path}")
    ok("Manifests")


@cli.command()
@click.option("--scenes", type=click.Path(exists=True, dir_okay=False), default=None, help="Scene manifest")
@click.option("--records", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Train on existing conversation records instead of sampling the oracle")
@click.pass_context
@lab_errors
def sft(ctx, scenes, records):
    """Supervised warm start from oracle trajectories."""
    config = run_config(ctx)
    scene_set = scenes_from(config, scenes, train_set(config))
    out_dir = config.output_dir / "sft"

    if records:
        header(f"Rebuilding trajectories from {records}...")
        dataset = [
            trajectory_from_record(record, scene_for_record(record, scene_set), config.episode)
            for record in read_records(Path(records))
        ]
    else:
        header(f"Rejection sampling over {len(scene_set)} scenes...")
        dataset = rejection_sample(
            scene_set, OraclePolicy(config.scene_spec), config.episode,
            k=config.sft_samples_per_scene, iou_threshold=config.dedup_iou,
            seed=config.seed, log_every=config.log_every * 50,
        )
        path = export_trajectories(dataset, out_dir / "records.jsonl", source="oracle")
        click.echo(f"    {len(dataset)} trajectories -> {path}")
    if not dataset:
        raise LabError("No SFT trajectories survived sampling")
    dataset = [annotate_trajectory(t, config.scene_spec) for t in dataset]

    header("Training...")
    params0 = PolicyParams.zeros(ArmLayout.from_spec(config.scene_spec))
    params, losses = sft_train(params0, dataset, config.sft, seed=config.seed, log_every=config.log_every)
    checkpoint = save_params(params, out_dir / "policy.txt", seed=config.seed)
    save_training_log([{"epoch": i, "loss": loss} for i, loss in enumerate(losses)], out_dir / "loss.jsonl")
    click.echo(f"    final loss {losses[-1]:.4f}" if losses else "    no epochs run")
    click.echo(click.style(f"\nCheckpoint: {checkpoint}", fg="green", bold=True))


@cli.command()
@click.option("--init", "init_checkpoint", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Starting checkpoint (zero weights if omitted)")
@click.option("--scenes", type=click.Path(exists=True, dir_okay=False), default=None, help="Scene manifest")
@click.option("--constrained", type=click.BOOL, default=None, help="Train under the budget law")
@click.option("--budget", type=int, default=None, help="Fixed per-view budget during training")
@click.option("--difficulty-filter", "filter_difficulty", is_flag=True, help="Keep only scenes the initial policy solves sometimes")
@click.pass_context
@lab_errors
def rl(ctx, init_checkpoint, scenes, constrained, budget, filter_difficulty):
    """GRPO fine-tuning with dynamic sampling."""
    config = run_config(ctx, CONSTRAINED=constrained, FIXED_BUDGET=budget)
    scene_set = scenes_from(config, scenes, train_set(config))
    policy = build_policy(config, "linear", init_checkpoint)
    out_dir = config.output_dir / "rl"

    if filter_difficulty:
        header("Filtering scenes by difficulty...")
        kept = tuple(
            scene.seed for scene in scene_set
            if difficulty_filter_scene(config, policy, scene)
        )
        click.echo(f"    kept {len(kept)}/{len(scene_set)} scenes")
        if not kept:
            raise LabError("Difficulty filter removed every scene")
        scene_set = SceneSet(spec=scene_set.spec, seeds=kept)

    mode = "constrained" if config.episode.constrained else "unconstrained"
    header(f"RL ({mode}) for {config.grpo.max_steps} steps...")
    params, log = rl_train(
        policy.params, scene_set, config.episode, config.grpo, seed=config.seed, log_every=config.log_every
    )
    checkpoint = save_params(params, out_dir / "policy.txt", seed=config.seed)
    save_training_log(log, out_dir / "training_log.jsonl")
    emit_training_log(log, out_dir / "training_log.csv")
    click.echo(click.style(f"\nCheckpoint: {checkpoint}", fg="green", bold=True))


def difficulty_filter_scene(config: RunConfig, policy, scene) -> bool:
    return difficulty_filter(
        scene.query, scene, policy, config.episode,
        n=config.difficulty_rollouts, band=config.difficulty_band, seed=config.seed,
    )


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--policy", "policy_kind", type=click.Choice(POLICY_CHOICES), default="linear")
@click.option("--scenes", type=click.Path(exists=True, dir_okay=False), default=None, help="Scene manifest")
@click.option("--constrained", type=click.BOOL, default=None, help="Evaluate under the budget")
@click.option("--budget", type=int, default=None, help="Evaluation budget in tokens")
@click.option("--name", default=None, help="Report file stem")
@click.pass_context
@lab_errors
def eval_command(ctx, checkpoint, policy_kind, scenes, constrained, budget, name):
    """Evaluate a policy and write a report."""
    config = run_config(ctx, EVAL_CONSTRAINED=constrained, EVAL_BUDGET=budget)
    scene_set = scenes_from(config, scenes, eval_set(config))
    policy = build_policy(config, policy_kind, checkpoint)

    mode = f"constrained B={config.eval.budget_override}" if config.eval.constrained else "unconstrained"
    header(f"Evaluating {policy_kind} ({mode}) on {len(scene_set)} scenes...")
    report = evaluate(policy, scene_set, config.eval, seed=config.seed, workers=config.grpo.workers)
    stem = name or f"{policy_kind}_{'constrained' if config.eval.constrained else 'unconstrained'}"
    json_path, csv_path = emit_report(report, config.output_dir / "eval" / stem)

    click.echo(f"  Accuracy: {report.accuracy:.3f}")
    click.echo(f"  All Direct / All Focus / Mixed: "
               f"{report.all_direct_ratio:.3f} / {report.all_focus_ratio:.3f} / {report.mixed_ratio:.3f}")
    click.echo(f"  Mean turns: {report.mean_turns:.2f}")
    click.echo(f"  Visual tokens: {report.visual_tokens_total}")
    click.echo(click.style(f"\nReport: {json_path}, {csv_path}", fg="green", bold=True))


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--policy", "policy_kind", type=click.Choice(POLICY_CHOICES), default="linear")
@click.option("--scenes", type=click.Path(exists=True, dir_okay=False), default=None, help="Scene manifest")
@click.pass_context
@lab_errors
def sweep(ctx, checkpoint, policy_kind, scenes):
    """Evaluate one policy under each sweep budget."""
    config = run_config(ctx)
    scene_set = scenes_from(config, scenes, eval_set(config))
    policy = build_policy(config, policy_kind, checkpoint)

    header(f"Sweeping budgets {list(config.eval.budgets_for_sweep)}...")
    results = budget_sweep(policy, scene_set, config.eval, seed=config.seed, workers=config.grpo.workers, log_every=1)
    path = emit_sweep(results, config.output_dir / "eval" / f"{policy_kind}_sweep")
    click.echo(click.style(f"\nSweep: {path}", fg="green", bold=True))


@cli.command("validate")
@click.argument("records", type=click.Path(exists=True, dir_okay=False))
@click.option("--strict", is_flag=True, help="Exit 1 if any record fails")
@lab_errors
def validate_command(records, strict):
    """Run the structural checks over a records file."""
    header(f"Validating {records}...")
    failed = 0
    loaded = read_records(Path(records))
    for index, record in enumerate(loaded):
        report = validate(record)
        if not report.passed:
            failed += 1
            for check_id, message in report.failures:
                click.echo(f"  record {index}: check {check_id}: {message}")
    colour = "green" if failed == 0 else "red"
    click.echo(click.style(f"\n{len(loaded) - failed}/{len(loaded)} records passed", fg=colour))
    if strict and failed:
        sys.exit(1)


@cli.command("rescale")
@click.argument("records", type=click.Path(exists=True, dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--scale", type=float, default=None, help="Uniform scale (default: original -> overview sizes)")
@click.option("--inverse", is_flag=True, help="Map overview coordinates back to the original frame")
@lab_errors
def rescale_command(records, output, scale, inverse):
    """Rescale record coordinates into another frame."""
    rescaled = []
    for record in read_records(Path(records)):
        if scale is not None:
            mapping = RescaleMap(scale, scale)
        else:
            meta = record.get("meta", {})
            if "image_size" not in meta or "overview_size" not in meta:
                raise LabError("Records need meta image_size and overview_size when --scale is not given")
            mapping = RescaleMap.from_sizes(meta["image_size"], meta["overview_size"])
        if inverse:
            mapping = mapping.inverse()
        rescaled.append(rescale(record, mapping))
    path = write_records(rescaled, Path(output))
    click.echo(f"  {len(rescaled)} records -> {path}")


@cli.command("filter")
@click.argument("records", type=click.Path(exists=True, dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--iou", "iou_threshold", type=float, default=0.5, help="Dedup IoU threshold")
@click.option("--max-zoom-turns", type=int, default=3)
@lab_errors
def filter_command(records, output, iou_threshold, max_zoom_turns):
    """Drop single-pass, overlong and redundant records."""
    loaded = read_records(Path(records))
    kept = [
        record for record in loaded
        if single_pass_filter(record)
        and length_filter(record, max_zoom_turns)
        and dedup_filter(record, iou_threshold)
    ]
    path = write_records(kept, Path(output))
    click.echo(f"  kept {len(kept)}/{len(loaded)} records -> {path}")


if __name__ == "__main__":
    cli()
