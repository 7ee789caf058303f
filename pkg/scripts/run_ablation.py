#!/usr/bin/env python3
"""
Run the four-cell training grid and print the degradation table.

Cells: {SFT, zero} init x {constrained, unconstrained} RL. Every trained
policy is evaluated with and without the budget on the same eval scenes;
deltas are taken against its own initial policy evaluated without the budget.

USAGE:
    python scripts/run_ablation.py [--config run.env] [--out output/ablation]
"""
import json
import sys
from dataclasses import replace
from pathlib import Path

import click

sys.path.insert(0, str(Path(__file__).parent.parent))

from config.settings import load_run_config
from src.errors import AllGroupsDegenerate, LabError
from src.eval_harness import degradation_report, emit_report, emit_training_log, evaluate
from src.policy import ArmLayout, LinearSoftmaxPolicy, OraclePolicy, PolicyParams, annotate_trajectory
from src.synthetic_scenes import SceneSet
from src.trainer import rl_train, sft_train
from src.trajectory_pipeline import rejection_sample


def warm_start(config, scene_set):
    dataset = rejection_sample(
        scene_set, OraclePolicy(config.scene_spec), config.episode,
        k=config.sft_samples_per_scene, iou_threshold=config.dedup_iou, seed=config.seed,
    )
    dataset = [annotate_trajectory(t, config.scene_spec) for t in dataset]
    params0 = PolicyParams.zeros(ArmLayout.from_spec(config.scene_spec))
    params, _ = sft_train(params0, dataset, config.sft, seed=config.seed)
    return params


@click.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def main(config_path, out):
    try:
        config = load_run_config(config_path, {"OUTPUT_DIR": out})
    except LabError as e:
        click.echo(click.style(f"ERROR: {e}", fg="red"), err=True)
        sys.exit(1)

    spec = config.scene_spec
    train = SceneSet.from_range(spec, config.train_scene_start, config.train_scenes)
    evaluation = SceneSet.from_range(spec, config.eval_scene_start, config.eval_scenes)
    greedy_eval = replace(config.eval, rollouts_per_query=1)
    out_dir = config.output_dir / "ablation"

    print("=" * 60)
    print("Warm start")
    print("=" * 60)
    inits = {
        "sft": warm_start(config, train),
        "zero": PolicyParams.zeros(ArmLayout.from_spec(spec)),
    }

    rows = []
    for init_name, params0 in inits.items():
        baseline = evaluate(
            LinearSoftmaxPolicy(params0, spec), evaluation, replace(greedy_eval, constrained=False),
            seed=config.seed,
        )
        for constrained in (True, False):
            cell = f"{init_name}_{'constrained' if constrained else 'unconstrained'}"
            print()
            print("=" * 60)
            print(f"RL: {cell}")
            print("=" * 60)
            episode = replace(config.episode, constrained=constrained)
            try:
                params, log = rl_train(params0, train, episode, config.grpo, seed=config.seed,
                                       log_every=config.log_every)
            except AllGroupsDegenerate as e:
                print(f"    skipped: {e}")
                rows.append({"cell": cell, "skipped": True})
                continue
            emit_training_log(log, out_dir / f"{cell}_training_log")

            policy = LinearSoftmaxPolicy(params, spec)
            reports = {}
            for eval_constrained in (True, False):
                report = evaluate(policy, evaluation, replace(greedy_eval, constrained=eval_constrained),
                                  seed=config.seed)
                suffix = "constrained" if eval_constrained else "unconstrained"
                emit_report(report, out_dir / f"{cell}_eval_{suffix}")
                reports[eval_constrained] = report
            deltas = degradation_report(reports[False], reports[True], baseline.accuracy)
            rows.append({
                "cell": cell,
                "baseline": baseline.accuracy,
                "acc_constrained": reports[True].accuracy,
                "acc_unconstrained": reports[False].accuracy,
                "gain": deltas.gain,
                "loss": deltas.loss,
                "all_focus": reports[True].all_focus_ratio,
                "train_tokens": sum(record["visual_tokens"] for record in log),
            })

    print()
    print("=" * 60)
    print(f"{'cell':<22}{'unconstr.':>10}{'constr.':>10}{'gain':>8}{'loss':>8}{'focus':>8}")
    print("-" * 60)
    for row in rows:
        if row.get("skipped"):
            print(f"{row['cell']:<22}{'(degenerate)':>44}")
            continue
        print(
            f"{row['cell']:<22}{row['acc_unconstrained']:>10.3f}{row['acc_constrained']:>10.3f}"
            f"{row['gain']:>+8.3f}{row['loss']:>+8.3f}{row['all_focus']:>8.3f}"
        )
    print("=" * 60)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps(rows, indent=2))
    print(f"Summary: {out_dir / 'summary.json'}")


if __name__ == "__main__":
    main()
