"""``querynav`` command line: scene generation, training, evaluation and log replay."""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click

from querynav.config import RunConfig, dump_config, load_config
from querynav.episode import make_splits
from querynav.errors import ConfigError, InputError, QueryNavError, ScheduleError
from querynav.eval import (EvalPlan, agents_for_regimes, evaluate_plan, read_episode_log,
                           replay_episode)
from querynav.train import PHASES, build_scenes, load_artifacts, scene_seeds, training_schedule
from querynav.world import SceneParams, generate_scene

log = logging.getLogger("querynav")


def _overrides(seed, regime, trigger, feedback, k_allowed, nu=None) -> dict[str, str]:
    out = {}
    if seed is not None:
        out["seed"] = str(seed)
    if regime:
        out["regimes"] = regime
    if trigger:
        out["methods"] = trigger
    if feedback:
        out["feedbacks"] = feedback
    if k_allowed is not None:
        out["k_allowed"] = str(k_allowed)
    if nu is not None:
        out["nu"] = str(nu)
    return out


def _config(ctx: click.Context, **flags) -> RunConfig:
    return load_config(ctx.obj.get("config"), _overrides(**flags))


def _fail(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}, sort_keys=True) + "\n")
    sys.exit(code)


seed_opt = click.option("--seed", type=int, default=None, help="Master seed.")
out_opt = click.option("--out", type=click.Path(file_okay=False), required=True,
                       help="Output directory.")


@click.group()
@click.option("--config", type=click.Path(dir_okay=False), default=None,
              help="key = value config file; flags override it.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx: click.Context, config, verbose):
    ctx.ensure_object(dict)
    ctx.obj["config"] = config
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)


@main.command("gen-scenes")
@click.option("-n", "--count", type=int, required=True, help="Number of scenes.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test",
              help="Which scene-seed range to draw from.")
@seed_opt
@out_opt
@click.pass_context
def gen_scenes(ctx, count, split, seed, out):
    """Write COUNT scene JSON files plus the split manifest."""
    cfg = _config(ctx, seed=seed, regime=None, trigger=None, feedback=None, k_allowed=None)
    if count < 1:
        raise ConfigError("scene count must be >= 1")
    params: SceneParams = cfg.train.scene_params()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    seeds = scene_seeds(replace(cfg.train, **{f"n_{split}_scenes": count}), split)
    for i, scene_seed in enumerate(seeds):
        scene = generate_scene(scene_seed, params)
        name = f"scene_{i:04d}.json"
        (out / name).write_text(scene.to_json())
        names.append(name)
    manifest = {"seed": cfg.train.seed, "split": split, "scene_params": asdict(params),
                "scenes": names, "scene_seeds": seeds,
                "splits": {r: s.to_dict() for r, s in make_splits(cfg.train.seed).items()}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    click.echo(f"wrote {count} scenes to {out}")


@main.command()
@click.option("--phases", default=None, help=f"Comma-separated subset of {','.join(PHASES)}.")
@seed_opt
@click.option("--nu", type=int, default=None, help="Language option length.")
@out_opt
@click.pass_context
def train(ctx, phases, seed, nu, out):
    """Run the training schedule, resuming from checkpoints in OUT."""
    cfg = _config(ctx, seed=seed, regime=None, trigger=None, feedback=None, k_allowed=None, nu=nu)
    wanted = [p.strip() for p in phases.split(",") if p.strip()] if phases else None
    if wanted is not None:
        unknown = [p for p in wanted if p not in PHASES]
        if unknown or not wanted:
            raise ScheduleError(f"unknown phase {', '.join(unknown) or '(empty)'}")
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "run_config.txt").write_text(dump_config(cfg))
    training_schedule(cfg.train, out, wanted, progress=lambda m: click.echo(m, err=True))
    click.echo(f"checkpoints in {out}")


@main.command("eval")
@click.option("--checkpoints", type=click.Path(file_okay=False), required=True)
@seed_opt
@click.option("--regime", default=None, help="Comma-separated regimes.")
@click.option("--trigger", default=None, help="Comma-separated trigger methods.")
@click.option("--feedback", default=None, help="Comma-separated feedback modes.")
@click.option("--k-allowed", type=int, default=None)
@click.option("--episodes", type=int, default=None, help="Episodes per setting and seed.")
@out_opt
@click.pass_context
def eval_cmd(ctx, checkpoints, seed, regime, trigger, feedback, k_allowed, episodes, out):
    """Evaluate trained checkpoints on the fixed test episodes."""
    cfg = _config(ctx, seed=seed, regime=regime, trigger=trigger, feedback=feedback,
                  k_allowed=k_allowed)
    if episodes is not None:
        cfg.eval_episodes = episodes
        cfg.validate()
    artifacts = load_artifacts(checkpoints)
    agents = agents_for_regimes(artifacts, cfg.train.seed, cfg.train.audio())
    plan: EvalPlan = cfg.eval_plan()
    if regime or trigger or feedback or k_allowed is not None:
        # an explicit selection evaluates just that grid, without the budget sweep
        plan.sweep_k = ()
    report = evaluate_plan(agents, build_scenes(cfg.train, "test"), plan, cfg.train.speaker(), out,
                           split_seed=cfg.train.seed)
    click.echo(f"{len(report['main'])} rows written to {out}")


@main.command()
@click.argument("log_file", type=click.Path(dir_okay=False, exists=True))
@seed_opt
@click.option("--episode", type=int, default=None, help="Replay a single episode index.")
@click.pass_context
def replay(ctx, log_file, seed, episode):
    """Re-execute logged actions and check them against the logged summaries."""
    cfg = _config(ctx, seed=seed, regime=None, trigger=None, feedback=None, k_allowed=None)
    scenes = {s.seed: s for s in build_scenes(cfg.train, "test")}
    episodes = read_episode_log(log_file)
    if episode is not None:
        if not 0 <= episode < len(episodes):
            raise InputError(f"episode {episode} not in log ({len(episodes)} episodes)")
        episodes = [episodes[episode]]
    mismatched = 0
    for ep in episodes:
        scene_seed = ep["header"]["spec"]["scene_seed"]
        if scene_seed not in scenes:
            raise InputError(f"log references scene {scene_seed} outside the test set")
        got = replay_episode(scenes[scene_seed], ep)
        s = ep["summary"]
        ok = (got["success"] == s["success"] and got["path_len"] == s["path_len"]
              and got["queries"] == s["queries"])
        mismatched += not ok
        click.echo(json.dumps({"episode": ep["header"]["episode"], "match": ok, **got},
                              sort_keys=True))
    if mismatched:
        raise InputError(f"{mismatched} episode(s) did not reproduce their summary")


def run(argv=None) -> None:
    """Console entry point; every failure ends with an error JSON line on stderr."""
    try:
        main.main(args=argv, prog_name="querynav", standalone_mode=False)
    except QueryNavError as exc:
        _fail(exc.kind, str(exc), 1)
    except click.exceptions.Abort:
        _fail("aborted", "interrupted", 130)
    except click.ClickException as exc:
        _fail("usage_error", exc.format_message(), 2)
    except OSError as exc:
        _fail("io_error", f"{exc.strerror}: {exc.filename}", 1)
    sys.exit(0)


if __name__ == "__main__":
    run()
