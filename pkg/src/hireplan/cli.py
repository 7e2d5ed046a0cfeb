"""Command-line entry point (``hireplan <command> ...``)."""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import correction
from .agent import Agent, ConfigInvalid, EpisodeConfig, EpisodeRecord, rebuild_map
from .evaluation import (
    EXIT_EMPTY, SuiteSpec, default_suite, format_table, logs_digest, run_benchmark,
    write_outputs,
)
from .sim.scene import SceneProfile

log = logging.getLogger("hireplan")


def _load_config(path):
    """EpisodeConfig from JSON; an optional ``corrector_model`` key names a saved model."""
    if path is None:
        return EpisodeConfig(), None
    with open(path) as fh:
        d = json.load(fh)
    model_path = d.pop("corrector_model", None)
    model = correction.load_model(model_path) if model_path else None
    return EpisodeConfig.from_dict(d), model


def _load_suite(path, n, seed):
    return SuiteSpec.load(path) if path else default_suite(n, seed)


def _dump(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_gen_scenes(args):
    if args.profile:
        with open(args.profile) as fh:
            profile = json.load(fh)
        SceneProfile.from_dict(profile)  # validate early
        suite = default_suite(args.count, args.seed)
        suite.episodes = [replace(e, profile=profile) for e in suite.episodes]
    else:
        suite = default_suite(args.count, args.seed)
    suite.save(args.out)
    if args.scenes_dir:
        os.makedirs(args.scenes_dir, exist_ok=True)
        for spec in suite.episodes:
            scene, task = spec.build()
            _dump({"scene": scene.to_dict(), "task": task.to_dict()},
                  os.path.join(args.scenes_dir, f"{spec.episode_id}.json"))
    print(f"wrote {len(suite.episodes)} episodes to {args.out}")
    return 0


def cmd_dump_map(args):
    """Map from a trajectory log, or from a fresh run of one suite episode."""
    if args.log:
        imap = rebuild_map(EpisodeRecord.read(args.log))
    else:
        if not args.episode:
            print("dump-map needs --log or --episode", file=sys.stderr)
            return 2
        suite = _load_suite(args.suite, args.n, args.seed)
        spec = next((e for e in suite.episodes if e.episode_id == args.episode), None)
        if spec is None:
            print(f"no episode {args.episode!r} in suite", file=sys.stderr)
            return 2
        cfg, model = _load_config(args.config)
        if args.steps:
            cfg = replace(cfg, max_steps=args.steps)
        scene, task = spec.build()
        agent = Agent(scene, task, replace(cfg, seed=cfg.seed + spec.seed), spec.episode_id, model)
        agent.run()
        imap = agent.map
    _dump(imap.to_dict(), args.out)
    return 0


def cmd_gen_dataset(args):
    suite = default_suite(args.n, args.seed)
    eps = []
    for spec in suite.episodes:
        scene, task = spec.build()
        eps.append((spec.episode_id, scene, task, spec.seed))
    records = correction.generate_dataset(eps, perturb_rate=args.perturb_rate,
                                          max_steps=args.max_steps,
                                          keep_fraction=args.keep_fraction)
    correction.save_dataset(records, args.out)
    print(json.dumps({"records": len(records), "labels": correction.class_counts(records)}))
    return 0


def cmd_train_corrector(args):
    records = correction.load_dataset(args.data)
    model, _, held = correction.train_corrector(records, split_seed=args.split_seed)
    correction.save_model(model, args.out)
    report = correction.evaluate_corrector(model, held)
    print(json.dumps({"held_out": report}, indent=1, sort_keys=True))
    return 0


def cmd_eval_corrector(args):
    records = correction.load_dataset(args.data)
    if args.held_out:
        _, records = correction.split_by_episode(records, args.split_seed)
    model = correction.load_model(args.model)
    print(json.dumps(correction.evaluate_corrector(model, records), indent=1, sort_keys=True))
    return 0


def _bench(args, suite):
    cfg, model = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    result = run_benchmark(suite, cfg, workers=args.workers, corrector=model, keep_records=True)
    write_outputs(result, args.out)
    print(format_table(result), end="")
    print(f"logs sha256 {logs_digest(result)}")
    if result.exit_code == EXIT_EMPTY:
        print("empty suite: no episodes were run", file=sys.stderr)
    return result.exit_code


def cmd_run(args):
    return _bench(args, _load_suite(args.suite, args.n, 0))


def cmd_ablation(args):
    levels = [x.strip() for x in args.levels.split(",") if x.strip()]
    bad = [x for x in levels if x not in ("high", "mid", "low")]
    if bad or not levels:
        print(f"--levels takes a comma list of high, mid, low (got {args.levels!r})", file=sys.stderr)
        return 2
    variants = ["full"] + [f"w/o {x}" for x in ("high", "mid", "low") if x in levels]
    if set(levels) == {"high", "mid", "low"}:
        variants.append("all-off")
    suite = _load_suite(args.suite, args.n, 0)
    return _bench(args, SuiteSpec(suite.episodes, variants))


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="hireplan", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="write an episode suite file")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--profile", help="SceneProfile JSON applied to every episode")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes-dir", help="also write each scene and task as JSON here")
    g.set_defaults(fn=cmd_gen_scenes)

    g = sub.add_parser("dump-map", help="dump the instance map of a trajectory log or episode")
    g.add_argument("--log", help="trajectory log (.jsonl) to replay")
    g.add_argument("--suite")
    g.add_argument("--n", type=int, default=200, help="size of the default suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--episode")
    g.add_argument("--config")
    g.add_argument("--steps", type=int, help="stop after this many steps")
    g.add_argument("--out", default="-")
    g.set_defaults(fn=cmd_dump_map)

    g = sub.add_parser("gen-dataset", help="collect relabelled corrector training data")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--perturb-rate", type=float, default=0.3)
    g.add_argument("--max-steps", type=int, default=150)
    g.add_argument("--keep-fraction", type=float, default=0.2,
                   help="share of no-correction steps to keep")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_dataset)

    g = sub.add_parser("train-corrector", help="fit the learned corrector")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--split-seed", type=int, default=0)
    g.set_defaults(fn=cmd_train_corrector)

    g = sub.add_parser("eval-corrector", help="score a saved corrector")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--held-out", action="store_true", help="score only the held-out split")
    g.add_argument("--split-seed", type=int, default=0)
    g.set_defaults(fn=cmd_eval_corrector)

    for name, fn, hint in (("run", cmd_run, "run all variants of a suite"),
                           ("ablation", cmd_ablation, "full agent against level ablations")):
        g = sub.add_parser(name, help=hint)
        g.add_argument("--suite", help="suite file (default: the built-in suite)")
        g.add_argument("--n", type=int, default=200, help="size of the built-in suite")
        g.add_argument("--config", help="EpisodeConfig JSON")
        g.add_argument("--out", required=True)
        g.add_argument("--workers", type=int, default=1)
        g.add_argument("--seed", type=int)
        if name == "ablation":
            g.add_argument("--levels", default="high,mid,low")
        g.set_defaults(fn=fn)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigInvalid, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
