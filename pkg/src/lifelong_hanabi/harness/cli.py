"""Command-line entry point: ``lifelong-hanabi <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..agents import Agent, AgentSpec
from ..evaluation import cross_play_matrix, few_shot_eval, normalize_score, play_match
from ..learner import load_checkpoint, save_checkpoint
from ..lifelong import run_continual, write_history
from ..pretrain import build_pool, load_pool
from ..seeding import derive_seed
from . import run as runmod
from .config import ExperimentConfig, config_from_dict, load_config


def _config(path) -> ExperimentConfig:
    return load_config(path) if path else config_from_dict({})


def _agent(path) -> Agent:
    ck = load_checkpoint(path)
    return Agent.from_checkpoint(ck, Path(path).stem)


def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    specs = cfg.pool_specs()
    if args.specs:
        lines = Path(args.specs).read_text().split()
        specs = [AgentSpec.parse(s) for s in lines if s and not s.startswith("#")]
    pcfg = cfg.pretrain_config()
    if args.budget is not None:
        pcfg.budget = args.budget
    out = Path(args.out_dir or runmod.resolve_output_dir(cfg) / "pool")
    manifest = build_pool(specs, cfg.game_config(), out, pcfg, jobs=args.jobs or cfg.jobs)
    for name, m in manifest["members"].items():
        print(f"{name}\tself-play {m['self_play_mean']:.3f} +- {m['self_play_sem']:.3f}")
    return 0


def cmd_crossplay(args) -> int:
    cfg = _config(args.config)
    pool = load_pool(args.pool)
    cp = cross_play_matrix(pool, args.n_games or cfg.cp_n_games, derive_seed(cfg.seed, "crossplay"))
    out = Path(args.out_dir or args.pool)
    out.mkdir(parents=True, exist_ok=True)
    cp.write_csv(out / "matrix.csv")
    cp.write_csv(out / "sem.csv", value="sem")
    print(f"wrote {out / 'matrix.csv'}")
    return 0


def cmd_continual(args) -> int:
    cfg = _config(args.config)
    learner = _agent(args.learner)
    partners = [_agent(p) for p in args.partners]
    seed = derive_seed(cfg.seed, "continual", args.seed)
    lcfg = cfg.lll_config(args.algo, seed)
    lcfg.optimizer = args.optimizer or lcfg.optimizer
    lcfg.n_parallel = cfg.num_game_per_thread
    lcfg.eval_n_parallel = cfg.eval_num_game_per_thread
    res = run_continual(learner, partners, lcfg)
    out = Path(args.out_dir or runmod.resolve_output_dir(cfg) / "continual" / f"{args.algo}-s{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    cols = [p.name for p in partners]
    runmod._write_matrix(out / "a_zero.csv", res.zero_shot, cols)
    runmod._write_matrix(out / "a_few.csv", res.few_shot, cols)
    write_history(out / "history.jsonl", res.history)
    save_checkpoint(out / "final.ckpt", res.agent.to_checkpoint({"algorithm": args.algo}))
    print(json.dumps(runmod.run_metrics(res.zero_shot), sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    learner = _agent(args.learner)
    fs = cfg.lll_config("naive", cfg.seed).few_shot_config()
    for j, path in enumerate(args.partners):
        p = _agent(path)
        seed = derive_seed(cfg.seed, "eval", j)
        r = play_match(learner, p, args.n_games or cfg.n_games, seed)
        line = f"{p.name}\tzero-shot {r.mean:.3f} +- {r.sem:.3f} ({normalize_score(r.mean, learner.config):.4f})"
        if args.few_shot:
            few = few_shot_eval(learner, p, fs, derive_seed(seed, "few_shot"), r.n_games, seed)
            line += f"\tfew-shot {few:.4f}"
        print(line)
    return 0


def cmd_report(args) -> int:
    out = runmod.report(args.run_dir)
    for rec in out["records"]:
        print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    root = runmod.run(args.config, args.out_dir, force=args.force)
    print(f"artifacts in {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lifelong-hanabi", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a pool of self-play agents")
    p.add_argument("--config")
    p.add_argument("--out-dir")
    p.add_argument("--specs", help="file listing agent ids such as iql-op-type2-s0")
    p.add_argument("--budget", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("crossplay", help="cross-play matrix of a pool")
    p.add_argument("--pool", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir")
    p.add_argument("--n-games", type=int)
    p.set_defaults(fn=cmd_crossplay)

    p = sub.add_parser("continual", help="train a learner sequentially with partners")
    p.add_argument("--learner", required=True)
    p.add_argument("--partners", nargs="+", required=True)
    p.add_argument("--algo", default="naive")
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--config")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_continual)

    p = sub.add_parser("eval", help="zero-shot (and optionally few-shot) scores")
    p.add_argument("--learner", required=True)
    p.add_argument("--partners", nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--n-games", type=int)
    p.add_argument("--few-shot", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="summarize a completed run directory")
    p.add_argument("run_dir")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("run", help="run every phase of an experiment config")
    p.add_argument("config")
    p.add_argument("--out-dir")
    p.add_argument("--force", action="store_true", help="discard existing artifacts first")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="raise", invalid="raise")
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - mapped to exit codes
        code = runmod.exit_code_for(e)
        if code == runmod.EXIT_FAILURE and args.verbose:
            raise
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
