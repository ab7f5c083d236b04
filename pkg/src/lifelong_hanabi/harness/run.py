"""Phase orchestration: pool pre-training, cross-play, continual runs, reports.

Every phase writes into its own directory and finishes by writing a
``phase.json`` stamp holding the phase's content hash and the sha256 of each
artifact.  A rerun skips phases whose stamp matches; a stamp with a different
hash is refused rather than silently overwritten.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
from pathlib import Path

import numpy as np

from .. import __version__
from ..agents import Agent
from ..errors import ConfigError, NumericError
from ..evaluation import (
    CrossPlay,
    average_score,
    cross_play_matrix,
    forgetting,
    future_score,
    gis,
)
from ..learner import save_checkpoint
from ..lifelong import run_continual, write_history
from ..pretrain import build_pool, load_pool
from ..seeding import derive_seed
from .config import OUTPUT_ROOT_ENV, ExperimentConfig, load_config

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_HASH = 4
EXIT_NUMERIC = 5


class MissingArtifact(Exception):
    exit_code = EXIT_MISSING


class HashMismatch(Exception):
    exit_code = EXIT_HASH


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return getattr(exc, "exit_code", EXIT_FAILURE)


def resolve_output_dir(cfg: ExperimentConfig, override=None) -> Path:
    if override:
        return Path(override)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# -- seeds --------------------------------------------------------------------------


def seed_ledger(global_seed: int, cfg: ExperimentConfig | None = None) -> dict:
    """Every seed the run uses, derived from ``global_seed`` along named paths."""
    out = {"global": global_seed, "crossplay": derive_seed(global_seed, "crossplay")}
    if cfg is not None:
        out["pool"] = {s.agent_id: s.seed for s in cfg.pool_specs()}
        out["continual"] = {str(s): derive_seed(global_seed, "continual", s) for s in cfg.continual_seeds}
    return out


# -- phase stamps ---------------------------------------------------------------------


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stamp_ok(d: Path, h: str) -> bool:
    stamp = d / "phase.json"
    if not stamp.exists():
        return False
    info = json.loads(stamp.read_text())
    if info["hash"] != h:
        raise HashMismatch(f"{d} holds artifacts for config hash {info['hash']}, not {h}; use --force or a new output dir")
    return all((d / name).exists() and _sha(d / name) == sha for name, sha in info["files"].items())


def _write_stamp(d: Path, h: str, names: list[str]) -> None:
    info = {"hash": h, "files": {n: _sha(d / n) for n in sorted(names)}}
    (d / "phase.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _write_matrix(path: Path, a: np.ndarray, columns: list[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row"] + columns)
    for t, row in enumerate(a):
        w.writerow([t] + [f"{v:.6f}" for v in row])
    path.write_text(buf.getvalue())


def read_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    rows = list(csv.reader(path.read_text().splitlines()))
    return rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


# -- phases -------------------------------------------------------------------------

POOL_KEYS = (
    "game", "zero_score_on_lives_exhausted", "pool_methods", "pool_architectures", "pool_seeds",
    "card_knowledge", "pretrain_budget", "pretrain_learning_rate", "pretrain_target_update",
    "pretrain_eps_end", "pretrain_aux_weight", "pretrain_num_game_per_thread", "batchsize",
    "burn_in_frames", "epoch_len_size", "replay_buffer_size",
)
CP_KEYS = ("cp_n_games", "seed")
CONTINUAL_KEYS = tuple(
    k for k in ExperimentConfig.__dataclass_fields__
    if k not in POOL_KEYS + CP_KEYS + ("output_dir", "jobs", "algorithms", "continual_seeds")
) + ("seed",)


def phase_pretrain(cfg: ExperimentConfig, root: Path) -> str:
    h = cfg.section_hash(*POOL_KEYS)
    d = root / "pool"
    if d.exists() and _stamp_ok(d, h):
        log.info("pool up to date (%s)", h)
        return h
    jobs = max(1, min(cfg.jobs, cfg.num_thread))
    manifest = build_pool(cfg.pool_specs(), cfg.game_config(), d, cfg.pretrain_config(), jobs=jobs)
    names = ["manifest.json"] + [m["file"] for m in manifest["members"].values()]
    _write_stamp(d, h, names)
    return h


def phase_crossplay(cfg: ExperimentConfig, root: Path, pool_hash: str) -> str:
    h = cfg.section_hash(*CP_KEYS, upstream=pool_hash)
    d = root / "crossplay"
    if d.exists() and _stamp_ok(d, h):
        log.info("cross-play up to date (%s)", h)
        return h
    pool = _load_pool(root)
    d.mkdir(parents=True, exist_ok=True)
    cp = cross_play_matrix(pool, cfg.cp_n_games, derive_seed(cfg.seed, "crossplay"))
    cp.write_csv(d / "matrix.csv")
    cp.write_csv(d / "sem.csv", value="sem")
    _write_stamp(d, h, ["matrix.csv", "sem.csv"])
    return h


def _load_pool(root: Path) -> list[Agent]:
    if not (root / "pool" / "manifest.json").exists():
        raise MissingArtifact(f"no pool under {root}; run the pretrain phase first")
    return load_pool(root / "pool")


def select_agents(cfg: ExperimentConfig, pool: list[Agent], cp_ids: list[str], cp: np.ndarray):
    """Learner, ordered partners and held-out agents for the continual phase.

    ``hard`` picks the pool members the learner cross-plays worst with,
    ``easy`` the best; held-out agents are the next members in pool order
    that are neither learner nor partner.
    """
    by_id = {a.name: a for a in pool}
    learner_id = cfg.learner or pool[0].name
    if learner_id not in by_id:
        raise ConfigError(f"learner {learner_id!r} is not in the pool")
    if isinstance(cfg.partners, list):
        missing = [p for p in cfg.partners if p not in by_id]
        if missing:
            raise ConfigError(f"partners not in the pool: {', '.join(missing)}")
        partner_ids = list(cfg.partners)
    else:
        li = cp_ids.index(learner_id)
        others = [(cp[li, j], k) for j, k in enumerate(cp_ids) if k != learner_id]
        others.sort(key=lambda x: (x[0], x[1]), reverse=cfg.partners == "easy")
        partner_ids = [k for _, k in others[: cfg.num_tasks]]
    if len(partner_ids) < 1:
        raise ConfigError("no partners selected")
    rest = [a.name for a in pool if a.name != learner_id and a.name not in partner_ids]
    heldout_ids = rest[: cfg.num_heldout]
    return by_id[learner_id], [by_id[p] for p in partner_ids], [by_id[h] for h in heldout_ids]


def phase_continual(cfg: ExperimentConfig, root: Path, cp_hash: str) -> dict[str, str]:
    pool = _load_pool(root)
    cp_path = root / "crossplay" / "matrix.csv"
    if not cp_path.exists():
        raise MissingArtifact(f"no cross-play matrix under {root}; run the crossplay phase first")
    ids, cp = CrossPlay.read_csv(cp_path)
    learner, partners, heldout = select_agents(cfg, pool, ids, cp)
    hashes = {}
    for algo in cfg.algorithms:
        for s in cfg.continual_seeds:
            name = f"{algo}-s{s}"
            h = cfg.section_hash(*CONTINUAL_KEYS, upstream=f"{cp_hash}:{name}")
            d = root / "continual" / name
            hashes[name] = h
            if d.exists() and _stamp_ok(d, h):
                log.info("%s up to date (%s)", name, h)
                continue
            d.mkdir(parents=True, exist_ok=True)
            lcfg = cfg.lll_config(algo, derive_seed(cfg.seed, "continual", s))
            lcfg.n_parallel = cfg.num_game_per_thread
            lcfg.eval_n_parallel = cfg.eval_num_game_per_thread
            res = run_continual(learner, partners, lcfg, heldout)
            cols = [p.name for p in partners]
            _write_matrix(d / "a_zero.csv", res.zero_shot, cols)
            _write_matrix(d / "a_few.csv", res.few_shot, cols)
            write_history(d / "history.jsonl", res.history)
            save_checkpoint(d / "final.ckpt", res.agent.to_checkpoint({"algorithm": algo, "continual_seed": s}))
            names = ["a_zero.csv", "a_few.csv", "history.jsonl", "final.ckpt"]
            if res.heldout_zero_shot is not None:
                _write_matrix(d / "heldout.csv", res.heldout_zero_shot, [h.name for h in heldout])
                names.append("heldout.csv")
            _write_stamp(d, h, names)
    return hashes


# -- report ---------------------------------------------------------------------------


def run_metrics(a: np.ndarray) -> dict:
    T = a.shape[1]
    out = {"A_T": average_score(a, T)}
    if T >= 2:
        out["F_T"] = forgetting(a, T)[1]
        out["FT"] = float(np.mean([future_score(a, t, T) for t in range(1, T)]))
    return out


def report(root) -> dict:
    """Summarize every continual run under ``root`` without replaying any games."""
    root = Path(root)
    runs = sorted(p for p in (root / "continual").glob("*") if (p / "phase.json").exists()) if (root / "continual").exists() else []
    if not runs:
        raise MissingArtifact(f"no completed continual runs under {root}")
    records = []
    curves = []
    for d in runs:
        algo, seed = d.name.rsplit("-s", 1)
        rec = {"run": d.name, "algorithm": algo, "seed": int(seed)}
        for mode in ("zero", "few"):
            _, a = read_matrix(d / f"a_{mode}.csv")
            for k, v in run_metrics(a).items():
                rec[f"{mode}_{k}"] = round(v, 12)
        if (d / "heldout.csv").exists():
            _, h = read_matrix(d / "heldout.csv")
            rec["zero_GIS"] = round(gis(h[1], h[0]), 12)
        records.append(rec)
        for line in (d / "history.jsonl").read_text().splitlines():
            curves.append({"run": d.name, **json.loads(line)})

    with (root / "metrics.jsonl").open("w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    keys = sorted({k for r in records for k in r if k not in ("run", "algorithm", "seed")})
    by_algo: dict[str, list[dict]] = {}
    for r in records:
        by_algo.setdefault(r["algorithm"], []).append(r)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algorithm", "n_seeds"] + [f"{k}_{s}" for k in keys for s in ("mean", "sd")])
    for algo in sorted(by_algo):
        rs = by_algo[algo]
        row = [algo, len(rs)]
        for k in keys:
            vals = np.array([r[k] for r in rs if k in r], dtype=float)
            row += [f"{vals.mean():.6f}", f"{vals.std(ddof=1) if len(vals) > 1 else 0.0:.6f}"]
        w.writerow(row)
    (root / "summary.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "task", "epoch", "partner", "zero_shot", "few_shot"])
    for c in curves:
        w.writerow([c["run"], c["task"], c["epoch"], c["partner"], f"{c['zero_shot']:.6f}", f"{c['few_shot']:.6f}"])
    (root / "curves.csv").write_text(buf.getvalue())
    return {"records": records}


# -- full run -------------------------------------------------------------------------


def run(config_path, output_dir=None, force: bool = False, phases=("pretrain", "crossplay", "continual", "report")) -> Path:
    cfg = load_config(config_path)
    root = resolve_output_dir(cfg, output_dir)
    if force and root.exists():
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    ph = {}
    if "pretrain" in phases:
        ph["pretrain"] = phase_pretrain(cfg, root)
    else:
        ph["pretrain"] = cfg.section_hash(*POOL_KEYS)
    if "crossplay" in phases:
        ph["crossplay"] = phase_crossplay(cfg, root, ph["pretrain"])
    else:
        ph["crossplay"] = cfg.section_hash(*CP_KEYS, upstream=ph["pretrain"])
    if "continual" in phases:
        ph["continual"] = phase_continual(cfg, root, ph["crossplay"])
    if "report" in phases:
        report(root)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.section_hash(*sorted(k for k in cfg.to_dict() if k != "output_dir")),
        "code_version": __version__,
        "seeds": seed_ledger(cfg.seed, cfg),
        "phases": ph,
    }
    (root / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root
