"""Experiment configuration: a flat YAML mapping of typed keys.

Training-loop keys (``batchsize``, ``burn_in_frames``, ``epoch_len_size``
and so on) keep their conventional R2D2-style names and defaults.  Anything not
listed in :data:`SCHEMA` is rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from ..agents import ARCHITECTURES, AgentSpec
from ..engine import GameConfig
from ..errors import ConfigError
from ..evaluation import FewShotConfig
from ..lifelong import ALGORITHMS, LLLConfig
from ..pretrain import PretrainConfig

OUTPUT_ROOT_ENV = "LIFELONG_HANABI_OUT"


@dataclass
class ExperimentConfig:
    # game and global settings
    game: str = "small"
    zero_score_on_lives_exhausted: bool = False
    seed: int = 0
    output_dir: str = ""
    jobs: int = 1

    # pool
    pool_methods: list = field(default_factory=lambda: ["iql"])
    pool_architectures: list = field(default_factory=lambda: ["type1", "type2", "type3", "type4"])
    pool_seeds: list = field(default_factory=lambda: [0, 1])
    card_knowledge: bool = False
    pretrain_budget: int = 30000
    pretrain_learning_rate: float = 3e-4
    pretrain_target_update: int = 500
    pretrain_eps_end: float = 0.01
    pretrain_aux_weight: float = 0.25
    pretrain_num_game_per_thread: int = 32

    # cross-play
    cp_n_games: int = 200

    # continual training
    learner: str = ""
    partners: object = "hard"
    num_tasks: int = 3
    num_heldout: int = 0
    algorithms: list = field(default_factory=lambda: ["naive", "er"])
    continual_seeds: list = field(default_factory=lambda: [0])
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    lr_decay: float = 1.0
    dropout_rate: float = 0.0
    epsilon: float = 0.05
    discount: float = 0.99
    target_update: int = 500
    memory_strategy: str = "surprise"
    per_task_size: int = 2000
    n_games: int = 200
    few_shot_learning_rate: float | None = None  # None: same as learning_rate

    # training-loop keys
    batchsize: int = 32
    max_train_steps: int = 200_000_000
    max_eval_steps: int = 500_000
    burn_in_frames: int = 10000
    eval_burn_in_frames: int = 1000
    replay_buffer_size: int = 32768
    eval_replay_buffer_size: int = 10000
    epoch_len_size: int = 200
    eval_epoch_len_size: int = 50
    eval_freq: int = 25
    num_thread: int = 10
    num_game_per_thread: int = 80
    eval_num_thread: int = 10
    eval_num_game_per_thread: int = 10
    sgd_momentum: float = 0.8
    ewc_lambda: float = 50000.0
    ewc_gamma: float = 1.0
    multitask_replay_buffer_size: int = 163840
    epochs_per_task: int = 10

    def __post_init__(self):
        if self.game not in ("small", "standard"):
            raise ConfigError(f"game must be 'small' or 'standard', not {self.game!r}")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r}")
        for a in self.pool_architectures:
            if a not in ARCHITECTURES:
                raise ConfigError(f"unknown architecture {a!r}")
        if self.epochs_per_task * self.epoch_len_size > self.max_train_steps:
            raise ConfigError("epochs_per_task * epoch_len_size exceeds max_train_steps")
        if self.cp_n_games % 2 or self.n_games % 2:
            raise ConfigError("cp_n_games and n_games must be even (both seat orders are played)")
        if not isinstance(self.partners, (str, list)):
            raise ConfigError("partners must be 'hard', 'easy' or a list of agent ids")
        if isinstance(self.partners, str) and self.partners not in ("hard", "easy"):
            raise ConfigError(f"unknown partner preset {self.partners!r}")
        self.pool_specs()  # validates method tags

    # -- derived objects -------------------------------------------------------

    def game_config(self) -> GameConfig:
        base = GameConfig.small() if self.game == "small" else GameConfig.standard()
        return GameConfig.from_dict({**base.to_dict(), "zero_score_on_lives_exhausted": self.zero_score_on_lives_exhausted})

    def pool_specs(self) -> list[AgentSpec]:
        specs = []
        for method in self.pool_methods:
            for arch in self.pool_architectures:
                for seed in self.pool_seeds:
                    kn = "-kn" if self.card_knowledge else ""
                    specs.append(AgentSpec.parse(f"{method}{kn}-{arch}-s{seed}"))
        return specs

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            budget=self.pretrain_budget,
            batch_size=self.batchsize,
            burn_in_frames=self.burn_in_frames,
            epoch_len=self.epoch_len_size,
            buffer_size=self.replay_buffer_size,
            learning_rate=self.pretrain_learning_rate,
            target_update=self.pretrain_target_update,
            eps_end=self.pretrain_eps_end,
            aux_weight=self.pretrain_aux_weight,
            n_parallel=self.pretrain_num_game_per_thread,
        )

    def lll_config(self, algorithm: str, seed: int) -> LLLConfig:
        return LLLConfig(
            algorithm=algorithm,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            sgd_momentum=self.sgd_momentum,
            dropout_rate=self.dropout_rate,
            batch_size=self.batchsize,
            epochs_per_task=self.epochs_per_task,
            epoch_len=self.epoch_len_size,
            eval_freq=self.eval_freq,
            burn_in_frames=self.burn_in_frames,
            buffer_size=self.replay_buffer_size,
            multitask_buffer_size=self.multitask_replay_buffer_size,
            memory_strategy=self.memory_strategy,
            per_task_size=self.per_task_size,
            ewc_lambda=self.ewc_lambda,
            ewc_gamma=self.ewc_gamma,
            epsilon=self.epsilon,
            target_update=self.target_update,
            discount=self.discount,
            eval_games=self.n_games,
            few_shot_steps=min(self.eval_epoch_len_size, self.max_eval_steps),
            eval_burn_in_frames=self.eval_burn_in_frames,
            eval_buffer_size=self.eval_replay_buffer_size,
            few_shot_lr=self.few_shot_learning_rate,
            seed=seed,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def section_hash(self, *keys: str, upstream: str = "") -> str:
        """Content hash of the named keys plus an upstream phase hash."""
        d = {k: getattr(self, k) for k in keys}
        blob = json.dumps({"keys": d, "upstream": upstream}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


SCHEMA = {f.name: f for f in fields(ExperimentConfig)}

_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "list": list}


def _coerce(name: str, value):
    f = SCHEMA[name]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "object":
        return value
    if kind.endswith(" | None"):
        if value is None:
            return None
        kind = kind.removesuffix(" | None")
    want = _TYPES[kind]
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is bool and not isinstance(value, bool):
        raise ConfigError(f"{name}: expected true/false, got {value!r}")
    if want is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if not isinstance(value, want):
        raise ConfigError(f"{name}: expected {kind}, got {value!r}")
    return value


def config_from_dict(d: dict) -> ExperimentConfig:
    unknown = sorted(set(d) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in d.items()})


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of keys to values")
    return config_from_dict(data)


def few_shot_from(cfg: ExperimentConfig) -> FewShotConfig:
    return cfg.lll_config("naive", cfg.seed).few_shot_config()
