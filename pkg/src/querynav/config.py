"""Plain-text ``key = value`` run configuration.

One key per line, ``#`` starts a comment. Keys are the training fields plus a
small set of evaluation keys; anything else is rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from querynav.episode import REGIMES
from querynav.errors import ConfigError
from querynav.eval import FEEDBACKS, METHODS, EvalPlan
from querynav.train import TrainConfig


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_episodes: int = 200
    eval_seeds: tuple[int, ...] = (0, 1, 2)
    k_allowed: int = 3
    regimes: tuple[str, ...] = REGIMES
    methods: tuple[str, ...] = METHODS
    feedbacks: tuple[str, ...] = FEEDBACKS
    sweep_k: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    write_logs: bool = True

    def validate(self) -> "RunConfig":
        for r in self.regimes:
            if r not in REGIMES:
                raise ConfigError(f"unknown regime {r!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown trigger {m!r}")
        for f in self.feedbacks:
            if f not in FEEDBACKS:
                raise ConfigError(f"unknown feedback {f!r}")
        if self.k_allowed < 0 or any(k < 0 for k in self.sweep_k):
            raise ConfigError("query budgets must be >= 0")
        if self.eval_episodes < 1 or not self.eval_seeds:
            raise ConfigError("need at least one evaluation episode and seed")
        t = self.train
        if not 8 <= t.scene_width <= 64 or not 8 <= t.scene_height <= 64:
            raise ConfigError("scene sides must lie in [8, 64]")
        t.optim()  # range checks
        return self

    def eval_plan(self) -> EvalPlan:
        return EvalPlan(regimes=self.regimes, methods=self.methods, feedbacks=self.feedbacks,
                        seeds=self.eval_seeds, episodes=self.eval_episodes,
                        k_allowed=self.k_allowed, sweep_k=self.sweep_k,
                        sweep_methods=self.methods, max_steps=self.train.max_steps,
                        write_logs=self.write_logs)


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "train"}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(v) for v in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def apply_overrides(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    for key, raw in values.items():
        if key in _TRAIN_FIELDS:
            setattr(cfg.train, key, _coerce(raw, getattr(cfg.train, key), key))
        elif key in _RUN_FIELDS:
            setattr(cfg, key, _coerce(raw, getattr(cfg, key), key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        apply_overrides(cfg, parse_config_text(text))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in _TRAIN_FIELDS:
        lines.append(f"{name} = {getattr(cfg.train, name)}")
    for name in _RUN_FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"
