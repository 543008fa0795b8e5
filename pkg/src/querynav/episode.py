"""Episode sampling: start pose, goal object, sound schedule, splits, distractors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from querynav.errors import ConfigError, InputError, SamplingError
from querynav.world import NUM_CATEGORIES, Heading, Pose, Scene, SemanticObject

REGIMES = ("heard", "unheard", "unheard+distractor")
DURATION_MEAN = 15.0
DURATION_STD = 9.0
DURATION_MIN = 5
DURATION_MAX = 500
MIN_START_DISTANCE = 4
SIGNATURE_DIM = 16


@dataclass(frozen=True)
class Distractor:
    object_id: int
    onset: int
    duration: int


@dataclass(frozen=True)
class EpisodeSpec:
    scene_seed: int
    start: Pose
    goal_object_id: int
    sound_duration: int
    split: str
    sound_onset: int = 0
    distractor: Distractor | None = None
    target_onehot: tuple[float, ...] | None = None

    def __post_init__(self):
        if not DURATION_MIN <= self.sound_duration <= DURATION_MAX:
            raise InputError(f"sound duration {self.sound_duration} outside [5, 500]")
        if (self.distractor is None) != (self.target_onehot is None):
            raise InputError("target_onehot must be present iff a distractor is")

    def to_dict(self) -> dict:
        d = {
            "scene_seed": self.scene_seed,
            "start": self.start.to_list(),
            "goal_object_id": self.goal_object_id,
            "sound_onset": self.sound_onset,
            "sound_duration": self.sound_duration,
            "split": self.split,
            "distractor": None,
            "target_onehot": None,
        }
        if self.distractor is not None:
            d["distractor"] = {"object_id": self.distractor.object_id,
                               "onset": self.distractor.onset,
                               "duration": self.distractor.duration}
            d["target_onehot"] = list(self.target_onehot)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSpec":
        dis = d.get("distractor")
        return cls(
            scene_seed=int(d["scene_seed"]),
            start=Pose.from_list(d["start"]),
            goal_object_id=int(d["goal_object_id"]),
            sound_duration=int(d["sound_duration"]),
            split=d["split"],
            sound_onset=int(d.get("sound_onset", 0)),
            distractor=None if dis is None else Distractor(
                int(dis["object_id"]), int(dis["onset"]), int(dis["duration"])),
            target_onehot=None if d.get("target_onehot") is None else tuple(
                float(v) for v in d["target_onehot"]),
        )


@dataclass(frozen=True)
class SplitConfig:
    """Category sets per regime plus the per-category timbre vectors.

    ``train_categories`` feed every training episode; ``test_categories`` are
    what a test episode of this split draws its goal from.
    """

    regime: str
    train_categories: tuple[int, ...]
    test_categories: tuple[int, ...]
    category_signatures: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        train, test = set(self.train_categories), set(self.test_categories)
        if self.regime == "heard" and train != test:
            raise ConfigError("heard regime needs identical train/test category sets")
        if self.regime != "heard" and train & test:
            raise ConfigError("unheard regimes need disjoint train/test category sets")

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "train_categories": list(self.train_categories),
            "test_categories": list(self.test_categories),
            "category_signatures": self.category_signatures.round(12).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitConfig":
        return cls(d["regime"], tuple(d["train_categories"]), tuple(d["test_categories"]),
                   np.asarray(d["category_signatures"], dtype=float))


def category_signatures(seed: int, n_categories: int = NUM_CATEGORIES,
                        dim: int = SIGNATURE_DIM) -> np.ndarray:
    """Unit-norm timbre vector per category."""
    rng = np.random.default_rng([seed, 0x516])
    sig = rng.normal(size=(n_categories, dim))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def make_splits(seed: int, n_unheard: int = 5,
                n_categories: int = NUM_CATEGORIES) -> dict[str, SplitConfig]:
    """Heard / unheard / distractor splits sharing one held-out partition."""
    rng = np.random.default_rng([seed, 0x5A1])
    perm = rng.permutation(n_categories)
    held_out = tuple(sorted(int(c) for c in perm[:n_unheard]))
    train = tuple(sorted(int(c) for c in perm[n_unheard:]))
    sigs = category_signatures(seed, n_categories)
    return {
        "heard": SplitConfig("heard", train, train, sigs),
        "unheard": SplitConfig("unheard", train, held_out, sigs),
        "unheard+distractor": SplitConfig("unheard+distractor", train, held_out, sigs),
    }


def sample_duration(rng: np.random.Generator) -> int:
    raw = rng.normal(DURATION_MEAN, DURATION_STD)
    return int(round(min(max(raw, DURATION_MIN), DURATION_MAX)))


def sample_episode(scene: Scene, split_cfg: SplitConfig, regime: str,
                   rng: np.random.Generator, train: bool = False) -> EpisodeSpec:
    """Draw one episode in ``scene``.

    ``train=True`` draws the goal from the training categories regardless of
    regime (distractors are still added for the distractor regime).
    """
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    cats = set(split_cfg.train_categories if train or regime == "heard"
               else split_cfg.test_categories)
    goals = [o for o in scene.objects if o.is_sound_source and o.category in cats]
    if not goals:
        raise SamplingError(f"scene {scene.seed} has no sound source in the {regime} set")
    rng.shuffle(goals)
    for goal in goals:
        dist = scene.distance_field(goal.cell)
        ys, xs = np.nonzero(np.isfinite(dist) & (dist >= MIN_START_DISTANCE))
        if len(xs):
            break
    else:
        raise SamplingError(f"scene {scene.seed} has no start cell >= {MIN_START_DISTANCE} from any goal")
    i = int(rng.integers(len(xs)))
    start = Pose(int(xs[i]), int(ys[i]), Heading(int(rng.integers(4))))
    duration = sample_duration(rng)
    distractor = None
    onehot = None
    if regime == "unheard+distractor":
        others = [o for o in scene.objects
                  if o.is_sound_source and o.category != goal.category]
        if not others:
            raise SamplingError(f"scene {scene.seed} has no distractor candidate")
        d_obj = others[int(rng.integers(len(others)))]
        distractor = Distractor(d_obj.id, 0, sample_duration(rng))
        vec = [0.0] * NUM_CATEGORIES
        vec[goal.category] = 1.0
        onehot = tuple(vec)
    return EpisodeSpec(scene.seed, start, goal.id, duration, regime,
                       distractor=distractor, target_onehot=onehot)


def sample_episode_set(scenes: Sequence[Scene], split_cfg: SplitConfig, regime: str,
                       count: int, seed: int, train: bool = False) -> list[EpisodeSpec]:
    """``count`` episodes spread round-robin over ``scenes``; unusable scenes are skipped."""
    if not scenes:
        raise SamplingError("no scenes to sample from")
    rng = np.random.default_rng([seed, 0xE9])
    out: list[EpisodeSpec] = []
    misses = 0
    i = 0
    while len(out) < count:
        scene = scenes[i % len(scenes)]
        i += 1
        try:
            out.append(sample_episode(scene, split_cfg, regime, rng, train=train))
            misses = 0
        except SamplingError:
            misses += 1
            if misses > len(scenes):
                raise
    return out


def active_sources(spec: EpisodeSpec, t: int,
                   scene: Scene) -> list[tuple[SemanticObject, float]]:
    if t < 0:
        raise InputError("t must be >= 0")
    out = []
    if spec.sound_onset <= t < spec.sound_onset + spec.sound_duration:
        out.append((scene.object_by_id(spec.goal_object_id), 1.0))
    d = spec.distractor
    if d is not None and d.onset <= t < d.onset + d.duration:
        out.append((scene.object_by_id(d.object_id), 1.0))
    return out


def sound_end_step(spec: EpisodeSpec) -> int:
    return spec.sound_onset + spec.sound_duration


def write_episodes(path: str | Path, episodes: Iterable[EpisodeSpec]) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_dict(), separators=(",", ":")) + "\n")


def read_episodes(path: str | Path) -> list[EpisodeSpec]:
    with open(path) as fh:
        return [EpisodeSpec.from_dict(json.loads(line)) for line in fh if line.strip()]
