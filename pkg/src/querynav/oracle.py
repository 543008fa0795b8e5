"""The oracle: shortest-path segments spoken through a noisy template grammar.

Each maximal run of identical actions becomes one clause, e.g.
``[F, F, R, F] -> "walk forward two steps turn right walk forward"``. Noise
comes from synonym choice, optional joiners, grounding phrases that name a
traversed room or a nearby object, and per-clause dropout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from querynav.errors import InputError, ParseError
from querynav.world import (
    CATEGORY_NAMES, HALLWAY, HEADING_VECTORS, ROOM_TYPES, Action, Pose, Scene,
    shortest_action_path, step,
)

SEGMENT_LENGTH = 4
OPTION_STEPS = 3
MAX_TOKENS = 12

PAD, UNK = "<pad>", "<unk>"

CLAUSE_PHRASES: dict[Action, tuple[tuple[str, ...], ...]] = {
    Action.FORWARD: (("walk", "forward"), ("go", "straight"), ("move", "ahead"),
                     ("head", "forward"), ("continue", "straight")),
    Action.TURN_LEFT: (("turn", "left"), ("go", "left"), ("bear", "left")),
    Action.TURN_RIGHT: (("turn", "right"), ("go", "right"), ("bear", "right")),
    Action.STOP: (("stop",), ("wait", "there")),
}
FORWARD_COUNTS = {2: (("two", "steps"), ("twice",)), 3: (("three", "steps"),),
                  4: (("four", "steps"),)}
TURN_COUNTS = {2: (("twice",), ("two", "times")), 3: (("three", "times"),),
               4: (("four", "times"),)}
JOINERS = (("and",), ("then",), ("and", "then"))
ROOM_PREPS = (("through", "the"), ("into", "the"))
HALL_PREPS = (("down", "the"), ("along", "the"))
OBJECT_PREPS = (("past", "the"), ("by", "the"))

COUNT_WORDS = {("two", "steps"): 2, ("twice",): 2, ("three", "steps"): 3, ("four", "steps"): 4,
               ("two", "times"): 2, ("three", "times"): 3, ("four", "times"): 4}


def grammar_words() -> list[str]:
    words: set[str] = set()
    for table in (CLAUSE_PHRASES.values(), FORWARD_COUNTS.values(), TURN_COUNTS.values()):
        for phrases in table:
            for p in phrases:
                words.update(p)
    for phrases in (JOINERS, ROOM_PREPS, HALL_PREPS, OBJECT_PREPS):
        for p in phrases:
            words.update(p)
    words.update(ROOM_TYPES)
    words.update(CATEGORY_NAMES)
    return sorted(words)


class Vocabulary:
    """Dense token ids; 0 is padding, 1 is unknown."""

    def __init__(self, words: Sequence[str]):
        self.words = [PAD, UNK] + [w for w in words if w not in (PAD, UNK)]
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise InputError("duplicate vocabulary entries")

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(grammar_words())

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(w, 1) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.words))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        words = json.loads(Path(path).read_text())
        if words[:2] != [PAD, UNK]:
            raise InputError("vocabulary file must start with the pad and unk tokens")
        return cls(words[2:])


@dataclass(frozen=True)
class Instruction:
    tokens: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) > MAX_TOKENS:
            raise InputError(f"instruction longer than {MAX_TOKENS} tokens")

    def text(self, vocab: Vocabulary) -> str:
        return " ".join(vocab.decode(self.tokens))


@dataclass(frozen=True)
class SpeakerConfig:
    p_land: float = 0.3
    p_drop: float = 0.1
    p_join: float = 0.3
    synonyms: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("p_land", "p_drop", "p_join"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"p_land": self.p_land, "p_drop": self.p_drop, "p_join": self.p_join,
                "synonyms": self.synonyms, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerConfig":
        return cls(**d)


NOISELESS = SpeakerConfig(p_land=0.0, p_drop=0.0, p_join=0.0, synonyms=False)


@dataclass(frozen=True)
class Segment:
    steps: tuple[tuple[Pose, Action], ...]

    @property
    def actions(self) -> list[Action]:
        return [a for _, a in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class LanguageFeedback:
    instruction: Instruction


@dataclass(frozen=True)
class GtActionsFeedback:
    actions: tuple[Action, ...]


Feedback = Union[LanguageFeedback, GtActionsFeedback]


def extract_segment(scene: Scene, pose: Pose, goal: tuple[int, int],
                    n: int = SEGMENT_LENGTH) -> Segment:
    """First ``n`` (pose, action) pairs of the shortest path; empty when already at ``goal``."""
    if n < 1:
        raise InputError("segment length must be >= 1")
    steps = []
    for action in shortest_action_path(scene, pose, goal)[:n]:
        steps.append((pose, action))
        pose = step(scene, pose, action)
    return Segment(tuple(steps))


def _pick(options: Sequence[tuple[str, ...]], cfg: SpeakerConfig,
          rng: np.random.Generator) -> tuple[str, ...]:
    if not cfg.synonyms or len(options) == 1:
        return options[0]
    return options[int(rng.integers(len(options)))]


def _landmark(scene: Scene, cells: list[tuple[int, int]], cfg: SpeakerConfig,
              rng: np.random.Generator) -> tuple[str, ...] | None:
    rooms = []
    for x, y in cells:
        lab = int(scene.room_label[y, x])
        if lab >= 0 and lab not in rooms:
            rooms.append(lab)
    if HALLWAY in rooms:
        return _pick(HALL_PREPS, cfg, rng) + (ROOM_TYPES[HALLWAY],)
    cands: list[tuple[str, ...]] = []
    for lab in rooms:
        cands.append(_pick(ROOM_PREPS, cfg, rng) + (ROOM_TYPES[lab],))
    seen = set()
    for x, y in cells:
        for dx, dy in ((0, 0),) + HEADING_VECTORS:
            obj = scene.object_at((x + dx, y + dy))
            if obj is not None and obj.id not in seen:
                seen.add(obj.id)
                cands.append(_pick(OBJECT_PREPS, cfg, rng) + (CATEGORY_NAMES[obj.category],))
    if not cands:
        return None
    return cands[int(rng.integers(len(cands)))]


def speak(segment: Segment, scene: Scene, cfg: SpeakerConfig = SpeakerConfig(),
          vocab: Vocabulary | None = None,
          rng: np.random.Generator | None = None) -> Instruction:
    """Render ``segment`` as an instruction of at most ``MAX_TOKENS`` tokens."""
    if len(segment) == 0:
        raise InputError("cannot speak an empty segment")
    vocab = vocab or Vocabulary.default()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    clauses: list[list[str]] = []
    grounded: list[list[str] | None] = []
    i = 0
    for action, run in groupby(segment.steps, key=lambda s: s[1]):
        run = list(run)
        k = len(run)
        words = list(_pick(CLAUSE_PHRASES[action], cfg, rng))
        if k > 1:
            counts = FORWARD_COUNTS if action == Action.FORWARD else TURN_COUNTS
            words += _pick(counts[k], cfg, rng)
        land = None
        if action == Action.FORWARD and cfg.p_land > 0 and rng.random() < cfg.p_land:
            cells = [step(scene, p, a).cell for p, a in run]
            found = _landmark(scene, cells, cfg, rng)
            land = list(found) if found else None
        clauses.append(words)
        grounded.append(land)
        i += k

    keep = [True] * len(clauses)
    if cfg.p_drop > 0 and len(clauses) > 1:
        keep = [rng.random() >= cfg.p_drop for _ in clauses]
        if not any(keep):
            keep[int(rng.integers(len(clauses)))] = True

    # clauses alone always fit (at most four runs of two or four words); extras
    # are only added when the kept clauses still to come keep their room
    kept = [(w, land) for w, land, k in zip(clauses, grounded, keep) if k]
    reserve = [sum(len(w) for w, _ in kept[j:]) for j in range(len(kept) + 1)]
    out: list[str] = []
    for j, (words, land) in enumerate(kept):
        if out and cfg.p_join > 0 and rng.random() < cfg.p_join:
            joiner = list(_pick(JOINERS, cfg, rng))
            if len(out) + len(joiner) + reserve[j] <= MAX_TOKENS:
                out += joiner
        out += words
        if land is not None and len(out) + len(land) + reserve[j + 1] <= MAX_TOKENS:
            out += land
    return Instruction(tuple(vocab.encode(out)))


_CLAUSE_LOOKUP = {p: a for a, ps in CLAUSE_PHRASES.items() for p in ps}
_SKIP_PREPS = set(ROOM_PREPS) | set(HALL_PREPS) | set(OBJECT_PREPS)
_NOUNS = set(ROOM_TYPES) | set(CATEGORY_NAMES)


def reference_parse(instruction: Instruction, scene: Scene | None = None,
                    pose: Pose | None = None, vocab: Vocabulary | None = None) -> list[Action]:
    """Exact inverse of the clause grammar (joiners and grounding phrases skipped).

    Only valid for instructions spoken without clause dropout; ``scene`` and
    ``pose`` are accepted for interface symmetry and are not consulted.
    """
    vocab = vocab or Vocabulary.default()
    words = vocab.decode(instruction.tokens)
    actions: list[Action] = []
    i = 0
    while i < len(words):
        two = tuple(words[i:i + 2])
        one = (words[i],)
        if two in _CLAUSE_LOOKUP or one in _CLAUSE_LOOKUP:
            key = two if two in _CLAUSE_LOOKUP else one
            action = _CLAUSE_LOOKUP[key]
            i += len(key)
            count = 1
            for size in (2, 1):
                cand = tuple(words[i:i + size])
                if len(cand) == size and cand in COUNT_WORDS:
                    count = COUNT_WORDS[cand]
                    i += size
                    break
            actions.extend([action] * count)
            continue
        if two in _SKIP_PREPS:
            if i + 2 >= len(words) or words[i + 2] not in _NOUNS:
                raise ParseError(f"dangling grounding phrase at token {i}")
            i += 3
            continue
        for j in JOINERS:
            if tuple(words[i:i + len(j)]) == j:
                i += len(j)
                break
        else:
            raise ParseError(f"unexpected token {words[i]!r} at position {i}")
    if not actions:
        raise ParseError("instruction contains no clause")
    return actions


def answer_query(scene: Scene, pose: Pose, goal: tuple[int, int], mode: str,
                 cfg: SpeakerConfig = SpeakerConfig(), nu: int = OPTION_STEPS,
                 n: int = SEGMENT_LENGTH, vocab: Vocabulary | None = None,
                 rng: np.random.Generator | None = None) -> Feedback:
    """``mode`` is ``"language"`` or ``"gt_actions"``.

    Ground-truth answers are the first ``nu`` shortest-path actions padded
    with Stop; language answers describe the first ``n`` steps. At the goal a
    language answer is the spoken Stop clause.
    """
    if mode == "gt_actions":
        path = shortest_action_path(scene, pose, goal)[:nu]
        path += [Action.STOP] * (nu - len(path))
        return GtActionsFeedback(tuple(path))
    if mode == "language":
        seg = extract_segment(scene, pose, goal, n)
        if len(seg) == 0:
            seg = Segment(((pose, Action.STOP),))
        return LanguageFeedback(speak(seg, scene, cfg, vocab, rng))
    raise InputError(f"unknown feedback mode {mode!r}")
