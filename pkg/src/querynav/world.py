"""Procedural grid worlds, agent kinematics, geodesics and synthetic sensors.

Scenes are built by binary space partitioning: the interior is split into
rectangular rooms separated by one-cell walls, and every split is bridged by a
single door cell. Coordinates are ``(x, y)`` with ``y`` growing downwards;
arrays are indexed ``[y, x]``.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from querynav.errors import ConfigError, InputError

NUM_CATEGORIES = 21
CATEGORY_NAMES = (
    "chair", "table", "picture", "cabinet", "cushion", "sofa", "bed",
    "dresser", "plant", "sink", "toilet", "stool", "towel", "tv", "shower",
    "bathtub", "counter", "fireplace", "treadmill", "seat", "clothes",
)
ROOM_TYPES = (
    "hallway", "kitchen", "bedroom", "bathroom",
    "lounge", "office", "closet", "study",
)
HALLWAY = 0
NUM_ROOM_TYPES = len(ROOM_TYPES)

VIEW_DEPTH = 5
VIEW_WIDTH = 5
CELL_CHANNELS = 1 + NUM_ROOM_TYPES + NUM_CATEGORIES
VISUAL_DIM = VIEW_DEPTH * VIEW_WIDTH * CELL_CHANNELS

SCENE_SCHEMA = 1


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


# forward unit vector per heading, y grows downwards
HEADING_VECTORS = ((0, -1), (1, 0), (0, 1), (-1, 0))


class Action(IntEnum):
    STOP = 0
    FORWARD = 1
    TURN_RIGHT = 2
    TURN_LEFT = 3


NUM_ACTIONS = len(Action)


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: Heading

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)

    def to_list(self) -> list[int]:
        return [self.x, self.y, int(self.heading)]

    @classmethod
    def from_list(cls, v: Sequence[int]) -> "Pose":
        return cls(int(v[0]), int(v[1]), Heading(int(v[2])))


@dataclass(frozen=True)
class SemanticObject:
    id: int
    category: int
    cell: tuple[int, int]
    is_sound_source: bool = True


@dataclass
class AudioSignal:
    left: float
    right: float
    signature: np.ndarray
    audible: bool

    @classmethod
    def silent(cls, dim: int) -> "AudioSignal":
        return cls(0.0, 0.0, np.zeros(dim), False)

    def features(self) -> np.ndarray:
        return np.concatenate(([self.left, self.right], self.signature))


@dataclass(frozen=True)
class SceneParams:
    width: int = 20
    height: int = 20
    n_rooms: int = 5
    n_objects: int = 10
    min_room: int = 2
    n_categories: int = NUM_CATEGORIES
    sound_fraction: float = 1.0

    def validate(self) -> None:
        if not (8 <= self.width <= 64 and 8 <= self.height <= 64):
            raise ConfigError(f"scene size {self.width}x{self.height} outside [8, 64]")
        if self.n_rooms < 1:
            raise ConfigError("n_rooms must be >= 1")
        if self.min_room < 2:
            raise ConfigError("min_room must be >= 2")
        if not 1 <= self.n_objects <= self.n_categories:
            raise ConfigError("n_objects must lie in [1, n_categories]")
        if not 1 <= self.n_categories <= NUM_CATEGORIES:
            raise ConfigError(f"n_categories must lie in [1, {NUM_CATEGORIES}]")
        if not 0.0 <= self.sound_fraction <= 1.0:
            raise ConfigError("sound_fraction must lie in [0, 1]")


@dataclass(eq=False)
class Scene:
    width: int
    height: int
    navigable: np.ndarray  # (H, W) bool
    room_label: np.ndarray  # (H, W) int8, -1 on walls
    objects: list[SemanticObject]
    seed: int
    _dist_cache: "OrderedDict[tuple[int, int], np.ndarray]" = field(
        default_factory=OrderedDict, repr=False)
    _state_cache: "OrderedDict[tuple[int, int], np.ndarray]" = field(
        default_factory=OrderedDict, repr=False)
    _features: np.ndarray | None = field(default=None, repr=False)

    def is_navigable(self, cell: tuple[int, int]) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and bool(self.navigable[y, x])

    def navigable_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.navigable)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def object_by_id(self, object_id: int) -> SemanticObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise InputError(f"scene {self.seed} has no object {object_id}")

    def object_at(self, cell: tuple[int, int]) -> SemanticObject | None:
        for obj in self.objects:
            if obj.cell == cell:
                return obj
        return None

    def distance_field(self, cell: tuple[int, int]) -> np.ndarray:
        """BFS distances (in cells) from ``cell``; ``inf`` on walls."""
        cached = self._dist_cache.get(cell)
        if cached is not None:
            self._dist_cache.move_to_end(cell)
            return cached
        if not self.is_navigable(cell):
            raise InputError(f"cell {cell} is not navigable")
        dist = _bfs(self.navigable, cell)
        self._dist_cache[cell] = dist
        if len(self._dist_cache) > 512:
            self._dist_cache.popitem(last=False)
        return dist

    def action_distance_field(self, goal: tuple[int, int]) -> np.ndarray:
        """Minimal primitive-action counts to reach ``goal`` from every (cell, heading).

        Shape (H, W, 4); ``inf`` where unreachable or on walls.
        """
        cached = self._state_cache.get(goal)
        if cached is not None:
            self._state_cache.move_to_end(goal)
            return cached
        if not self.is_navigable(goal):
            raise InputError(f"cell {goal} is not navigable")
        dist = _reverse_state_bfs(self.navigable, goal)
        self._state_cache[goal] = dist
        if len(self._state_cache) > 256:
            self._state_cache.popitem(last=False)
        return dist

    def cell_features(self) -> np.ndarray:
        """Per-cell visual channels, padded by ``VIEW_DEPTH`` cells of void."""
        if self._features is None:
            pad = VIEW_DEPTH
            feats = np.zeros((self.height + 2 * pad, self.width + 2 * pad, CELL_CHANNELS))
            inner = feats[pad:pad + self.height, pad:pad + self.width]
            inner[..., 0] = self.navigable
            ys, xs = np.nonzero(self.room_label >= 0)
            inner[ys, xs, 1 + self.room_label[ys, xs]] = 1.0
            for obj in self.objects:
                x, y = obj.cell
                inner[y, x, 1 + NUM_ROOM_TYPES + obj.category] = 1.0
            self._features = feats
        return self._features

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema": SCENE_SCHEMA,
            "width": self.width,
            "height": self.height,
            "cells": [int(v) for v in self.room_label.ravel()],
            "objects": [
                {"id": o.id, "category": o.category, "x": o.cell[0], "y": o.cell[1],
                 "sound": o.is_sound_source}
                for o in self.objects
            ],
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("schema") != SCENE_SCHEMA:
            raise InputError(f"unsupported scene schema {d.get('schema')!r}")
        w, h = int(d["width"]), int(d["height"])
        labels = np.asarray(d["cells"], dtype=np.int8).reshape(h, w)
        objects = [
            SemanticObject(int(o["id"]), int(o["category"]), (int(o["x"]), int(o["y"])),
                           bool(o.get("sound", True)))
            for o in d["objects"]
        ]
        return cls(w, h, labels >= 0, labels, objects, int(d["seed"]))

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))


def _bfs(navigable: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    h, w = navigable.shape
    dist = np.full((h, w), np.inf)
    sx, sy = start
    dist[sy, sx] = 0.0
    queue = deque([(sx, sy)])
    while queue:
        x, y = queue.popleft()
        d = dist[y, x] + 1.0
        for dx, dy in HEADING_VECTORS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and navigable[ny, nx] and dist[ny, nx] == np.inf:
                dist[ny, nx] = d
                queue.append((nx, ny))
    return dist


def _reverse_state_bfs(navigable: np.ndarray, goal: tuple[int, int]) -> np.ndarray:
    h, w = navigable.shape
    dist = np.full((h, w, 4), np.inf)
    gx, gy = goal
    queue = deque()
    for hd in range(4):
        dist[gy, gx, hd] = 0.0
        queue.append((gx, gy, hd))
    while queue:
        x, y, hd = queue.popleft()
        d = dist[y, x, hd] + 1.0
        # a turn into this heading came from the neighbouring headings
        for prev in ((hd + 1) % 4, (hd + 3) % 4):
            if dist[y, x, prev] == np.inf:
                dist[y, x, prev] = d
                queue.append((x, y, prev))
        # a forward move into (x, y) came from one cell behind
        dx, dy = HEADING_VECTORS[hd]
        px, py = x - dx, y - dy
        if 0 <= px < w and 0 <= py < h and navigable[py, px] and dist[py, px, hd] == np.inf:
            dist[py, px, hd] = d
            queue.append((px, py, hd))
    return dist


# -- generation --------------------------------------------------------------

class _Node:
    __slots__ = ("x0", "y0", "x1", "y1", "children", "wall", "axis")

    def __init__(self, x0: int, y0: int, x1: int, y1: int):
        self.x0, self.y0, self.x1, self.y1 = x0, y0, x1, y1
        self.children: tuple[_Node, _Node] | None = None
        self.wall = -1
        self.axis = ""

    @property
    def w(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def h(self) -> int:
        return self.y1 - self.y0 + 1

    def leaves(self) -> list["_Node"]:
        if self.children is None:
            return [self]
        return self.children[0].leaves() + self.children[1].leaves()


def _try_split(node: _Node, min_room: int, rng: np.random.Generator) -> bool:
    can_v = node.w >= 2 * min_room + 1
    can_h = node.h >= 2 * min_room + 1
    if not (can_v or can_h):
        return False
    if can_v and can_h:
        axis = "v" if node.w > node.h or (node.w == node.h and rng.random() < 0.5) else "h"
    else:
        axis = "v" if can_v else "h"
    if axis == "v":
        s = int(rng.integers(node.x0 + min_room, node.x1 - min_room + 1))
        node.children = (_Node(node.x0, node.y0, s - 1, node.y1),
                         _Node(s + 1, node.y0, node.x1, node.y1))
    else:
        s = int(rng.integers(node.y0 + min_room, node.y1 - min_room + 1))
        node.children = (_Node(node.x0, node.y0, node.x1, s - 1),
                         _Node(node.x0, s + 1, node.x1, node.y1))
    node.wall, node.axis = s, axis
    return True


def _add_doors(node: _Node, nav: np.ndarray, labels: np.ndarray,
               rng: np.random.Generator) -> None:
    if node.children is None:
        return
    for child in node.children:
        _add_doors(child, nav, labels, rng)
    s = node.wall
    if node.axis == "v":
        cands = [y for y in range(node.y0, node.y1 + 1) if nav[y, s - 1] and nav[y, s + 1]]
        y = int(rng.choice(cands)) if cands else int(rng.integers(node.y0, node.y1 + 1))
        for x in (s - 1, s, s + 1):
            if not nav[y, x]:
                nav[y, x] = True
                labels[y, x] = labels[y, s - 1] if labels[y, s - 1] >= 0 else HALLWAY
    else:
        cands = [x for x in range(node.x0, node.x1 + 1) if nav[s - 1, x] and nav[s + 1, x]]
        x = int(rng.choice(cands)) if cands else int(rng.integers(node.x0, node.x1 + 1))
        for y in (s - 1, s, s + 1):
            if not nav[y, x]:
                nav[y, x] = True
                labels[y, x] = labels[s - 1, x] if labels[s - 1, x] >= 0 else HALLWAY


def generate_scene(seed: int, params: SceneParams | None = None) -> Scene:
    """Build a connected multi-room scene, deterministic in ``(seed, params)``."""
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng([seed, 0x5CE4E])
    w, h = params.width, params.height
    root = _Node(1, 1, w - 2, h - 2)
    leaves = [root]
    while len(leaves) < params.n_rooms:
        order = sorted(leaves, key=lambda n: (-(n.w * n.h), n.x0, n.y0))
        for node in order:
            if _try_split(node, params.min_room, rng):
                leaves.remove(node)
                leaves.extend(node.children)
                break
        else:
            break

    nav = np.zeros((h, w), dtype=bool)
    labels = np.full((h, w), -1, dtype=np.int8)
    rooms = root.leaves()
    thinnest = min(range(len(rooms)), key=lambda i: (min(rooms[i].w, rooms[i].h), i))
    for i, room in enumerate(rooms):
        if i == thinnest or min(room.w, room.h) <= 2 or max(room.w, room.h) >= 3 * min(room.w, room.h):
            kind = HALLWAY
        else:
            kind = int(rng.integers(1, NUM_ROOM_TYPES))
        nav[room.y0:room.y1 + 1, room.x0:room.x1 + 1] = True
        labels[room.y0:room.y1 + 1, room.x0:room.x1 + 1] = kind
    _add_doors(root, nav, labels, rng)

    # objects sit on floor cells that are not part of a doorway
    free = [(x, y) for y in range(h) for x in range(w)
            if nav[y, x] and _is_room_interior(nav, x, y)]
    n_obj = min(params.n_objects, len(free))
    picks = rng.choice(len(free), size=n_obj, replace=False)
    cats = rng.choice(params.n_categories, size=n_obj, replace=False)
    n_sound = max(1, int(round(params.sound_fraction * n_obj)))
    objects = [
        SemanticObject(i, int(cats[i]), free[int(picks[i])], i < n_sound)
        for i in range(n_obj)
    ]
    scene = Scene(w, h, nav, labels, objects, int(seed))
    if not is_connected(scene):
        raise ConfigError(f"scene generation produced a disconnected layout (seed={seed})")
    return scene


def _is_room_interior(nav: np.ndarray, x: int, y: int) -> bool:
    # doorway cells have walls on both sides along one axis
    h, w = nav.shape
    left = x > 0 and nav[y, x - 1]
    right = x < w - 1 and nav[y, x + 1]
    up = y > 0 and nav[y - 1, x]
    down = y < h - 1 and nav[y + 1, x]
    return not ((not left and not right) or (not up and not down))


def is_connected(scene: Scene) -> bool:
    cells = scene.navigable_cells()
    if not cells:
        return False
    dist = _bfs(scene.navigable, cells[0])
    return bool(np.all(np.isfinite(dist[scene.navigable])))


# -- geometry ------------------------------------------------------------------

def geodesic_distance(scene: Scene, a: tuple[int, int], b: tuple[int, int]) -> float:
    """Length of the shortest 4-connected path between two navigable cells."""
    if not scene.is_navigable(a):
        raise InputError(f"cell {a} is not navigable")
    if not scene.is_navigable(b):
        raise InputError(f"cell {b} is not navigable")
    return float(scene.distance_field(b)[a[1], a[0]])


def step(scene: Scene, pose: Pose, action: Action) -> Pose:
    if action == Action.FORWARD:
        dx, dy = HEADING_VECTORS[pose.heading]
        target = (pose.x + dx, pose.y + dy)
        if scene.is_navigable(target):
            return Pose(target[0], target[1], pose.heading)
        return pose
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, Heading((pose.heading + 1) % 4))
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, Heading((pose.heading + 3) % 4))
    return pose


# preference order when several actions are equally short
_PREFERENCE = (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)


def next_optimal_action(scene: Scene, pose: Pose, goal: tuple[int, int]) -> Action | None:
    """First action of the preferred shortest path, ``None`` when already at ``goal``."""
    dist = scene.action_distance_field(goal)
    here = dist[pose.y, pose.x, pose.heading]
    if here == 0:
        return None
    for action in _PREFERENCE:
        nxt = step(scene, pose, action)
        if nxt != pose and dist[nxt.y, nxt.x, nxt.heading] == here - 1:
            return action
    raise InputError(f"goal {goal} unreachable from {pose}")


def shortest_action_path(scene: Scene, pose: Pose, goal: tuple[int, int]) -> list[Action]:
    """Minimal action sequence (without the final Stop) that brings ``pose`` onto ``goal``.

    Descends the (cell, heading) distance field greedily, so the path from any
    intermediate pose is a suffix of the path from the start.
    """
    if not scene.is_navigable(pose.cell):
        raise InputError(f"pose {pose} is not navigable")
    actions: list[Action] = []
    while True:
        a = next_optimal_action(scene, pose, goal)
        if a is None:
            return actions
        actions.append(a)
        pose = step(scene, pose, a)


def actions_to_reach(scene: Scene, pose: Pose, goal: tuple[int, int], radius: int) -> int:
    """Minimal primitive actions to stand within geodesic ``radius`` of ``goal``."""
    dgeo = scene.distance_field(goal)
    # multi-source BFS over states from the whole success region
    h, w = scene.height, scene.width
    best = np.full((h, w, 4), np.inf)
    queue = deque()
    ys, xs = np.nonzero(dgeo <= radius)
    for y, x in zip(ys, xs):
        for hd in range(4):
            best[y, x, hd] = 0.0
            queue.append((int(x), int(y), hd))
    nav = scene.navigable
    while queue:
        x, y, hd = queue.popleft()
        d = best[y, x, hd] + 1.0
        for prev in ((hd + 1) % 4, (hd + 3) % 4):
            if best[y, x, prev] == np.inf:
                best[y, x, prev] = d
                queue.append((x, y, prev))
        dx, dy = HEADING_VECTORS[hd]
        px, py = x - dx, y - dy
        if 0 <= px < w and 0 <= py < h and nav[py, px] and best[py, px, hd] == np.inf:
            best[py, px, hd] = d
            queue.append((px, py, hd))
    return int(best[pose.y, pose.x, pose.heading])


def to_agent_frame(pose: Pose, dx: float, dy: float) -> tuple[float, float]:
    """World displacement -> (rightward, forward) in the agent frame."""
    fx, fy = HEADING_VECTORS[pose.heading]
    rx, ry = HEADING_VECTORS[(pose.heading + 1) % 4]
    return (dx * rx + dy * ry, dx * fx + dy * fy)


# -- sensors -------------------------------------------------------------------

def render_audio(
    scene: Scene,
    pose: Pose,
    active_sources: Iterable[tuple[SemanticObject, float]],
    signatures: np.ndarray,
    alpha: float = 1.0,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> AudioSignal:
    """Binaural intensity proxy: geodesic decay for loudness, straight-line bearing for the ear split."""
    dim = signatures.shape[1]
    left = right = 0.0
    sig = np.zeros(dim)
    any_active = False
    for obj, gain in active_sources:
        any_active = True
        d = scene.distance_field(obj.cell)[pose.y, pose.x]
        intensity = gain / (1.0 + d) ** alpha
        r, f = to_agent_frame(pose, obj.cell[0] - pose.x, obj.cell[1] - pose.y)
        norm = math.hypot(r, f)
        sin_t = r / norm if norm > 0 else 0.0
        left += intensity * (1.0 - sin_t) / 2.0
        right += intensity * (1.0 + sin_t) / 2.0
        sig += intensity * signatures[obj.category]
    if not any_active:
        return AudioSignal.silent(dim)
    if noise_std > 0:
        if rng is None:
            raise InputError("noise_std > 0 needs an explicit rng")
        sig = sig + rng.normal(0.0, noise_std, size=dim)
    return AudioSignal(float(left), float(right), sig, True)


_VIEW_OFFSETS = np.zeros((4, VIEW_DEPTH * VIEW_WIDTH, 2), dtype=np.int64)
for _h in range(4):
    _fx, _fy = HEADING_VECTORS[_h]
    _rx, _ry = HEADING_VECTORS[(_h + 1) % 4]
    _k = 0
    for _f in range(VIEW_DEPTH):
        for _l in range(-(VIEW_WIDTH // 2), VIEW_WIDTH // 2 + 1):
            _VIEW_OFFSETS[_h, _k] = (_f * _fx + _l * _rx, _f * _fy + _l * _ry)
            _k += 1


def render_visual(scene: Scene, pose: Pose) -> np.ndarray:
    """Egocentric 5x5 window (own cell row first, lateral left-to-right), flattened.

    Channels per cell: navigability, room-type one-hot, object-category one-hot.
    Cells outside the map read as all-zero (blocked).
    """
    feats = scene.cell_features()
    offs = _VIEW_OFFSETS[pose.heading]
    xs = offs[:, 0] + pose.x + VIEW_DEPTH
    ys = offs[:, 1] + pose.y + VIEW_DEPTH
    return feats[ys, xs].ravel()
