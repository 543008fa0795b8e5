"""Observation embeddings, the FIFO memory, and the goal descriptor estimator."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from querynav.episode import EpisodeSpec, active_sources
from querynav.errors import TrainingError
from querynav.nn import Adam, Params, init_linear, linear_backward, log_softmax, softmax
from querynav.world import (
    NUM_ACTIONS, NUM_CATEGORIES, VISUAL_DIM, Action, AudioSignal, Heading, Pose, Scene,
    render_audio, render_visual, to_agent_frame,
)

MEMORY_SIZE = 150
LANG_MEMORY_SIZE = 3
FUSION_LAMBDA = 0.5
DEFAULT_NOISE = 0.005
AUDIO_ALPHA = 1.0


@dataclass(frozen=True)
class AudioConfig:
    alpha: float = AUDIO_ALPHA
    noise_std: float = DEFAULT_NOISE


@dataclass
class ObservationEmbedding:
    visual: np.ndarray
    audio: AudioSignal
    prev_action: np.ndarray
    pose_delta: tuple[int, int, int]

    def vector(self) -> np.ndarray:
        dx, dy, dh = self.pose_delta
        ang = dh * np.pi / 2
        pose = np.array([dx / 10.0, dy / 10.0, np.cos(ang), np.sin(ang)])
        return np.concatenate([self.visual, self.audio.features(), self.prev_action, pose])


def obs_dim(signature_dim: int) -> int:
    return VISUAL_DIM + 2 + signature_dim + NUM_ACTIONS + 4


def action_onehot(action: Action | None) -> np.ndarray:
    v = np.zeros(NUM_ACTIONS)
    if action is not None:
        v[int(action)] = 1.0
    return v


def pose_delta(start: Pose, pose: Pose) -> tuple[int, int, int]:
    r, f = to_agent_frame(start, pose.x - start.x, pose.y - start.y)
    return (int(r), int(f), int((pose.heading - start.heading) % 4))


def encode_observation(scene: Scene, pose: Pose, spec: EpisodeSpec, t: int,
                       prev_action: Action | None, signatures: np.ndarray,
                       audio_cfg: AudioConfig = AudioConfig(),
                       rng: np.random.Generator | None = None) -> ObservationEmbedding:
    """Visual window, binaural audio, previous action (all-zero at t=0) and pose delta."""
    audio = render_audio(scene, pose, active_sources(spec, t, scene), signatures,
                         audio_cfg.alpha, audio_cfg.noise_std, rng)
    return ObservationEmbedding(render_visual(scene, pose), audio,
                                action_onehot(prev_action), pose_delta(spec.start, pose))


class Memory:
    """FIFO buffer of the last ``capacity`` items, emptied per episode."""

    def __init__(self, capacity: int = MEMORY_SIZE):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, item) -> None:
        self._items.append(item)

    def clear(self) -> None:
        self._items.clear()

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator:
        return iter(self._items)

    def as_array(self) -> np.ndarray:
        return np.stack(list(self._items)) if self._items else np.zeros((0,))


# -- goal descriptor -------------------------------------------------------------

@dataclass
class GoalDescriptor:
    location: np.ndarray  # (rightward, forward) in the agent frame, cells
    category_probs: np.ndarray

    @classmethod
    def initial(cls, n_categories: int = NUM_CATEGORIES) -> "GoalDescriptor":
        return cls(np.zeros(2), np.full(n_categories, 1.0 / n_categories))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.location / 10.0, self.category_probs])


def propagate_goal(g: GoalDescriptor, dpose: tuple[int, int, int]) -> GoalDescriptor:
    """Rigid transform of the previous estimate into the new agent frame.

    ``dpose`` is (rightward, forward, right-turns) of the move, expressed in
    the previous frame. A right turn rotates fixed points counter-clockwise.
    """
    d_right, d_fwd, turns = dpose
    x, y = g.location[0] - d_right, g.location[1] - d_fwd
    for _ in range(turns % 4):
        x, y = -y, x
    return GoalDescriptor(np.array([x, y], dtype=float), g.category_probs.copy())


def fuse_goal(g_prev: GoalDescriptor, g_hat: GoalDescriptor, dpose: tuple[int, int, int],
              audible: bool, lam: float = FUSION_LAMBDA) -> GoalDescriptor:
    moved = propagate_goal(g_prev, dpose)
    if not audible:
        return moved
    loc = lam * g_hat.location + (1 - lam) * moved.location
    probs = lam * g_hat.category_probs + (1 - lam) * moved.category_probs
    probs = np.clip(probs, 0.0, None)
    return GoalDescriptor(loc, probs / probs.sum())


def step_delta(prev: Pose, new: Pose) -> tuple[int, int, int]:
    r, f = to_agent_frame(prev, new.x - prev.x, new.y - prev.y)
    return (int(r), int(f), int((new.heading - prev.heading) % 4))


# -- goal estimator ------------------------------------------------------------------

def location_features(left, right, signature) -> np.ndarray:
    """Hand-crafted binaural cues; accepts scalars or arrays (leading batch dims)."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    total = left + right
    safe = np.where(total > 1e-9, total, 1.0)
    side = np.where(total > 1e-9, (right - left) / safe, 0.0)
    dist = np.where(total > 1e-9, 1.0 / safe - 1.0, 0.0) / 10.0
    sig_norm = np.linalg.norm(np.asarray(signature, dtype=float), axis=-1)
    return np.stack([total, side, dist, side * dist, sig_norm], axis=-1)


N_LOC_FEATURES = 5


def init_goal_estimator(rng: np.random.Generator, signature_dim: int,
                        n_categories: int = NUM_CATEGORIES, hidden: int = 32) -> Params:
    w1, b1 = init_linear(rng, N_LOC_FEATURES, hidden)
    w2, _ = init_linear(rng, hidden, 2, scale=0.1)
    return {
        "cls_W": np.zeros((signature_dim, n_categories)),
        "cls_b": np.zeros(n_categories),
        "loc_W": np.zeros((N_LOC_FEATURES, 2)),
        "loc_b": np.zeros(2),
        "loc_W1": w1, "loc_b1": b1, "loc_W2": w2,
    }


def _unit(sig: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(sig, axis=-1, keepdims=True)
    return np.where(n > 1e-12, sig / np.where(n > 1e-12, n, 1.0), 0.0)


def classify(params: Params, signatures: np.ndarray) -> np.ndarray:
    return softmax(_unit(signatures) @ params["cls_W"] + params["cls_b"])


def regress_location(params: Params, feats: np.ndarray) -> np.ndarray:
    hid = np.tanh(feats @ params["loc_W1"] + params["loc_b1"])
    return feats @ params["loc_W"] + params["loc_b"] + hid @ params["loc_W2"]


def estimate_goal(params: Params, audio: AudioSignal) -> GoalDescriptor:
    probs = classify(params, audio.signature[None])[0]
    loc = regress_location(params, location_features(audio.left, audio.right, audio.signature)[None])[0]
    return GoalDescriptor(loc, probs)


def estimate_goal_batch(params: Params, audio_feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched variant on stacked ``AudioSignal.features()`` rows: (locations, probs)."""
    sig = audio_feats[:, 2:]
    probs = classify(params, sig)
    loc = regress_location(params, location_features(audio_feats[:, 0], audio_feats[:, 1], sig))
    return loc, probs


def classifier_loss_and_grads(params: Params, sigs: np.ndarray, labels: np.ndarray):
    x = _unit(sigs)
    logits = x @ params["cls_W"] + params["cls_b"]
    logp = log_softmax(logits)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    d /= n
    _, dw, db = linear_backward(d, x, params["cls_W"])
    return float(loss), {"cls_W": dw, "cls_b": db}


def regressor_loss_and_grads(params: Params, feats: np.ndarray, targets: np.ndarray):
    pre = feats @ params["loc_W1"] + params["loc_b1"]
    hid = np.tanh(pre)
    pred = feats @ params["loc_W"] + params["loc_b"] + hid @ params["loc_W2"]
    diff = pred - targets
    n = len(targets)
    loss = float((diff ** 2).sum(-1).mean())
    dpred = 2.0 * diff / n
    dhid, dw2, _ = linear_backward(dpred, hid, params["loc_W2"])
    _, dw1, db1 = linear_backward(dhid * (1 - hid ** 2), feats, params["loc_W1"])
    _, dw, db = linear_backward(dpred, feats, params["loc_W"])
    return loss, {"loc_W": dw, "loc_b": db, "loc_W1": dw1, "loc_b1": db1, "loc_W2": dw2}


def fit(params: Params, loss_and_grads, inputs: np.ndarray, targets: np.ndarray,
        epochs: int, lr: float = 1e-3, batch: int = 256,
        rng: np.random.Generator | None = None) -> list[float]:
    """Mini-batch Adam on one head; returns the per-epoch mean loss."""
    if len(inputs) == 0:
        raise TrainingError("empty dataset")
    rng = rng or np.random.default_rng(0)
    opt = Adam(lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(inputs))
        losses = []
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            loss, grads = loss_and_grads(params, inputs[idx], targets[idx])
            opt.step(params, grads)
            losses.append(loss * len(idx))
        history.append(float(sum(losses) / len(order)))
    return history


def train_goal_estimator(params: Params,
                         category_data: tuple[np.ndarray, np.ndarray] | None = None,
                         location_data: tuple[np.ndarray, np.ndarray] | None = None,
                         epochs: int = 10, lr: float = 1e-3,
                         rng: np.random.Generator | None = None) -> dict[str, list[float]]:
    """Fit the classifier (signatures -> category) and/or the location regressor.

    ``category_data`` = (audio feature rows, category ids), an off-policy corpus.
    ``location_data`` = (audio feature rows, agent-frame locations), typically
    gathered from ongoing rollouts. Updates ``params`` in place.
    """
    if category_data is None and location_data is None:
        raise TrainingError("no data to train the goal estimator on")
    out = {}
    if category_data is not None:
        feats, labels = category_data
        if len(labels) == 0:
            raise TrainingError("empty category dataset")
        out["category"] = fit(params, classifier_loss_and_grads, feats[:, 2:],
                              np.asarray(labels, dtype=int), epochs, lr, rng=rng)
    if location_data is not None:
        feats, locs = location_data
        if len(locs) == 0:
            raise TrainingError("empty location dataset")
        lf = location_features(feats[:, 0], feats[:, 1], feats[:, 2:])
        out["location"] = fit(params, regressor_loss_and_grads, lf, np.asarray(locs, float),
                              epochs, lr, rng=rng)
    return out


def relative_goal(pose: Pose, goal_cell: tuple[int, int]) -> np.ndarray:
    r, f = to_agent_frame(pose, goal_cell[0] - pose.x, goal_cell[1] - pose.y)
    return np.array([r, f], dtype=float)


def collect_audio_corpus(scenes: Sequence[Scene], categories: Sequence[int],
                         signatures: np.ndarray, n: int, rng: np.random.Generator,
                         audio_cfg: AudioConfig = AudioConfig()):
    """Random (pose, sounding object) pairs: (audio features, category, agent-frame location)."""
    feats, cats, locs = [], [], []
    cats_set = set(categories)
    while len(cats) < n:
        scene = scenes[int(rng.integers(len(scenes)))]
        objs = [o for o in scene.objects if o.is_sound_source and o.category in cats_set]
        if not objs:
            continue
        obj = objs[int(rng.integers(len(objs)))]
        cells = scene.navigable_cells()
        x, y = cells[int(rng.integers(len(cells)))]
        pose = Pose(x, y, Heading(int(rng.integers(4))))
        audio = render_audio(scene, pose, [(obj, 1.0)], signatures,
                             audio_cfg.alpha, audio_cfg.noise_std, rng)
        feats.append(audio.features())
        cats.append(obj.category)
        locs.append(relative_goal(pose, obj.cell))
    return np.array(feats), np.array(cats), np.array(locs)
