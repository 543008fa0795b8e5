"""Audio-goal policy, when-to-query policy, trigger baselines and the options controller.

Both policies share one actor-critic layout: an observation encoder, a goal
embedding used as the attention query over the episode memory, a fusion
layer and linear actor/critic heads. The query policy reuses the frozen
observation encoder of the audio-goal policy, so one memory of encodings
serves both.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from querynav.episode import EpisodeSpec, active_sources, sound_end_step
from querynav.errors import ConfigError, UsageError
from querynav.language import (
    GOAL_DIM, LangConfig, embed_instruction, goal_input, lang_step_batch, teacher_rollout,
    TeacherPair,
)
from querynav.nn import Params, attend, attend_backward, init_linear, linear_backward, softmax
from querynav.oracle import (
    OPTION_STEPS, GtActionsFeedback, SpeakerConfig, Vocabulary, answer_query,
)
from querynav.percept import (
    MEMORY_SIZE, AudioConfig, GoalDescriptor, estimate_goal_batch, fuse_goal,
    encode_observation, relative_goal, step_delta,
)
from querynav.rewards import K_SOFT, R_F, R_NEG, TAU_F, nav_reward, zeta_f, zeta_q
from querynav.world import NUM_ACTIONS, Action, Pose, Scene, actions_to_reach, step

TRIGGERS = ("none", "learned", "random", "uniform", "mu")
FEEDBACK_MODES = ("language", "gt_actions")
QUERY_EXTRA_DIM = 3
SUCCESS_RADIUS = 1
MAX_STEPS = 500


# -- actor-critic ----------------------------------------------------------------

def init_actor_critic(rng: np.random.Generator, obs_dim: int, n_actions: int,
                      extra_dim: int = 0, goal_dim: int = GOAL_DIM, d: int = 64,
                      d_z: int = 128, stop_bias: float = 0.0) -> Params:
    """``stop_bias`` offsets the initial Stop logit of a navigation head."""
    p: Params = {}
    p["enc_W"], p["enc_b"] = init_linear(rng, obs_dim, d)
    p["g_W"], p["g_b"] = init_linear(rng, goal_dim, d)
    p["q_W"], _ = init_linear(rng, d, d)
    p["z_W"], p["z_b"] = init_linear(rng, 3 * d + extra_dim, d_z)
    p["pi_W"], p["pi_b"] = init_linear(rng, d_z, n_actions, scale=0.01)
    p["pi_b"][int(Action.STOP)] = stop_bias if n_actions == NUM_ACTIONS else 0.0
    p["v_W"], p["v_b"] = init_linear(rng, d_z, 1)
    return p


def encode(p: Params, x: np.ndarray) -> np.ndarray:
    return np.tanh(x @ p["enc_W"] + p["enc_b"])


def ac_forward(p: Params, x: np.ndarray, gin: np.ndarray, extra: np.ndarray | None,
               mem: np.ndarray | None, mem_mask: np.ndarray | None):
    """Batched forward: returns (logits, values, cache). ``mem`` holds stop-gradient encodings."""
    e = encode(p, x)
    hg = np.tanh(gin @ p["g_W"] + p["g_b"])
    q = hg @ p["q_W"]
    c, a = attend(mem, mem_mask, e, q)
    parts = [c, e, hg] + ([extra] if extra is not None and extra.shape[1] else [])
    zin = np.concatenate(parts, axis=1)
    z = np.tanh(zin @ p["z_W"] + p["z_b"])
    logits = z @ p["pi_W"] + p["pi_b"]
    v = (z @ p["v_W"] + p["v_b"])[:, 0]
    return logits, v, (x, gin, e, hg, q, a, mem, zin, z)


def ac_backward(p: Params, cache, dlogits: np.ndarray, dv: np.ndarray,
                skip_encoder: bool = False) -> Params:
    x, gin, e, hg, q, a, mem, zin, z = cache
    grads: Params = {}
    dz, grads["pi_W"], grads["pi_b"] = linear_backward(dlogits, z, p["pi_W"])
    dz2, grads["v_W"], grads["v_b"] = linear_backward(dv[:, None], z, p["v_W"])
    dz = dz + dz2
    dpre = dz * (1 - z ** 2)
    dzin, grads["z_W"], grads["z_b"] = linear_backward(dpre, zin, p["z_W"])
    d = e.shape[1]
    dc, de, dhg = dzin[:, :d], dzin[:, d:2 * d].copy(), dzin[:, 2 * d:3 * d].copy()
    _, dcur, dq = attend_backward(dc, mem, e, q, a)
    de += dcur
    grads["q_W"] = hg.T @ dq
    dhg += dq @ p["q_W"].T
    dpre = dhg * (1 - hg ** 2)
    _, grads["g_W"], grads["g_b"] = linear_backward(dpre, gin, p["g_W"])
    if skip_encoder:
        grads["enc_W"] = np.zeros_like(p["enc_W"])
        grads["enc_b"] = np.zeros_like(p["enc_b"])
    else:
        dpre = de * (1 - e ** 2)
        _, grads["enc_W"], grads["enc_b"] = linear_backward(dpre, x, p["enc_W"])
    return grads


def _single(p, memory, e_obs, gin, extra):
    mem = None
    mask = None
    if memory is not None and len(memory):
        mem_enc = np.asarray(memory)[-MEMORY_SIZE:]
        mem = mem_enc[None]
        mask = np.ones((1, len(mem_enc)), bool)
    ex = None if extra is None else np.asarray(extra, float)[None]
    logits, v, _ = ac_forward(p, e_obs[None], np.asarray(gin)[None], ex, mem, mask)
    return softmax(logits)[0], float(v[0])


def _gin(g) -> np.ndarray:
    return goal_input(g, None) if isinstance(g, GoalDescriptor) else np.asarray(g, float)


def audio_policy_step(params_g: Params, memory, e_obs: np.ndarray, g) -> tuple[np.ndarray, float]:
    """Action distribution over the four navigation actions and the value estimate.

    ``memory`` is a sequence of past encodings (possibly empty); ``g`` is a
    GoalDescriptor or a ready goal-input vector.
    """
    return _single(params_g, memory, e_obs, _gin(g), None)


def query_extra(k: int, j: int, K: int = K_SOFT, tau_f: int = TAU_F) -> np.ndarray:
    return np.array([k / K, min(j, tau_f) / tau_f, float(k > 0)])


def mask_query(probs: np.ndarray, allowed: np.ndarray | bool) -> np.ndarray:
    """Zero the query column where not allowed and renormalize."""
    probs = np.array(probs, dtype=float, copy=True)
    allowed = np.asarray(allowed, bool)
    if probs.ndim == 1:
        if not allowed:
            return np.array([1.0, 0.0])
        return probs
    probs[~allowed, 1] = 0.0
    probs[~allowed, 0] = 1.0
    return probs


def query_policy_step(params_q: Params, memory, e_obs: np.ndarray, g, k: int = 0, j: int = 0,
                      k_allowed: int | None = None) -> tuple[np.ndarray, float]:
    """Distribution over {navigate, query}; the query is masked once ``k >= k_allowed``."""
    probs, v = _single(params_q, memory, e_obs, _gin(g), query_extra(k, j))
    if k_allowed is not None:
        probs = mask_query(probs, k < k_allowed)
    return probs, v


def top2_gap(probs: np.ndarray) -> np.ndarray:
    s = np.sort(probs, axis=-1)
    return s[..., -1] - s[..., -2]


def mu_fires(probs: np.ndarray, threshold: float) -> bool:
    # tolerance so that e.g. 0.55 - 0.45 counts as a gap of exactly 0.1
    return bool(top2_gap(probs) <= threshold + 1e-12)


def mu_trigger(params_g: Params, memory, e_obs: np.ndarray, g, threshold: float = 0.1) -> bool:
    """True when the audio-goal policy's top two action probabilities are within ``threshold``."""
    probs, _ = audio_policy_step(params_g, memory, e_obs, g)
    return mu_fires(probs, threshold)


# -- controller ------------------------------------------------------------------

@dataclass
class ControllerConfig:
    trigger: str = "none"
    feedback: str = "language"
    k_allowed: int | None = 3  # None: unlimited (training uses the soft penalty only)
    nu: int = OPTION_STEPS
    max_steps: int = MAX_STEPS
    success_radius: int = SUCCESS_RADIUS
    use_memory: bool = True
    greedy: bool = False
    # the imitation-trained language policy is decoded by argmax; RL policies sample
    lang_greedy: bool = True
    mu_threshold: float = 0.1
    uniform_period: int = 15
    random_window: int = 50
    K: int = K_SOFT
    tau_f: int = TAU_F
    r_neg: float = R_NEG
    r_f: float = R_F
    gamma: float = 0.99
    binary_progress: bool = False
    speaker: SpeakerConfig = field(default_factory=SpeakerConfig)
    log: bool = False

    def __post_init__(self):
        if self.trigger not in TRIGGERS:
            raise ConfigError(f"unknown trigger {self.trigger!r}")
        if self.feedback not in FEEDBACK_MODES:
            raise ConfigError(f"unknown feedback mode {self.feedback!r}")
        if self.k_allowed is not None and self.k_allowed < 0:
            raise ConfigError("k_allowed must be >= 0")
        if self.nu < 1 or self.max_steps < 1 or self.uniform_period < 1 or self.random_window < 1:
            raise ConfigError("nu, max_steps, uniform_period and random_window must be positive")
        if self.mu_threshold <= 0:
            raise ConfigError("mu_threshold must be positive")


@dataclass
class Agents:
    """Everything the controller needs to act: parameters and fixed sensor settings."""

    pi_g: Params
    goal_est: Params
    signatures: np.ndarray
    pi_q: Params | None = None
    pi_l: Params | None = None
    lang_cfg: LangConfig | None = None
    audio_cfg: AudioConfig = AudioConfig()
    vocab: Vocabulary = field(default_factory=Vocabulary.default)


@dataclass
class Decision:
    """One policy decision awaiting its (semi-MDP) reward."""

    x: np.ndarray
    gin: np.ndarray
    extra: np.ndarray | None
    mem: np.ndarray  # the episode's encoding array; rows [:mem_len] were visible
    mem_len: int
    action: int
    logp: float
    value: float
    reward: float = 0.0
    duration: int = 0
    done: bool = False
    discount: float = 1.0  # running gamma^i while the reward accumulates


@dataclass
class Slot:
    """Per-episode controller state."""

    scene: Scene
    spec: EpisodeSpec
    rng: np.random.Generator
    index: int
    pose: Pose
    goal_cell: tuple[int, int]
    enc: np.ndarray
    t: int = 0
    prev_action: Action | None = None
    g: GoalDescriptor = field(default_factory=GoalDescriptor.initial)
    x: np.ndarray | None = None
    audio: np.ndarray | None = None
    audible: bool = False
    k: int = 0
    j: int = 0
    option: dict | None = None
    schedule: list[int] = field(default_factory=list)
    done: bool = False
    success: bool = False
    path_len: int = 0
    reach_step: int | None = None
    queries: list[int] = field(default_factory=list)
    lang_steps: list[int] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    pending: Decision | None = None
    pending_q: Decision | None = None
    open_q: Decision | None = None
    option_log: dict | None = None
    shortest_len: float = 0.0
    min_actions: int = 0
    d_prev: float = 0.0

    @property
    def mem_len(self) -> int:
        return self.t


def gather_memory(slots: Sequence, cap: int = MEMORY_SIZE):
    """Stack the last ``cap`` encodings of each (enc array, length) pair with a validity mask."""
    lens = [min(n, cap) for _, n in slots]
    L = max(lens) if lens else 0
    if L == 0:
        return None, None
    d = slots[0][0].shape[1]
    mem = np.zeros((len(slots), L, d))
    mask = np.zeros((len(slots), L), bool)
    for i, ((arr, n), m) in enumerate(zip(slots, lens)):
        if m:
            mem[i, :m] = arr[n - m:n]
            mask[i, :m] = True
    return mem, mask


def _sample(probs: np.ndarray, rng: np.random.Generator, greedy: bool) -> int:
    if greedy:
        return int(np.argmax(probs))
    u = rng.random()
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(probs) - 1))


class Controller:
    """Steps many episodes in lockstep, batching every network call.

    ``on_goal_decision`` / ``on_query_decision`` receive the finished
    :class:`Decision` objects when given; ``on_location_sample`` receives
    (audio features, true agent-frame goal location) on audible steps;
    ``on_query_pair`` receives a TeacherPair per language query.
    """

    def __init__(self, agents: Agents, cfg: ControllerConfig, scenes: dict[int, Scene],
                 on_goal_decision: Callable | None = None,
                 on_query_decision: Callable | None = None,
                 on_location_sample: Callable | None = None,
                 on_query_pair: Callable | None = None):
        if cfg.trigger == "learned" and agents.pi_q is None:
            raise ConfigError("learned trigger needs query-policy parameters")
        if cfg.trigger != "none" and cfg.feedback == "language" and agents.pi_l is None:
            raise ConfigError("language feedback needs language-policy parameters")
        self.agents = agents
        self.cfg = cfg
        self.scenes = scenes
        self.on_goal_decision = on_goal_decision
        self.on_query_decision = on_query_decision
        self.on_location_sample = on_location_sample
        self.on_query_pair = on_query_pair

    # episode lifecycle ----------------------------------------------------------

    def new_slot(self, spec: EpisodeSpec, seed: int, index: int) -> Slot:
        scene = self.scenes[spec.scene_seed]
        goal = scene.object_by_id(spec.goal_object_id).cell
        d = self.agents.pi_g["enc_W"].shape[1]
        s = Slot(scene, spec, np.random.default_rng([seed, index]), index, spec.start, goal,
                 np.zeros((self.cfg.max_steps + 1, d)))
        d0 = scene.distance_field(goal)[spec.start.y, spec.start.x]
        s.d_prev = float(d0)
        s.shortest_len = float(max(d0 - self.cfg.success_radius, 0.0))
        s.min_actions = actions_to_reach(scene, spec.start, goal, self.cfg.success_radius) + 1
        k_cap = self.cfg.k_allowed if self.cfg.k_allowed is not None else self.cfg.K
        if self.cfg.trigger == "random":
            n = min(k_cap, self.cfg.random_window)
            s.schedule = sorted(int(v) for v in s.rng.choice(self.cfg.random_window, n, replace=False))
        elif self.cfg.trigger == "uniform":
            s.schedule = [self.cfg.uniform_period * (i + 1) for i in range(k_cap)]
        self._observe(s, None, first=True)
        return s

    def _observe(self, s: Slot, prev_pose: Pose | None, first: bool = False) -> None:
        ag = self.agents
        emb = encode_observation(s.scene, s.pose, s.spec, s.t, s.prev_action, ag.signatures,
                                 ag.audio_cfg, s.rng)
        s.x = emb.vector()
        s.audio = emb.audio.features()
        s.audible = emb.audio.audible
        loc, probs = estimate_goal_batch(ag.goal_est, s.audio[None])
        ghat = GoalDescriptor(loc[0], probs[0])
        dpose = (0, 0, 0) if first else step_delta(prev_pose, s.pose)
        s.g = fuse_goal(s.g, ghat, dpose, s.audible)
        if s.audible and self.on_location_sample is not None:
            self.on_location_sample(s.audio, relative_goal(s.pose, s.goal_cell))

    def gin(self, s: Slot) -> np.ndarray:
        return goal_input(s.g, s.spec.target_onehot)

    # one primitive tick ---------------------------------------------------------

    def tick(self, slots: list[Slot]) -> None:
        """Advance every slot in ``slots`` by one primitive step."""
        if any(s.done for s in slots):
            raise UsageError("cannot step a finished episode")
        if not slots:
            return
        cfg, ag = self.cfg, self.agents
        X = np.stack([s.x for s in slots])
        E = encode(ag.pi_g, X)
        G = np.stack([self.gin(s) for s in slots])
        mem_refs = [(s.enc, s.t) for s in slots]
        free = [i for i, s in enumerate(slots) if s.option is None]

        # audio-goal policy on every slot without an active option
        goal_probs = {}
        if free:
            mem, mask = gather_memory([mem_refs[i] for i in free]) if cfg.use_memory else (None, None)
            logits, vals, _ = ac_forward(ag.pi_g, X[free], G[free], None, mem, mask)
            probs = softmax(logits)
            for r, i in enumerate(free):
                goal_probs[i] = (probs[r], float(vals[r]))

        # when to query
        query = set()
        if free and cfg.trigger != "none":
            query = self._trigger(slots, free, X, G, mem_refs, goal_probs)

        for i in query:
            self._start_option(slots[i])

        # choose primitive actions
        actions: dict[int, int] = {}
        lang_groups: dict[int, list[int]] = {}
        for i, s in enumerate(slots):
            if s.option is None:
                probs, val = goal_probs[i]
                a = _sample(probs, s.rng, cfg.greedy)
                actions[i] = a
                if self.on_goal_decision is not None:
                    s.pending = Decision(X[i], G[i], None, s.enc, s.t, a,
                                         float(np.log(max(probs[a], 1e-300))), val)
            elif s.option["kind"] == "gt_actions":
                actions[i] = s.option["actions"][s.option["done"]]
            else:
                lang_groups.setdefault(len(s.option["beliefs"]), []).append(i)
        for k_step, idx in lang_groups.items():
            hist = np.stack([np.stack(slots[i].option["beliefs"]) for i in idx]) if k_step else None
            instr = np.stack([slots[i].option["instr"] for i in idx])
            probs, beliefs = lang_step_batch(ag.pi_l, X[idx], G[idx], instr, k_step, hist, cfg.nu)
            for r, i in enumerate(idx):
                s = slots[i]
                s.option["beliefs"].append(beliefs[r])
                actions[i] = _sample(probs[r], s.rng, cfg.greedy or cfg.lang_greedy)

        for i, s in enumerate(slots):
            self._apply(s, Action(actions[i]), E[i], i in query)

    def _trigger(self, slots, free, X, G, mem_refs, goal_probs) -> set[int]:
        cfg, ag = self.cfg, self.agents
        cap = cfg.k_allowed
        out = set()
        if cfg.trigger == "learned":
            extra = np.stack([query_extra(slots[i].k, slots[i].j, cfg.K, cfg.tau_f) for i in free])
            mem, mask = gather_memory([mem_refs[i] for i in free]) if cfg.use_memory else (None, None)
            logits, vals, _ = ac_forward(ag.pi_q, X[free], G[free], extra, mem, mask)
            probs = softmax(logits)
            for r, i in enumerate(free):
                s = slots[i]
                p = probs[r] if cap is None else mask_query(probs[r], s.k < cap)
                a = _sample(p, s.rng, cfg.greedy)
                if self.on_query_decision is not None:
                    s.pending_q = Decision(X[i], G[i], extra[r], s.enc, s.t, a,
                                           float(np.log(max(p[a], 1e-300))), float(vals[r]))
                    self._open_query_decision(s)
                if a == 1:
                    out.add(i)
            return out
        for i in free:
            s = slots[i]
            if cap is not None and s.k >= cap:
                continue
            if cfg.trigger in ("random", "uniform"):
                if s.schedule and s.t >= s.schedule[0]:
                    s.schedule.pop(0)
                    out.add(i)
            elif cfg.trigger == "mu":
                if mu_fires(goal_probs[i][0], cfg.mu_threshold):
                    out.add(i)
        return out

    def _open_query_decision(self, s: Slot) -> None:
        # the previous query-level decision is complete once a new one is taken
        if s.open_q is not None:
            self.on_query_decision(s.open_q, s)
        s.open_q = s.pending_q
        s.pending_q = None

    def _start_option(self, s: Slot) -> None:
        cfg, ag = self.cfg, self.agents
        s.k += 1
        penalty = zeta_q(s.k, cfg.K, cfg.nu, cfg.r_neg) + zeta_f(s.j, cfg.tau_f, cfg.r_f)
        s.j = 0
        s.queries.append(s.t)
        fb = answer_query(s.scene, s.pose, s.goal_cell, cfg.feedback, cfg.speaker, cfg.nu,
                          vocab=ag.vocab, rng=s.rng)
        entry = {"t": s.t, "query": True, "penalty": penalty}
        if isinstance(fb, GtActionsFeedback):
            s.option = {"kind": "gt_actions", "actions": [int(a) for a in fb.actions], "done": 0}
            entry["gt_actions"] = s.option["actions"]
        else:
            tokens = np.array(fb.instruction.tokens)
            instr = embed_instruction(ag.pi_l, tokens, ag.lang_cfg.ramp_scale if ag.lang_cfg else 1.0)
            s.option = {"kind": "language", "instr": instr, "beliefs": [], "done": 0,
                        "tokens": list(fb.instruction.tokens)}
            entry["instruction"] = s.option["tokens"]
            if self.on_query_pair is not None:
                x, g, acts, _ = teacher_rollout(
                    s.scene, s.pose, s.goal_cell, cfg.nu, s.spec.start, s.prev_action,
                    ag.signatures.shape[1], s.spec, s.t, s.g, ag.goal_est, ag.signatures,
                    ag.audio_cfg, np.random.default_rng([s.index, s.t, 0x7EAC]))
                self.on_query_pair(TeacherPair(fb.instruction.tokens, acts, x, g,
                                               s.spec.scene_seed, s.pose))
        s.option["penalty"] = penalty
        s.option_log = entry
        if s.open_q is not None:
            s.open_q.reward += penalty

    def _apply(self, s: Slot, a: Action, e: np.ndarray, queried: bool) -> None:
        cfg = self.cfg
        s.enc[s.t] = e
        prev_pose = s.pose
        s.pose = step(s.scene, s.pose, a)
        if s.pose.cell != prev_pose.cell:
            s.path_len += 1
        d_now = float(s.scene.distance_field(s.goal_cell)[s.pose.y, s.pose.x])
        stop = a == Action.STOP
        success = stop and d_now <= cfg.success_radius
        r = nav_reward(s.d_prev, d_now, success, cfg.binary_progress)
        s.d_prev = d_now
        kind = "goal" if s.option is None else s.option["kind"]
        if cfg.log:
            rec = {"t": s.t, "pose": s.pose.to_list(), "action": int(a), "option": kind,
                   "reward": round(r, 6), "query": bool(queried)}
            if queried:
                opt_log = s.option_log
                rec["penalty"] = round(opt_log["penalty"], 6)
                for key in ("instruction", "gt_actions"):
                    if key in opt_log:
                        rec[key] = opt_log[key]
            s.log.append(rec)
        s.t += 1
        s.j += 1
        s.prev_action = a
        if stop:
            s.done = True
            s.success = success
            if success:
                s.reach_step = s.t - 1
        elif s.t >= cfg.max_steps:
            s.done = True

        # credit the reward to the open decisions
        if s.pending is not None:
            s.pending.reward = r
            s.pending.duration = 1
            s.pending.done = s.done
            self.on_goal_decision(s.pending, s)
            s.pending = None
        open_q = s.open_q
        if open_q is not None:
            open_q.reward += open_q.discount * r
            open_q.discount *= cfg.gamma
            open_q.duration += 1
            open_q.done = s.done

        if s.option is not None:
            s.option["done"] += 1
            if stop or s.option["done"] >= cfg.nu or s.done:
                if s.option["kind"] == "language":
                    s.lang_steps.append(s.option["done"])
                s.option = None
        if s.done:
            if open_q is not None and self.on_query_decision is not None:
                self.on_query_decision(open_q, s)
                s.open_q = None
            return
        self._observe(s, prev_pose)

    def flush(self, s: Slot) -> None:
        """Hand over a still-open query decision (used at rollout boundaries)."""
        if s.open_q is not None and self.on_query_decision is not None:
            self.on_query_decision(s.open_q, s)
        s.open_q = None

    # convenience ----------------------------------------------------------------

    def run(self, specs: Sequence[EpisodeSpec], seed: int, start_index: int = 0) -> list[Slot]:
        """Run every episode to completion; returns the finished slots in input order."""
        slots = [self.new_slot(sp, seed, start_index + i) for i, sp in enumerate(specs)]
        live = list(slots)
        while live:
            self.tick(live)
            live = [s for s in live if not s.done]
        return slots


def controller_step(controller: Controller, slot: Slot) -> Slot:
    """Single-episode step; raises UsageError on a finished episode."""
    if slot.done:
        raise UsageError("episode already finished")
    controller.tick([slot])
    return slot


def episode_summary(s: Slot) -> dict:
    return {
        "success": bool(s.success),
        "path_len": float(s.path_len),
        "shortest_len": float(s.shortest_len),
        "actions_taken": int(s.t),
        "min_actions": int(s.min_actions),
        "dtg": float(s.d_prev),
        "sound_end_step": int(sound_end_step(s.spec)),
        "sound_duration": int(s.spec.sound_duration),
        "reach_step": s.reach_step,
        "queries": list(s.queries),
        "lang_steps": list(s.lang_steps),
    }
