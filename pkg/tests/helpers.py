"""Shared builders for the gradient checks and independent oracles used by the tests."""
from __future__ import annotations

from collections import deque

import numpy as np

from querynav.language import LangConfig, imitation_loss_and_grads, init_lang_params
from querynav.nn import numerical_grads, rel_error
from querynav.percept import (N_LOC_FEATURES, classifier_loss_and_grads, init_goal_estimator,
                              regressor_loss_and_grads)
from querynav.policy import ac_backward, ac_forward, init_actor_critic
from querynav.train import OptimConfig, ppo_loss_and_grads
from querynav.world import HEADING_VECTORS, Action, Heading, Pose

OBS, GOAL, D, DZ = 7, 5, 4, 5


def _randomize(p, rng, scale=0.5):
    for k in p:
        p[k] = rng.normal(0.0, scale, size=p[k].shape)
    return p


def _ac_inputs(rng, p, B, extra_dim, with_memory):
    x = rng.normal(size=(B, OBS))
    gin = rng.normal(size=(B, GOAL))
    extra = rng.normal(size=(B, extra_dim)) if extra_dim else None
    mem = mask = None
    if with_memory:
        T = 4
        mem = rng.normal(size=(B, T, D))
        mask = np.ones((B, T), bool)
        mask[0, 2:] = False
        mask[-1, :] = False
    return x, gin, extra, mem, mask


def check_actor_critic(rng, extra_dim=0, n_actions=4, with_memory=True) -> float:
    p = _randomize(init_actor_critic(rng, OBS, n_actions, extra_dim, GOAL, D, DZ), rng)
    B = 3
    x, gin, extra, mem, mask = _ac_inputs(rng, p, B, extra_dim, with_memory)
    dl = rng.normal(size=(B, n_actions))
    dv = rng.normal(size=B)

    def f(q):
        logits, v, _ = ac_forward(q, x, gin, extra, mem, mask)
        return float((logits * dl).sum() + (v * dv).sum())

    _, _, cache = ac_forward(p, x, gin, extra, mem, mask)
    ana = ac_backward(p, cache, dl, dv)
    num = numerical_grads(f, p)
    return max(rel_error(ana[k], num[k]) for k in p)


def check_ppo_loss(rng, with_memory=True) -> float:
    p = _randomize(init_actor_critic(rng, OBS, 4, 3, GOAL, D, DZ), rng)
    B = 6
    x, gin, extra, mem, mask = _ac_inputs(rng, p, B, 3, with_memory)
    actions = rng.integers(0, 4, size=B)
    logits, _, _ = ac_forward(p, x, gin, extra, mem, mask)
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    # keep ratios away from the clip kinks at 0.8 / 1.2 so differences stay smooth
    shift = np.where(rng.random(B) < 0.5, rng.uniform(-0.05, 0.05, B),
                     rng.choice([-1, 1], B) * rng.uniform(0.6, 1.0, B))
    batch = {"x": x, "gin": gin, "extra": extra, "mem": mem, "mask": mask, "actions": actions,
             "old_logp": logp[np.arange(B), actions] + shift,
             "adv": rng.normal(size=B), "returns": rng.normal(size=B)}
    cfg = OptimConfig()
    _, ana, _ = ppo_loss_and_grads(p, batch, cfg, with_memory)
    num = numerical_grads(lambda q: ppo_loss_and_grads(q, batch, cfg, with_memory)[0], p)
    return max(rel_error(ana[k], num[k]) for k in p)


def tiny_lang_config() -> LangConfig:
    return LangConfig(obs_dim=6, goal_dim=5, vocab_size=10, d_tok=3, d_hidden=4, d_belief=4)


def lang_batch(rng, cfg: LangConfig, B=3):
    T = cfg.steps
    mask = np.ones((B, T), bool)
    mask[0, 2:] = False
    tokens = rng.integers(1, cfg.vocab_size, size=(B, 5))
    tokens[1, 3:] = 0
    return {"x": rng.normal(size=(B, T, cfg.obs_dim)), "g": rng.normal(size=(B, T, cfg.goal_dim)),
            "tokens": tokens, "actions": rng.integers(0, 4, size=(B, T)), "mask": mask}


def check_language(rng, mask_instruction=False) -> float:
    cfg = tiny_lang_config()
    p = _randomize(init_lang_params(cfg, rng), rng)
    p["tok_E"][0] = 0.0
    batch = lang_batch(rng, cfg)
    _, ana, _ = imitation_loss_and_grads(p, batch, cfg.ramp_scale, mask_instruction)
    num = numerical_grads(
        lambda q: imitation_loss_and_grads(q, batch, cfg.ramp_scale, mask_instruction)[0], p)
    return max(rel_error(ana[k], num[k]) for k in p)


def check_goal_classifier(rng) -> float:
    p = init_goal_estimator(rng, 6, n_categories=5, hidden=4)
    sub = _randomize({k: p[k] for k in ("cls_W", "cls_b")}, rng)
    sigs = rng.normal(size=(8, 6))
    labels = rng.integers(0, 5, size=8)
    _, ana = classifier_loss_and_grads(sub, sigs, labels)
    num = numerical_grads(lambda q: classifier_loss_and_grads(q, sigs, labels)[0], sub)
    return max(rel_error(ana[k], num[k]) for k in sub)


def check_goal_regressor(rng) -> float:
    p = init_goal_estimator(rng, 6, n_categories=5, hidden=4)
    sub = _randomize({k: p[k] for k in ("loc_W", "loc_b", "loc_W1", "loc_b1", "loc_W2")}, rng)
    feats = rng.normal(size=(8, N_LOC_FEATURES))
    targets = rng.normal(size=(8, 2))
    _, ana = regressor_loss_and_grads(sub, feats, targets)
    num = numerical_grads(lambda q: regressor_loss_and_grads(q, feats, targets)[0], sub)
    return max(rel_error(ana[k], num[k]) for k in sub)


GRADIENT_BLOCKS = {
    "pi_g actor-critic (memory)": lambda r: check_actor_critic(r, 0, 4, True),
    "pi_g actor-critic (no memory)": lambda r: check_actor_critic(r, 0, 4, False),
    "pi_q actor-critic": lambda r: check_actor_critic(r, 3, 2, True),
    "PPO loss": check_ppo_loss,
    "language policy": check_language,
    "language policy (masked)": lambda r: check_language(r, True),
    "goal classifier": check_goal_classifier,
    "goal regressor": check_goal_regressor,
}


# -- independent oracles ---------------------------------------------------------

def floyd_warshall(navigable: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    cells = [(x, y) for y in range(navigable.shape[0]) for x in range(navigable.shape[1])
             if navigable[y, x]]
    idx = {c: i for i, c in enumerate(cells)}
    n = len(cells)
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for (x, y), i in idx.items():
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            j = idx.get((x + dx, y + dy))
            if j is not None:
                dist[i, j] = 1.0
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    return dist, cells


def state_bfs_length(navigable: np.ndarray, pose: Pose, goal: tuple[int, int]) -> int | None:
    """Fewest primitive actions from ``pose`` to any heading at ``goal``."""
    h, w = navigable.shape
    start = (pose.x, pose.y, int(pose.heading))
    seen = {start: 0}
    q = deque([start])
    while q:
        x, y, hd = q.popleft()
        if (x, y) == goal:
            return seen[(x, y, hd)]
        dx, dy = HEADING_VECTORS[hd]
        nxt = [(x, y, (hd + 1) % 4), (x, y, (hd - 1) % 4)]
        if 0 <= x + dx < w and 0 <= y + dy < h and navigable[y + dy, x + dx]:
            nxt.append((x + dx, y + dy, hd))
        for s in nxt:
            if s not in seen:
                seen[s] = seen[(x, y, hd)] + 1
                q.append(s)
    return None


def brute_force_returns(rewards, values, dones, last_value, gamma, lam, durations):
    """GAE written as the explicit lambda-weighted sum of TD residuals."""
    n = len(rewards)
    disc = [gamma ** durations[i] * (0.0 if dones[i] else 1.0) for i in range(n)]
    vnext = [values[i + 1] if i + 1 < n else last_value for i in range(n)]
    delta = [rewards[i] + disc[i] * vnext[i] - values[i] for i in range(n)]
    adv = []
    for t in range(n):
        total, weight = 0.0, 1.0
        for k in range(t, n):
            total += weight * delta[k]
            weight *= disc[k] * lam
        adv.append(total)
    return np.array(adv)


def brute_metrics(episodes: list[dict]) -> dict:
    """Per-episode loops over plain dicts; shares no code with the package."""
    n = len(episodes)
    sr = spl = sna = dtg = sws = 0.0
    for e in episodes:
        dtg += e["dtg"]
        if not e["success"]:
            continue
        sr += 1
        spl += e["shortest_len"] / max(e["path_len"], e["shortest_len"]) \
            if max(e["path_len"], e["shortest_len"]) > 0 else 1.0
        sna += e["min_actions"] / max(e["actions_taken"], e["min_actions"])
        if e["reach_step"] is not None and e["reach_step"] > e["sound_end_step"]:
            sws += 1
    return {"SR": sr / n, "SPL": spl / n, "SNA": sna / n, "DTG": dtg / n, "SWS": sws / n}


HANDCRAFTED_EPISODES = [
    # success on the shortest path
    dict(success=True, path_len=8, shortest_len=8, actions_taken=10, min_actions=10, dtg=0.0,
         sound_end_step=15, reach_step=9),
    # success with twice the shortest path
    dict(success=True, path_len=12, shortest_len=6, actions_taken=20, min_actions=8, dtg=1.0,
         sound_end_step=15, reach_step=19),
    # failure far away
    dict(success=False, path_len=30, shortest_len=9, actions_taken=500, min_actions=12, dtg=7.0,
         sound_end_step=20, reach_step=None),
    # reached after the sound ended
    dict(success=True, path_len=14, shortest_len=10, actions_taken=25, min_actions=14, dtg=1.0,
         sound_end_step=12, reach_step=24),
    # reached exactly when the sound ended (not counted as silent)
    dict(success=True, path_len=5, shortest_len=5, actions_taken=7, min_actions=7, dtg=0.0,
         sound_end_step=6, reach_step=6),
    # stopped early, wrong place
    dict(success=False, path_len=2, shortest_len=11, actions_taken=3, min_actions=14, dtg=9.0,
         sound_end_step=30, reach_step=None),
    # success with zero-length path (started inside the radius)
    dict(success=True, path_len=0, shortest_len=0, actions_taken=1, min_actions=1, dtg=1.0,
         sound_end_step=8, reach_step=0),
    dict(success=True, path_len=21, shortest_len=7, actions_taken=40, min_actions=9, dtg=0.0,
         sound_end_step=5, reach_step=39),
    dict(success=False, path_len=60, shortest_len=13, actions_taken=500, min_actions=16,
         dtg=4.0, sound_end_step=22, reach_step=None),
    dict(success=True, path_len=9, shortest_len=9, actions_taken=13, min_actions=12, dtg=1.0,
         sound_end_step=40, reach_step=12),
    dict(success=False, path_len=0, shortest_len=5, actions_taken=1, min_actions=6, dtg=6.0,
         sound_end_step=10, reach_step=None),
    dict(success=True, path_len=17, shortest_len=4, actions_taken=33, min_actions=6, dtg=0.0,
         sound_end_step=11, reach_step=32),
    dict(success=True, path_len=6, shortest_len=5, actions_taken=9, min_actions=8, dtg=1.0,
         sound_end_step=9, reach_step=8),
    dict(success=False, path_len=44, shortest_len=10, actions_taken=120, min_actions=14,
         dtg=2.0, sound_end_step=14, reach_step=None),
    dict(success=True, path_len=10, shortest_len=10, actions_taken=14, min_actions=13, dtg=0.0,
         sound_end_step=500, reach_step=13),
    dict(success=True, path_len=3, shortest_len=3, actions_taken=5, min_actions=4, dtg=1.0,
         sound_end_step=5, reach_step=4),
    dict(success=False, path_len=11, shortest_len=11, actions_taken=12, min_actions=12,
         dtg=2.0, sound_end_step=7, reach_step=None),
    dict(success=True, path_len=25, shortest_len=12, actions_taken=60, min_actions=15, dtg=1.0,
         sound_end_step=16, reach_step=59),
    dict(success=True, path_len=7, shortest_len=6, actions_taken=11, min_actions=9, dtg=0.0,
         sound_end_step=10, reach_step=10),
    dict(success=False, path_len=19, shortest_len=8, actions_taken=500, min_actions=11,
         dtg=3.0, sound_end_step=18, reach_step=None),
]


def turn_to(pose: Pose, heading: Heading) -> list[Action]:
    diff = (int(heading) - int(pose.heading)) % 4
    return {0: [], 1: [Action.TURN_RIGHT], 2: [Action.TURN_RIGHT] * 2, 3: [Action.TURN_LEFT]}[diff]


def ascii_scene(rows: list[str], objects=(), seed: int = 0):
    """'#' wall, '.' hallway, a digit d marks room type d; objects are (id, category, (x, y))."""
    from querynav.world import Scene, SemanticObject
    h, w = len(rows), len(rows[0])
    labels = np.full((h, w), -1, dtype=np.int8)
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == ".":
                labels[y, x] = 0
            elif ch.isdigit():
                labels[y, x] = int(ch)
    objs = [SemanticObject(i, c, cell) for i, c, cell in objects]
    return Scene(w, h, labels >= 0, labels, objs, seed)


def corridor(length: int = 10, objects=()):
    """A one-cell-high east-west corridor framed by walls."""
    wall = "#" * (length + 2)
    return ascii_scene([wall, "#" + "." * length + "#", wall], objects)


def random_segments(count: int, seed: int = 0, params=None):
    """(scene, segment) pairs from random start poses and goals in generated scenes."""
    from querynav.oracle import extract_segment
    from querynav.world import SceneParams, generate_scene
    params = params or SceneParams(16, 16, 4, 8)
    rng = np.random.default_rng(seed)
    scenes = [generate_scene(seed * 1000 + i, params) for i in range(10)]
    out = []
    while len(out) < count:
        scene = scenes[int(rng.integers(len(scenes)))]
        cells = scene.navigable_cells()
        a, b = (cells[i] for i in rng.integers(len(cells), size=2))
        if a == b:
            continue
        pose = Pose(a[0], a[1], Heading(int(rng.integers(4))))
        n = int(rng.integers(1, 5))
        seg = extract_segment(scene, pose, b, n)
        if len(seg):
            out.append((scene, seg))
    return out


def make_agents(seed: int = 0, stop_logit: float | None = None, forward_logit: float | None = None,
                lang_forward: float | None = None, with_query: bool = True):
    """Small random agents; optional logit overrides make behaviour predictable."""
    from querynav.episode import make_splits
    from querynav.language import LangConfig, init_lang_params
    from querynav.percept import init_goal_estimator, obs_dim
    from querynav.policy import Agents, QUERY_EXTRA_DIM, init_actor_critic
    rng = np.random.default_rng(seed)
    sigs = make_splits(0)["heard"].category_signatures
    od = obs_dim(sigs.shape[1])
    pi_g = init_actor_critic(rng, od, 4, d=8, d_z=8)
    if stop_logit is not None:
        pi_g["pi_W"][:] = 0.0
        pi_g["pi_b"][:] = 0.0
        pi_g["pi_b"][int(Action.STOP)] = stop_logit
    if forward_logit is not None:
        pi_g["pi_W"][:] = 0.0
        pi_g["pi_b"][:] = 0.0
        pi_g["pi_b"][int(Action.FORWARD)] = forward_logit
    lang_cfg = LangConfig(obs_dim=od, d_tok=4, d_hidden=8, d_belief=8)
    pi_l = init_lang_params(lang_cfg, rng)
    if lang_forward is not None:
        pi_l["a_b"][int(Action.FORWARD)] = lang_forward
    pi_q = init_actor_critic(rng, od, 2, QUERY_EXTRA_DIM, d=8, d_z=8) if with_query else None
    return Agents(pi_g, init_goal_estimator(rng, sigs.shape[1]), sigs, pi_q=pi_q, pi_l=pi_l,
                  lang_cfg=lang_cfg)
