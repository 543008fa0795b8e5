"""Language-following option policy and its imitation training.

Per option step the policy pools the observation and goal descriptor with a
small attention block, fuses the result with the instruction embedding and
an option-step code, attends over the beliefs produced earlier in the same
option, and reads out a distribution over the four navigation actions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from querynav.episode import EpisodeSpec
from querynav.errors import InputError, TrainingError
from querynav.nn import (
    Adam, Params, attend, attend_backward, copy_params, init_linear, linear_backward,
    log_softmax, softmax,
)
from querynav.oracle import (
    MAX_TOKENS, OPTION_STEPS, SEGMENT_LENGTH, Instruction, SpeakerConfig, Vocabulary,
    extract_segment, speak,
)
from querynav.percept import (
    AudioConfig, GoalDescriptor, LANG_MEMORY_SIZE, action_onehot, encode_observation,
    estimate_goal, fuse_goal, obs_dim, pose_delta, step_delta,
)
from querynav.world import (
    NUM_ACTIONS, NUM_CATEGORIES, Action, Heading, Pose, Scene, next_optimal_action,
    render_visual, step,
)

__all__ = [
    "Vocabulary", "LangConfig", "init_lang_params", "embed_instruction", "lang_step",
    "lang_forward_sequence", "imitation_loss_and_grads", "imitation_update",
    "pretrain_offline", "online_finetune", "greedy_match_lengths", "build_offline_corpus",
    "step_accuracy", "teacher_rollout", "collate", "TeacherPair", "goal_input", "pad_tokens",
    "lang_step_batch", "train_imitation", "GOAL_DIM",
]

GOAL_DIM = 2 + 2 * NUM_CATEGORIES  # location, category probs, target one-hot


@dataclass(frozen=True)
class LangConfig:
    obs_dim: int
    goal_dim: int = GOAL_DIM
    vocab_size: int = len(Vocabulary.default())
    d_tok: int = 32
    d_hidden: int = 64
    d_belief: int = 64
    steps: int = OPTION_STEPS
    ramp_scale: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def init_lang_params(cfg: LangConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    p["tok_E"] = rng.normal(0.0, 0.5, size=(cfg.vocab_size, cfg.d_tok))
    p["tok_E"][0] = 0.0
    p["t1_We"], p["t1_be"] = init_linear(rng, cfg.obs_dim, cfg.d_hidden)
    p["t1_Wg"], p["t1_bg"] = init_linear(rng, cfg.goal_dim, cfg.d_hidden)
    p["t1_Wq"], _ = init_linear(rng, cfg.d_hidden, cfg.d_hidden)
    fin = 2 * cfg.d_hidden + 2 * cfg.d_tok + cfg.steps
    p["f_W"], p["f_b"] = init_linear(rng, fin, cfg.d_belief)
    p["t2_Wq"], _ = init_linear(rng, cfg.d_belief, cfg.d_belief)
    p["b_W"], p["b_b"] = init_linear(rng, 2 * cfg.d_belief, cfg.d_belief)
    # zero readout: the untrained policy is exactly uniform
    p["a_W"] = np.zeros((cfg.d_belief, NUM_ACTIONS))
    p["a_b"] = np.zeros(NUM_ACTIONS)
    p["v_W"], p["v_b"] = init_linear(rng, cfg.d_belief, 1, scale=0.1)
    return p


def pad_tokens(instructions: Sequence[Instruction]) -> np.ndarray:
    out = np.zeros((len(instructions), MAX_TOKENS), dtype=np.int64)
    for i, ins in enumerate(instructions):
        out[i, :len(ins.tokens)] = ins.tokens
    return out


def _ramp(n: int) -> np.ndarray:
    return np.arange(n) / max(n - 1, 1)


def embed_instruction(params: Params, tokens: np.ndarray, ramp_scale: float = 1.0) -> np.ndarray:
    """Mean token embedding, concatenated with a position-ramp-weighted mean.

    ``tokens`` is (B, N) padded with 0 or a single 1-D sequence.
    """
    single = tokens.ndim == 1
    tokens = np.atleast_2d(tokens)
    mask = tokens != 0
    counts = mask.sum(1)
    if np.any(counts == 0):
        raise InputError("cannot embed an empty instruction")
    emb = params["tok_E"][tokens] * mask[..., None]
    ramp = _ramp(tokens.shape[1])
    mean = emb.sum(1) / counts[:, None]
    ramped = (emb * ramp[None, :, None]).sum(1) / counts[:, None]
    out = np.concatenate([mean, ramp_scale * ramped], axis=1)
    return out[0] if single else out


def _embed_backward(dvec: np.ndarray, tokens: np.ndarray, params: Params,
                    ramp_scale: float) -> np.ndarray:
    d_tok = params["tok_E"].shape[1]
    mask = tokens != 0
    counts = mask.sum(1)
    ramp = _ramp(tokens.shape[1])
    dmean = dvec[:, :d_tok] / counts[:, None]
    dramp = ramp_scale * dvec[:, d_tok:] / counts[:, None]
    per_tok = (dmean[:, None, :] + dramp[:, None, :] * ramp[None, :, None]) * mask[..., None]
    grad = np.zeros_like(params["tok_E"])
    np.add.at(grad, tokens.ravel(), per_tok.reshape(-1, d_tok))
    grad[0] = 0.0
    return grad


def _step_forward(p: Params, x, g, instr, k: int, n_steps: int, hist, hist_mask):
    """One option step for a batch. ``hist`` is (B, k, d_b) or None."""
    B = x.shape[0]
    he = np.tanh(x @ p["t1_We"] + p["t1_be"])
    hg = np.tanh(g @ p["t1_Wg"] + p["t1_bg"])
    q1 = hg @ p["t1_Wq"]
    c1, a1 = attend(he[:, None, :], np.ones((B, 1), bool), hg, q1)
    pos = np.zeros((B, n_steps))
    pos[:, k] = 1.0
    fin = np.concatenate([c1, he, instr, pos], axis=1)
    f = np.tanh(fin @ p["f_W"] + p["f_b"])
    q2 = f @ p["t2_Wq"]
    c2, a2 = attend(hist, hist_mask, f, q2)
    bin_ = np.concatenate([f, c2], axis=1)
    b = np.tanh(bin_ @ p["b_W"] + p["b_b"])
    logits = b @ p["a_W"] + p["a_b"]
    cache = (x, g, he, hg, q1, a1, fin, f, q2, a2, hist, bin_, b)
    return logits, b, cache


def _step_backward(p: Params, grads: Params, dlogits, db_extra, cache):
    """Accumulates parameter grads; returns (dinstr, dhist)."""
    x, g, he, hg, q1, a1, fin, f, q2, a2, hist, bin_, b = cache
    d_b = f.shape[1]
    d_instr = 2 * p["tok_E"].shape[1]
    db, dw, dbias = linear_backward(dlogits, b, p["a_W"])
    grads["a_W"] += dw
    grads["a_b"] += dbias
    db = db + db_extra
    dpre = db * (1 - b ** 2)
    dbin, dw, dbias = linear_backward(dpre, bin_, p["b_W"])
    grads["b_W"] += dw
    grads["b_b"] += dbias
    df = dbin[:, :d_b].copy()
    dc2 = dbin[:, d_b:]
    dhist, dcur, dq2 = attend_backward(dc2, hist, f, q2, a2)
    df += dcur
    dfq, dw = dq2 @ p["t2_Wq"].T, f.T @ dq2
    grads["t2_Wq"] += dw
    df += dfq
    dpre = df * (1 - f ** 2)
    dfin, dw, dbias = linear_backward(dpre, fin, p["f_W"])
    grads["f_W"] += dw
    grads["f_b"] += dbias
    h = p["t1_We"].shape[1]
    dc1 = dfin[:, :h]
    dhe = dfin[:, h:2 * h].copy()
    dinstr = dfin[:, 2 * h:2 * h + d_instr]
    dmem, dhg, dq1 = attend_backward(dc1, he[:, None, :], hg, q1, a1)
    dhe += dmem[:, 0, :]
    grads["t1_Wq"] += hg.T @ dq1
    dhg = dhg + dq1 @ p["t1_Wq"].T
    dpre = dhg * (1 - hg ** 2)
    _, dw, dbias = linear_backward(dpre, g, p["t1_Wg"])
    grads["t1_Wg"] += dw
    grads["t1_bg"] += dbias
    dpre = dhe * (1 - he ** 2)
    _, dw, dbias = linear_backward(dpre, x, p["t1_We"])
    grads["t1_We"] += dw
    grads["t1_be"] += dbias
    return dinstr, dhist


def lang_step(params: Params, e_obs: np.ndarray, g: np.ndarray, instr_vec: np.ndarray,
              belief_history: Sequence[np.ndarray], n_steps: int = OPTION_STEPS):
    """Single-sample step: returns (action probabilities, new belief).

    ``belief_history`` holds the beliefs already produced in this option;
    its length is the option step index.
    """
    k = len(belief_history)
    if k >= LANG_MEMORY_SIZE or k >= n_steps:
        raise InputError(f"belief history of length {k} exceeds the option window")
    hist = np.stack(belief_history)[None] if k else None
    mask = np.ones((1, k), bool) if k else None
    logits, b, _ = _step_forward(params, e_obs[None], g[None], instr_vec[None], k,
                                 n_steps, hist, mask)
    return softmax(logits)[0], b[0]


def lang_step_batch(params: Params, x, g, instr, k: int, hist, n_steps: int = OPTION_STEPS):
    """Batched step for envs that share option step ``k``; ``hist`` is (B, k, d_b) or None."""
    mask = np.ones(hist.shape[:2], bool) if hist is not None else None
    logits, b, _ = _step_forward(params, x, g, instr, k, n_steps, hist, mask)
    return softmax(logits), b


def lang_forward_sequence(params: Params, x: np.ndarray, g: np.ndarray, instr: np.ndarray,
                          n_steps: int = OPTION_STEPS):
    """Teacher-forced unroll. x: (B, T, D_e), g: (B, T, D_g), instr: (B, D_i).

    Returns logits (B, T, A) and the per-step caches.
    """
    B, T = x.shape[:2]
    beliefs = []
    caches = []
    logits_all = []
    for k in range(T):
        hist = np.stack(beliefs, axis=1) if beliefs else None
        mask = np.ones((B, k), bool) if beliefs else None
        logits, b, cache = _step_forward(params, x[:, k], g[:, k], instr, k, n_steps, hist, mask)
        beliefs.append(b)
        caches.append(cache)
        logits_all.append(logits)
    return np.stack(logits_all, axis=1), caches


def imitation_loss_and_grads(params: Params, batch: dict, ramp_scale: float = 1.0,
                             mask_instruction: bool = False, n_steps: int = OPTION_STEPS):
    """Mean cross-entropy of teacher actions over valid steps, with exact gradients.

    batch keys: ``x`` (B,T,D_e), ``g`` (B,T,D_g), ``tokens`` (B,N), ``actions``
    (B,T) int, ``mask`` (B,T) bool.
    """
    tokens = batch["tokens"]
    instr = embed_instruction(params, tokens, ramp_scale)
    if mask_instruction:
        instr = np.zeros_like(instr)
    logits, caches = lang_forward_sequence(params, batch["x"], batch["g"], instr, n_steps)
    mask = batch["mask"].astype(float)
    n_valid = mask.sum()
    if n_valid == 0:
        raise TrainingError("imitation batch has no valid steps")
    logp = log_softmax(logits)
    B, T = batch["actions"].shape
    picked = np.take_along_axis(logp, batch["actions"][..., None], axis=2)[..., 0]
    loss = float(-(picked * mask).sum() / n_valid)
    dlogits = np.exp(logp)
    bi, ti = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    dlogits[bi, ti, batch["actions"]] -= 1.0
    dlogits *= (mask / n_valid)[..., None]

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dinstr = np.zeros_like(instr)
    dbeliefs = [np.zeros((B, params["b_W"].shape[1])) for _ in range(T)]
    for k in reversed(range(T)):
        di, dhist = _step_backward(params, grads, dlogits[:, k], dbeliefs[k], caches[k])
        dinstr += di
        if dhist is not None:
            for j in range(k):
                dbeliefs[j] += dhist[:, j]
    if not mask_instruction:
        grads["tok_E"] += _embed_backward(dinstr, tokens, params, ramp_scale)
    return loss, grads, logits


def imitation_update(params: Params, opt: Adam, batch: dict, ramp_scale: float = 1.0):
    """One Adam step on the imitation loss; returns the pre-update loss."""
    loss, grads, _ = imitation_loss_and_grads(params, batch, ramp_scale)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite imitation loss {loss}")
    opt.step(params, grads)
    return loss


def greedy_match_lengths(params: Params, batch: dict, ramp_scale: float = 1.0,
                         mask_instruction: bool = False) -> np.ndarray:
    """Number of leading valid steps whose greedy action equals the teacher's.

    Under teacher forcing this equals how far a greedy rollout stays on the
    teacher path, since the inputs only diverge after the first mismatch.
    A fully matched pair reports its full length ``T``.
    """
    instr = embed_instruction(params, batch["tokens"], ramp_scale)
    if mask_instruction:
        instr = np.zeros_like(instr)
    logits, _ = lang_forward_sequence(params, batch["x"], batch["g"], instr)
    ok = (logits.argmax(-1) == batch["actions"]) | ~batch["mask"]
    T = ok.shape[1]
    first_bad = np.where(ok.all(1), T, np.argmin(ok, axis=1))
    return first_bad


# -- corpora ---------------------------------------------------------------------

@dataclass
class TeacherPair:
    """One instruction with the teacher-forced inputs and actions of an option."""

    tokens: tuple[int, ...]
    actions: list[int]
    x: np.ndarray  # (T, D_e)
    g: np.ndarray  # (T, D_g)
    scene_seed: int
    start: Pose

    def to_record(self) -> dict:
        return {"instruction": list(self.tokens), "actions": self.actions,
                "scene_seed": self.scene_seed, "start": self.start.to_list()}


def goal_input(g: GoalDescriptor, target_onehot: Sequence[float] | None) -> np.ndarray:
    onehot = np.zeros(NUM_CATEGORIES) if target_onehot is None else np.asarray(target_onehot)
    return np.concatenate([g.vector(), onehot])


def teacher_rollout(scene: Scene, pose: Pose, goal: tuple[int, int], steps: int,
                    episode_start: Pose, prev_action: Action | None,
                    signature_dim: int, spec: EpisodeSpec | None = None, t0: int = 0,
                    goal_state: GoalDescriptor | None = None, goal_params: Params | None = None,
                    signatures: np.ndarray | None = None,
                    audio_cfg: AudioConfig = AudioConfig(),
                    rng: np.random.Generator | None = None):
    """Follow the shortest-path teacher for up to ``steps`` steps, stopping after Stop.

    Without ``spec`` the world is silent and the goal descriptor stays at its
    uninformative initial value. Returns (x, g, actions, valid-count).
    """
    xs, gs, acts = [], [], []
    g = goal_state or GoalDescriptor.initial()
    onehot = spec.target_onehot if spec is not None else None
    for k in range(steps):
        if spec is not None:
            emb = encode_observation(scene, pose, spec, t0 + k, prev_action, signatures,
                                     audio_cfg, rng)
            if k > 0 and goal_params is not None:
                ghat = estimate_goal(goal_params, emb.audio)
                g = fuse_goal(g, ghat, step_delta(prev_pose, pose), emb.audio.audible)
            vec = emb.vector()
        else:
            visual = render_visual(scene, pose)
            audio = np.zeros(2 + signature_dim)
            dx, dy, dh = pose_delta(episode_start, pose)
            ang = dh * np.pi / 2
            vec = np.concatenate([visual, audio, action_onehot(prev_action),
                                  [dx / 10.0, dy / 10.0, np.cos(ang), np.sin(ang)]])
        teacher = next_optimal_action(scene, pose, goal)
        a = Action.STOP if teacher is None else teacher
        xs.append(vec)
        gs.append(goal_input(g, onehot))
        acts.append(int(a))
        if a == Action.STOP:
            break
        prev_pose = pose
        pose = step(scene, pose, a)
        prev_action = a
    return np.array(xs), np.array(gs), acts, len(acts)


def build_offline_corpus(scenes: Sequence[Scene], speaker_cfg: SpeakerConfig, count: int,
                         rng: np.random.Generator, signature_dim: int,
                         vocab: Vocabulary | None = None, steps: int = OPTION_STEPS) -> list[TeacherPair]:
    """Random shortest-path segments in silent scenes, spoken by the template speaker."""
    if count < 1:
        raise TrainingError("need at least one training pair")
    vocab = vocab or Vocabulary.default()
    pairs = []
    while len(pairs) < count:
        scene = scenes[int(rng.integers(len(scenes)))]
        cells = scene.navigable_cells()
        goal = cells[int(rng.integers(len(cells)))]
        sx, sy = cells[int(rng.integers(len(cells)))]
        pose = Pose(sx, sy, Heading(int(rng.integers(4))))
        if pose.cell == goal:
            continue
        ex, ey = cells[int(rng.integers(len(cells)))]
        ep_start = Pose(ex, ey, Heading(int(rng.integers(4))))
        prev = [None, Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT][int(rng.integers(4))]
        seg = extract_segment(scene, pose, goal, SEGMENT_LENGTH)
        ins = speak(seg, scene, speaker_cfg, vocab, rng)
        x, g, acts, _ = teacher_rollout(scene, pose, goal, steps, ep_start, prev, signature_dim)
        pairs.append(TeacherPair(ins.tokens, acts, x, g, scene.seed, pose))
    return pairs


def collate(pairs: Sequence[TeacherPair], steps: int = OPTION_STEPS) -> dict:
    B = len(pairs)
    d_e = pairs[0].x.shape[1]
    d_g = pairs[0].g.shape[1]
    x = np.zeros((B, steps, d_e))
    g = np.zeros((B, steps, d_g))
    actions = np.zeros((B, steps), dtype=np.int64)
    mask = np.zeros((B, steps), dtype=bool)
    tokens = np.zeros((B, MAX_TOKENS), dtype=np.int64)
    for i, pr in enumerate(pairs):
        n = len(pr.actions)
        x[i, :n] = pr.x
        g[i, :n] = pr.g
        # padded steps repeat the last input; they are masked out of the loss
        x[i, n:] = pr.x[n - 1]
        g[i, n:] = pr.g[n - 1]
        actions[i, :n] = pr.actions
        mask[i, :n] = True
        tokens[i, :len(pr.tokens)] = pr.tokens
    return {"x": x, "g": g, "actions": actions, "mask": mask, "tokens": tokens}


def step_accuracy(params: Params, pairs: Sequence[TeacherPair], n: int,
                  mask_instruction: bool = False, batch: int = 512) -> float:
    """Fraction of pairs whose first ``n`` valid greedy actions all match the teacher."""
    if not 1 <= n <= OPTION_STEPS:
        raise InputError("n must lie in [1, 3]")
    hits = 0
    for i in range(0, len(pairs), batch):
        chunk = pairs[i:i + batch]
        b = collate(chunk)
        lengths = greedy_match_lengths(params, b, mask_instruction=mask_instruction)
        valid = b["mask"].sum(1)
        hits += int(((lengths >= np.minimum(n, valid))).sum())
    return hits / len(pairs)


def train_imitation(params: Params, pairs: Sequence[TeacherPair], val: Sequence[TeacherPair],
                    lr: float, rng: np.random.Generator, batch: int = 64,
                    max_epochs: int = 60, patience: int = 4, log=None) -> tuple[Params, list[dict]]:
    """Imitation epochs with early stopping on validation step-1 accuracy."""
    opt = Adam(lr, max_grad_norm=5.0)
    best = copy_params(params)
    best_acc = step_accuracy(params, val, 1) if val else 0.0
    history = []
    stale = 0
    for epoch in range(max_epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for i in range(0, len(order), batch):
            chunk = [pairs[j] for j in order[i:i + batch]]
            losses.append(imitation_update(params, opt, collate(chunk)))
        acc = step_accuracy(params, val, 1) if val else 0.0
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_step1": acc}
        history.append(row)
        if log:
            log(row)
        if acc > best_acc:
            best_acc, best, stale = acc, copy_params(params), 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best, history


def pretrain_offline(speaker_cfg: SpeakerConfig, scenes: Sequence[Scene], count: int,
                     seed: int = 0, signature_dim: int = 16, lr: float = 1e-3,
                     val_fraction: float = 0.1, max_epochs: int = 60, patience: int = 4,
                     log=None) -> tuple[Params, LangConfig, dict]:
    """Generate ``count`` instruction/segment pairs and fit the policy by imitation."""
    if count < 1:
        raise TrainingError("zero training pairs")
    rng = np.random.default_rng([seed, 0x1A9])
    cfg = LangConfig(obs_dim=obs_dim(signature_dim))
    params = init_lang_params(cfg, rng)
    pairs = build_offline_corpus(scenes, speaker_cfg, count, rng, signature_dim)
    n_val = max(1, int(round(val_fraction * count))) if count > 1 else 0
    val, train = pairs[:n_val], pairs[n_val:] or pairs
    params, history = train_imitation(params, train, val, lr, rng, max_epochs=max_epochs,
                                      patience=patience, log=log)
    return params, cfg, {"history": history, "n_train": len(train), "n_val": len(val)}


def online_finetune(params: Params, pairs: Sequence[TeacherPair], opt: Adam,
                    batch: int = 64, rng: np.random.Generator | None = None) -> tuple[Params, list[float]]:
    """Imitation steps on pairs collected from queries during training; no pairs, no change."""
    if not pairs:
        return params, []
    rng = rng or np.random.default_rng(0)
    order = rng.permutation(len(pairs))
    losses = []
    for i in range(0, len(order), batch):
        chunk = [pairs[j] for j in order[i:i + batch]]
        losses.append(imitation_update(params, opt, collate(chunk)))
    return params, losses
