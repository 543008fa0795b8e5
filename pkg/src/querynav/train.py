"""Rewards, semi-MDP advantage estimation, clipped policy-gradient updates and the staged schedule."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from querynav.episode import SplitConfig, make_splits, sample_episode
from querynav.errors import ConfigError, ScheduleError, TrainingError
from querynav.language import LangConfig, TeacherPair, online_finetune, pretrain_offline
from querynav.nn import Adam, Params, load_params, log_softmax, save_params, softmax
from querynav.oracle import SpeakerConfig
from querynav.percept import (
    AudioConfig, collect_audio_corpus, init_goal_estimator, train_goal_estimator, obs_dim,
)
from querynav.policy import (
    QUERY_EXTRA_DIM, Agents, Controller, ControllerConfig, Decision, Slot, ac_backward,
    ac_forward, episode_summary, gather_memory, init_actor_critic, query_extra,
)
from querynav.rewards import nav_reward, zeta_f, zeta_q  # noqa: F401  (re-exported)
from querynav.world import NUM_ACTIONS, Scene, SceneParams, generate_scene

log = logging.getLogger(__name__)

PHASES = ("goal_classifier", "pi_g_stage1", "pi_g_stage2", "pi_l_pretrain", "pi_q")
CHECKPOINTS = {
    "goal_classifier": ("goal_est.npz",),
    "pi_g_stage1": ("pi_g_stage1.npz", "goal_est_stage1.npz"),
    "pi_g_stage2": ("pi_g.npz", "goal_est_final.npz"),
    "pi_l_pretrain": ("pi_l_pretrained.npz",),
    "pi_q": ("pi_q.npz", "pi_l.npz"),
}


@dataclass
class OptimConfig:
    lr: float = 2.5e-4
    goal_lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 2
    minibatches: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if self.lr <= 0 or self.goal_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in [0, 1]")


# -- advantages ------------------------------------------------------------------

def gae_advantages(rewards, values, dones, last_value: float, gamma: float, lam: float,
                   durations=None) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantages for one environment's decision sequence.

    ``durations[i]`` is the number of primitive steps decision ``i`` spanned;
    its reward is already the discounted sum over those steps, and the
    bootstrap is discounted by ``gamma ** durations[i]``.
    """
    rewards = np.asarray(rewards, float)
    values = np.asarray(values, float)
    dones = np.asarray(dones, bool)
    n = len(rewards)
    dur = np.ones(n) if durations is None else np.asarray(durations, float)
    adv = np.zeros(n)
    next_v = last_value
    next_a = 0.0
    for i in reversed(range(n)):
        disc = gamma ** dur[i] * (0.0 if dones[i] else 1.0)
        delta = rewards[i] + disc * next_v - values[i]
        next_a = delta + disc * lam * next_a
        adv[i] = next_a
        next_v = values[i]
    return adv, adv + values


@dataclass
class RolloutBuffer:
    """Decisions collected from parallel environments, kept per environment for GAE."""

    n_envs: int
    capacity: int = 150
    per_env: list[list[Decision]] = field(default_factory=list)

    def __post_init__(self):
        self.per_env = [[] for _ in range(self.n_envs)]

    def add(self, env: int, d: Decision) -> None:
        self.per_env[env].append(d)

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_env)

    def finalize(self, last_values: Sequence[float], gamma: float, lam: float) -> dict:
        rows: list[Decision] = []
        advs, rets = [], []
        for env, decs in enumerate(self.per_env):
            if not decs:
                continue
            a, r = gae_advantages([d.reward for d in decs], [d.value for d in decs],
                                  [d.done for d in decs], last_values[env], gamma, lam,
                                  [d.duration for d in decs])
            rows += decs
            advs.append(a)
            rets.append(r)
        if not rows:
            raise TrainingError("empty rollout buffer")
        return {"decisions": rows, "advantages": np.concatenate(advs),
                "returns": np.concatenate(rets)}


# -- PPO -------------------------------------------------------------------------

def ppo_loss_and_grads(params: Params, batch: dict, cfg: OptimConfig, use_memory: bool,
                       skip_encoder: bool = False):
    """Clipped surrogate + value + entropy loss over a minibatch, with exact gradients."""
    x, gin, extra = batch["x"], batch["gin"], batch["extra"]
    mem, mask = batch["mem"], batch["mask"]
    if not use_memory:
        mem = mask = None
    logits, v, cache = ac_forward(params, x, gin, extra, mem, mask)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    n = len(x)
    act = batch["actions"]
    logp = logp_all[np.arange(n), act]
    ratio = np.exp(logp - batch["old_logp"])
    A = batch["adv"]
    s1 = ratio * A
    s2 = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * A
    pi_loss = -np.mean(np.minimum(s1, s2))
    ent = -(p * logp_all).sum(1)
    v_err = v - batch["returns"]
    v_loss = np.mean(v_err ** 2)
    loss = pi_loss + cfg.value_coef * v_loss - cfg.entropy_coef * ent.mean()
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite PPO loss (pi={pi_loss}, v={v_loss}, "
                            f"max|logit|={np.abs(logits).max()})")
    dlogp = np.where(s1 <= s2, -A * ratio, 0.0) / n
    onehot = np.zeros_like(p)
    onehot[np.arange(n), act] = 1.0
    dlogits = dlogp[:, None] * (onehot - p)
    dlogits += cfg.entropy_coef * p * (logp_all + ent[:, None]) / n
    dv = cfg.value_coef * 2 * v_err / n
    grads = ac_backward(params, cache, dlogits, dv, skip_encoder=skip_encoder)
    stats = {"loss": float(loss), "pi_loss": float(pi_loss), "v_loss": float(v_loss),
             "entropy": float(ent.mean()),
             "clip_frac": float(np.mean(np.abs(ratio - 1) > cfg.clip))}
    return loss, grads, stats


def _collate_decisions(decs: Sequence[Decision], use_memory: bool) -> dict:
    extra = None
    if decs[0].extra is not None:
        extra = np.stack([d.extra for d in decs])
    mem = mask = None
    if use_memory:
        mem, mask = gather_memory([(d.mem, d.mem_len) for d in decs])
    return {"x": np.stack([d.x for d in decs]), "gin": np.stack([d.gin for d in decs]),
            "extra": extra, "mem": mem, "mask": mask,
            "actions": np.array([d.action for d in decs]),
            "old_logp": np.array([d.logp for d in decs])}


def ppo_update(params: Params, data: dict, opt: Adam, cfg: OptimConfig, rng: np.random.Generator,
               use_memory: bool = True, skip_encoder: bool = False) -> dict:
    """``cfg.epochs`` passes of minibatch PPO over one finalized rollout; updates in place."""
    decs = data["decisions"]
    adv = data["advantages"]
    if len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(decs)
    mb = max(1, int(np.ceil(n / cfg.minibatches)))
    stats = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, mb):
            idx = order[i:i + mb]
            batch = _collate_decisions([decs[j] for j in idx], use_memory)
            batch["adv"] = adv[idx]
            batch["returns"] = data["returns"][idx]
            _, grads, st = ppo_loss_and_grads(params, batch, cfg, use_memory, skip_encoder)
            st["grad_norm"] = opt.step(params, grads)
            stats.append(st)
    return {k: float(np.mean([s[k] for s in stats])) for k in stats[0]}


# -- rollout collection ----------------------------------------------------------

class TrainingEnvs:
    """A fixed number of continuously reset training episodes driven by a Controller."""

    def __init__(self, controller: Controller, scenes: Sequence[Scene], split: SplitConfig,
                 regime: str, n_envs: int, seed: int):
        self.c = controller
        self.scenes = list(scenes)
        self.split = split
        self.regime = regime
        self.rng = np.random.default_rng([seed, 0x7A1])
        self.seed = seed
        self.counter = 0
        self.slots: list[Slot] = [self._fresh() for _ in range(n_envs)]
        self.env_of: dict[int, int] = {s.index: i for i, s in enumerate(self.slots)}
        self.finished: list[dict] = []

    def _fresh(self) -> Slot:
        while True:
            scene = self.scenes[int(self.rng.integers(len(self.scenes)))]
            try:
                spec = sample_episode(scene, self.split, self.regime, self.rng, train=True)
                break
            except Exception:  # scene without a usable goal for this split
                continue
        self.counter += 1
        return self.c.new_slot(spec, self.seed, self.counter)

    def run(self, ticks: int, drain_options: bool = False) -> None:
        for _ in range(ticks):
            self.c.tick(self.slots)
            self._replace_done()
        if drain_options:
            while True:
                busy = [s for s in self.slots if s.option is not None]
                if not busy:
                    break
                self.c.tick(busy)
                self._replace_done()

    def _replace_done(self) -> None:
        for i, s in enumerate(self.slots):
            if s.done:
                self.finished.append(episode_summary(s))
                new = self._fresh()
                self.env_of[new.index] = i
                self.slots[i] = new

    def pop_finished(self) -> list[dict]:
        out, self.finished = self.finished, []
        return out


def _bootstrap(params: Params, c: Controller, slots: Sequence[Slot], use_memory: bool,
               query: bool) -> list[float]:
    X = np.stack([s.x for s in slots])
    G = np.stack([c.gin(s) for s in slots])
    extra = None
    if query:
        extra = np.stack([query_extra(s.k, s.j, c.cfg.K, c.cfg.tau_f) for s in slots])
    mem, mask = gather_memory([(s.enc, s.t) for s in slots]) if use_memory else (None, None)
    _, v, _ = ac_forward(params, X, G, extra, mem, mask)
    return [float(x) for x in v]


# -- schedule --------------------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    scene_width: int = 20
    scene_height: int = 20
    n_rooms: int = 5
    n_objects: int = 10
    n_train_scenes: int = 40
    n_val_scenes: int = 10
    n_test_scenes: int = 50
    noise_std: float = 0.005
    audio_alpha: float = 1.0
    goal_cls_samples: int = 20000
    goal_cls_epochs: int = 10
    goal_loc_epochs: int = 2
    n_envs: int = 16
    rollout: int = 150
    stage1_iters: int = 150
    stage2_iters: int = 150
    lang_pairs: int = 20000
    lang_lr: float = 1e-3
    lang_max_epochs: int = 40
    lang_patience: int = 4
    pi_q_iters: int = 100
    pi_q_envs: int = 16
    finetune_lr: float = 2.5e-4
    p_land: float = 0.3
    p_drop: float = 0.1
    p_join: float = 0.3
    k_soft: int = 3
    nu: int = 3
    tau_f: int = 10
    r_neg: float = -1.2
    r_f: float = -0.5
    max_steps: int = 500
    lr: float = 2.5e-4
    goal_lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    ppo_epochs: int = 2
    minibatches: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    binary_progress: bool = False
    stop_bias: float = -3.0

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr, self.goal_lr, self.gamma, self.gae_lambda, self.clip,
                           self.ppo_epochs, self.minibatches, self.entropy_coef, self.value_coef)

    def scene_params(self) -> SceneParams:
        return SceneParams(self.scene_width, self.scene_height, self.n_rooms, self.n_objects)

    def speaker(self) -> SpeakerConfig:
        return SpeakerConfig(self.p_land, self.p_drop, self.p_join, True, self.seed)

    def audio(self) -> AudioConfig:
        return AudioConfig(self.audio_alpha, self.noise_std)

    def to_dict(self) -> dict:
        return asdict(self)


TRAIN_SCENE_BASE = 1000
VAL_SCENE_BASE = 3000
TEST_SCENE_BASE = 5000


def scene_seeds(cfg: TrainConfig, which: str) -> list[int]:
    base = {"train": TRAIN_SCENE_BASE, "val": VAL_SCENE_BASE, "test": TEST_SCENE_BASE}[which]
    n = {"train": cfg.n_train_scenes, "val": cfg.n_val_scenes, "test": cfg.n_test_scenes}[which]
    return [base + 100_000 * cfg.seed + i for i in range(n)]


def build_scenes(cfg: TrainConfig, which: str) -> list[Scene]:
    params = cfg.scene_params()
    return [generate_scene(s, params) for s in scene_seeds(cfg, which)]


class CsvLog:
    def __init__(self, path: Path):
        self.path = path
        self.fields: list[str] | None = None

    def write(self, row: dict) -> None:
        new = self.fields is None
        if new:
            self.fields = list(row)
        with open(self.path, "w" if new else "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.fields, extrasaction="ignore")
            if new:
                w.writeheader()
            w.writerow(row)


def _success_rate(rows: list[dict]) -> float:
    return float(np.mean([r["success"] for r in rows])) if rows else 0.0


def train_audio_policy(cfg: TrainConfig, scenes: Sequence[Scene], split: SplitConfig,
                       goal_est: Params, pi_g: Params, iters: int, use_memory: bool,
                       freeze_encoder: bool, seed_tag: int, csv_log: CsvLog | None = None,
                       stage: str = "") -> tuple[Params, Params]:
    """PPO on the audio-goal policy with on-policy location regression; updates in place."""
    ocfg = cfg.optim()
    frozen = {"enc_W", "enc_b"} if freeze_encoder else set()
    opt = Adam(ocfg.lr, max_grad_norm=ocfg.max_grad_norm, frozen=frozen)
    rng = np.random.default_rng([cfg.seed, seed_tag])
    loc_feats: list[np.ndarray] = []
    loc_targets: list[np.ndarray] = []

    holder: dict = {}

    def on_goal(dec: Decision, slot: Slot) -> None:
        holder["buf"].add(envs.env_of[slot.index], dec)

    def on_loc(feat, target) -> None:
        loc_feats.append(feat)
        loc_targets.append(target)

    agents = Agents(pi_g, goal_est, split.category_signatures, audio_cfg=cfg.audio())
    ccfg = ControllerConfig(trigger="none", use_memory=use_memory, max_steps=cfg.max_steps,
                            gamma=cfg.gamma, binary_progress=cfg.binary_progress, log=False)
    c = Controller(agents, ccfg, {s.seed: s for s in scenes}, on_goal_decision=on_goal,
                   on_location_sample=on_loc)
    envs = TrainingEnvs(c, scenes, split, "heard", cfg.n_envs, seed=cfg.seed * 7919 + seed_tag)
    t0 = time.time()
    steps = 0
    for it in range(iters):
        holder["buf"] = RolloutBuffer(cfg.n_envs, cfg.rollout)
        envs.run(cfg.rollout)
        steps += cfg.rollout * cfg.n_envs
        last = _bootstrap(pi_g, c, envs.slots, use_memory, query=False)
        data = holder["buf"].finalize(last, ocfg.gamma, ocfg.gae_lambda)
        stats = ppo_update(pi_g, data, opt, ocfg, rng, use_memory, skip_encoder=freeze_encoder)
        if loc_feats:
            feats = np.stack(loc_feats)
            targets = np.stack(loc_targets)
            train_goal_estimator(goal_est, location_data=(feats, targets),
                                 epochs=cfg.goal_loc_epochs, lr=ocfg.goal_lr, rng=rng)
            loc_feats.clear()
            loc_targets.clear()
        done = envs.pop_finished()
        row = {"stage": stage, "iter": it, "steps": steps, "episodes": len(done),
               "success": _success_rate(done), "seconds": round(time.time() - t0, 1), **stats}
        if csv_log is not None:
            csv_log.write(row)
        if it % 10 == 0:
            log.info("%s iter %d sr=%.3f ent=%.3f", stage, it, row["success"], stats["entropy"])
    return pi_g, goal_est


def train_query_policy(cfg: TrainConfig, scenes: Sequence[Scene], split: SplitConfig,
                       goal_est: Params, pi_g: Params, pi_l: Params, lang_cfg: LangConfig,
                       csv_log: CsvLog | None = None) -> tuple[Params, Params]:
    """PPO on the query policy over frozen audio-goal policy, with online language finetuning."""
    ocfg = cfg.optim()
    rng = np.random.default_rng([cfg.seed, 0x9A])
    init_rng = np.random.default_rng([cfg.seed, 0x9B])
    pi_q = init_actor_critic(init_rng, pi_g["enc_W"].shape[0], 2, QUERY_EXTRA_DIM)
    pi_q["enc_W"] = pi_g["enc_W"].copy()
    pi_q["enc_b"] = pi_g["enc_b"].copy()
    opt = Adam(ocfg.lr, max_grad_norm=ocfg.max_grad_norm, frozen={"enc_W", "enc_b"})
    lang_opt = Adam(cfg.finetune_lr, max_grad_norm=5.0)
    holder: dict = {}
    pairs: list[TeacherPair] = []

    def on_query(dec: Decision, slot: Slot) -> None:
        holder["buf"].add(envs.env_of[slot.index], dec)

    agents = Agents(pi_g, goal_est, split.category_signatures, pi_q=pi_q, pi_l=pi_l,
                    lang_cfg=lang_cfg, audio_cfg=cfg.audio())
    ccfg = ControllerConfig(trigger="learned", feedback="language", k_allowed=None, nu=cfg.nu,
                            max_steps=cfg.max_steps, K=cfg.k_soft, tau_f=cfg.tau_f,
                            r_neg=cfg.r_neg, r_f=cfg.r_f, gamma=cfg.gamma,
                            binary_progress=cfg.binary_progress, speaker=cfg.speaker())
    c = Controller(agents, ccfg, {s.seed: s for s in scenes}, on_query_decision=on_query,
                   on_query_pair=pairs.append)
    envs = TrainingEnvs(c, scenes, split, "heard", cfg.pi_q_envs, seed=cfg.seed * 7919 + 0x9C)
    t0 = time.time()
    for it in range(cfg.pi_q_iters):
        holder["buf"] = RolloutBuffer(cfg.pi_q_envs, cfg.rollout)
        envs.run(cfg.rollout, drain_options=True)
        for s in envs.slots:
            c.flush(s)
        last = _bootstrap(pi_q, c, envs.slots, True, query=True)
        data = holder["buf"].finalize(last, ocfg.gamma, ocfg.gae_lambda)
        stats = ppo_update(pi_q, data, opt, ocfg, rng, True, skip_encoder=True)
        ft_losses: list[float] = []
        if pairs:
            _, ft_losses = online_finetune(pi_l, pairs, lang_opt, rng=rng)
            pairs.clear()
        done = envs.pop_finished()
        q_rate = float(np.mean([d.action for d in data["decisions"]]))
        row = {"stage": "pi_q", "iter": it, "episodes": len(done), "success": _success_rate(done),
               "queries_per_episode": float(np.mean([len(r["queries"]) for r in done])) if done else 0.0,
               "query_rate": q_rate,
               "finetune_loss": float(np.mean(ft_losses)) if ft_losses else float("nan"),
               "seconds": round(time.time() - t0, 1), **stats}
        if csv_log is not None:
            csv_log.write(row)
        if it % 10 == 0:
            log.info("pi_q iter %d sr=%.3f q/ep=%.2f", it, row["success"], row["queries_per_episode"])
    return pi_q, pi_l


def _ckpt(out: Path, name: str) -> Path:
    return out / name


def _require(out: Path, phase: str) -> None:
    for name in CHECKPOINTS[phase]:
        if not (out / name).exists():
            raise ScheduleError(f"phase {phase!r} checkpoint {name} missing in {out}")


def training_schedule(cfg: TrainConfig, out: str | Path, phases: Sequence[str] | None = None,
                      progress: Callable[[str], None] | None = None) -> dict[str, Params]:
    """Run the requested phases in order, loading earlier phases from ``out``.

    Every phase writes its checkpoints before the next starts, so a run can be
    resumed from any phase by listing only the remaining ones.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    phases = list(PHASES if phases is None else phases)
    for ph in phases:
        if ph not in PHASES:
            raise ScheduleError(f"unknown phase {ph!r}; expected one of {', '.join(PHASES)}")
    phases = [p for p in PHASES if p in phases]
    say = progress or (lambda m: log.info(m))
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    splits = make_splits(cfg.seed)
    split = splits["heard"]
    scenes = build_scenes(cfg, "train")
    sig_dim = split.category_signatures.shape[1]
    meta = {"config": cfg.to_dict()}
    csv_log = CsvLog(out / "train_log.csv") if "pi_g_stage1" in phases or "pi_g_stage2" in phases else None
    first = PHASES.index(phases[0]) if phases else len(PHASES)

    def prior(phase: str, name: str, kind: str) -> Params:
        if PHASES.index(phase) < first:
            _require(out, phase)
        return load_params(out / name, kind)[0]

    if "goal_classifier" in phases:
        say("phase goal_classifier")
        rng = np.random.default_rng([cfg.seed, 0x6C])
        goal_est = init_goal_estimator(rng, sig_dim)
        feats, cats, _ = collect_audio_corpus(scenes, split.train_categories,
                                              split.category_signatures, cfg.goal_cls_samples,
                                              rng, cfg.audio())
        hist = train_goal_estimator(goal_est, category_data=(feats, cats),
                                    epochs=cfg.goal_cls_epochs, lr=cfg.goal_lr, rng=rng)
        save_params(out / "goal_est.npz", goal_est, "goal_estimator", {**meta, "history": hist})

    if "pi_g_stage1" in phases:
        say("phase pi_g_stage1")
        goal_est = prior("goal_classifier", "goal_est.npz", "goal_estimator")
        rng = np.random.default_rng([cfg.seed, 0x61])
        pi_g = init_actor_critic(rng, obs_dim(sig_dim), NUM_ACTIONS, stop_bias=cfg.stop_bias)
        train_audio_policy(cfg, scenes, split, goal_est, pi_g, cfg.stage1_iters, use_memory=False,
                           freeze_encoder=False, seed_tag=0x62, csv_log=csv_log, stage="stage1")
        save_params(out / "pi_g_stage1.npz", pi_g, "audio_policy", meta)
        save_params(out / "goal_est_stage1.npz", goal_est, "goal_estimator", meta)

    if "pi_g_stage2" in phases:
        say("phase pi_g_stage2")
        pi_g = prior("pi_g_stage1", "pi_g_stage1.npz", "audio_policy")
        goal_est = prior("pi_g_stage1", "goal_est_stage1.npz", "goal_estimator")
        train_audio_policy(cfg, scenes, split, goal_est, pi_g, cfg.stage2_iters, use_memory=True,
                           freeze_encoder=True, seed_tag=0x63, csv_log=csv_log, stage="stage2")
        save_params(out / "pi_g.npz", pi_g, "audio_policy", meta)
        save_params(out / "goal_est_final.npz", goal_est, "goal_estimator", meta)

    if "pi_l_pretrain" in phases:
        say("phase pi_l_pretrain")
        pi_l, lang_cfg, info = pretrain_offline(cfg.speaker(), scenes, cfg.lang_pairs, seed=cfg.seed,
                                                signature_dim=sig_dim, lr=cfg.lang_lr,
                                                max_epochs=cfg.lang_max_epochs,
                                                patience=cfg.lang_patience)
        save_params(out / "pi_l_pretrained.npz", pi_l, "language_policy",
                    {**meta, "lang_config": lang_cfg.to_dict(), "history": info["history"]})

    if "pi_q" in phases:
        say("phase pi_q")
        pi_g = prior("pi_g_stage2", "pi_g.npz", "audio_policy")
        goal_est = prior("pi_g_stage2", "goal_est_final.npz", "goal_estimator")
        pi_l, lmeta = load_params(out / "pi_l_pretrained.npz", "language_policy") \
            if (out / "pi_l_pretrained.npz").exists() else (None, None)
        if pi_l is None:
            raise ScheduleError("phase 'pi_l_pretrain' checkpoint pi_l_pretrained.npz missing")
        lang_cfg = LangConfig(**lmeta["lang_config"])
        q_log = CsvLog(out / "train_log_pi_q.csv")
        pi_q, pi_l = train_query_policy(cfg, scenes, split, goal_est, pi_g, pi_l, lang_cfg, q_log)
        save_params(out / "pi_q.npz", pi_q, "query_policy", meta)
        save_params(out / "pi_l.npz", pi_l, "language_policy",
                    {**meta, "lang_config": lang_cfg.to_dict()})

    return load_artifacts(out, missing_ok=True)


def load_artifacts(out: str | Path, missing_ok: bool = False) -> dict:
    """Load whatever final checkpoints exist in ``out``."""
    out = Path(out)
    found: dict = {}
    table = {"goal_est": ("goal_est_final.npz", "goal_estimator"),
             "pi_g": ("pi_g.npz", "audio_policy"),
             "pi_q": ("pi_q.npz", "query_policy"),
             "pi_l": ("pi_l.npz", "language_policy"),
             "pi_l_pretrained": ("pi_l_pretrained.npz", "language_policy"),
             "pi_g_stage1": ("pi_g_stage1.npz", "audio_policy")}
    for key, (name, kind) in table.items():
        path = out / name
        if path.exists():
            params, meta = load_params(path, kind)
            found[key] = params
            if "lang_config" in meta:
                found.setdefault("lang_config", LangConfig(**meta["lang_config"]))
        elif not missing_ok and key in ("goal_est", "pi_g", "pi_q", "pi_l"):
            raise ScheduleError(f"checkpoint {name} missing in {out}")
    return found
