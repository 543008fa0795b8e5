import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import check_actor_critic, corridor, make_agents
from querynav.episode import EpisodeSpec, make_splits, sample_episode_set
from querynav.errors import ConfigError, UsageError
from querynav.percept import GoalDescriptor, obs_dim
from querynav.policy import (Controller, ControllerConfig, audio_policy_step, controller_step,
                             episode_summary, gather_memory, mask_query, mu_fires, mu_trigger,
                             query_policy_step, top2_gap)
from querynav.world import Action, Heading, Pose, SceneParams, generate_scene

OD = obs_dim(16)


def _corridor_spec(start_x=1, goal_x=30, duration=500, length=30):
    scene = corridor(length, [(0, 2, (goal_x, 1))])
    return scene, EpisodeSpec(scene.seed, Pose(start_x, 1, Heading.E), 0, duration, "heard")


def test_policy_step_distribution():
    ag = make_agents()
    rng = np.random.default_rng(0)
    g = GoalDescriptor.initial()
    for memory in ([], [rng.normal(size=8) for _ in range(5)]):
        probs, v = audio_policy_step(ag.pi_g, memory, rng.normal(size=OD), g)
        assert probs.shape == (4,) and probs.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.isfinite(v)


def test_query_mask():
    ag = make_agents()
    x = np.random.default_rng(1).normal(size=OD)
    probs, _ = query_policy_step(ag.pi_q, [], x, GoalDescriptor.initial(), k=3, k_allowed=3)
    assert probs[1] == 0.0 and probs.sum() == pytest.approx(1.0)
    probs, _ = query_policy_step(ag.pi_q, [], x, GoalDescriptor.initial(), k=2, k_allowed=3)
    assert probs[1] > 0
    batch = mask_query(np.array([[0.3, 0.7], [0.6, 0.4]]), np.array([False, True]))
    assert np.allclose(batch, [[1.0, 0.0], [0.6, 0.4]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.001, 1), min_size=2, max_size=2), st.booleans())
def test_masked_distribution_valid(raw, allowed):
    p = np.array(raw) / sum(raw)
    out = mask_query(p, allowed)
    assert out.min() >= 0 and out.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("dist,fires", [((0.55, 0.45, 0, 0), True),
                                        ((0.9, 0.05, 0.03, 0.02), False),
                                        ((0.25, 0.25, 0.25, 0.25), True)])
def test_mu_rule(dist, fires):
    assert mu_fires(np.array(dist), 0.1) == fires


def test_mu_trigger_uses_policy():
    ag = make_agents(stop_logit=0.0)  # all-zero head: uniform distribution
    assert mu_trigger(ag.pi_g, [], np.zeros(OD), GoalDescriptor.initial())


def test_actor_critic_gradients():
    rng = np.random.default_rng(3)
    for _ in range(3):
        assert check_actor_critic(rng) <= 1e-4
        assert check_actor_critic(rng, 3, 2) <= 1e-4


def test_gather_memory_alignment():
    a = np.arange(12.0).reshape(6, 2)
    mem, mask = gather_memory([(a, 4), (a, 0)], cap=3)
    assert np.array_equal(mem[0], a[1:4]) and mask[0].all() and not mask[1].any()
    assert gather_memory([(a, 0)]) == (None, None)


def test_uniform_trigger_schedule():
    scene, spec = _corridor_spec(goal_x=70, length=70)
    ag = make_agents(forward_logit=30.0)
    cfg = ControllerConfig(trigger="uniform", feedback="gt_actions", k_allowed=3, max_steps=60,
                           uniform_period=15)
    slot = Controller(ag, cfg, {scene.seed: scene}).run([spec], seed=0)[0]
    assert slot.queries == [15, 30, 45]


def test_language_option_walks_forward():
    scene, spec = _corridor_spec()
    ag = make_agents(forward_logit=30.0, lang_forward=40.0)
    cfg = ControllerConfig(trigger="uniform", feedback="language", k_allowed=1, max_steps=8,
                           uniform_period=2, log=True)
    c = Controller(ag, cfg, {scene.seed: scene})
    slot = c.new_slot(spec, 0, 0)
    while slot.t < 2:
        controller_step(c, slot)
    x0 = slot.pose.x
    for _ in range(3):
        controller_step(c, slot)
    assert slot.queries == [2]
    assert slot.pose.x == x0 + 3
    assert [r["option"] for r in slot.log[2:5]] == ["language"] * 3
    assert slot.lang_steps == [3]


def test_stop_near_goal_succeeds():
    scene, spec = _corridor_spec(start_x=29)
    ag = make_agents(stop_logit=40.0)
    slot = Controller(ag, ControllerConfig(), {scene.seed: scene}).run([spec], 0)[0]
    assert slot.done and slot.success and slot.t == 1 and slot.reach_step == 0


def test_stop_elsewhere_fails_and_ends():
    scene, spec = _corridor_spec(start_x=5)
    ag = make_agents(stop_logit=40.0)
    c = Controller(ag, ControllerConfig(), {scene.seed: scene})
    slot = c.run([spec], 0)[0]
    assert slot.done and not slot.success
    with pytest.raises(UsageError):
        controller_step(c, slot)


def test_step_cap():
    scene, spec = _corridor_spec(start_x=1)
    ag = make_agents(stop_logit=-40.0)
    slot = Controller(ag, ControllerConfig(max_steps=20), {scene.seed: scene}).run([spec], 0)[0]
    assert slot.done and slot.t == 20 and not slot.success


def test_config_validation():
    with pytest.raises(ConfigError):
        ControllerConfig(trigger="sometimes")
    with pytest.raises(ConfigError):
        ControllerConfig(feedback="telepathy")
    with pytest.raises(ConfigError):
        ControllerConfig(k_allowed=-1)
    ag = make_agents(with_query=False)
    with pytest.raises(ConfigError):
        Controller(ag, ControllerConfig(trigger="learned"), {})


def _episodes(n=12, regime="heard"):
    scenes = [generate_scene(s, SceneParams(12, 12, 3, 8)) for s in range(3)]
    split = make_splits(0)[regime]
    return {s.seed: s for s in scenes}, sample_episode_set(scenes, split, regime, n, seed=1)


@pytest.mark.parametrize("trigger,feedback", [("learned", "language"), ("random", "language"),
                                              ("uniform", "gt_actions"), ("mu", "gt_actions")])
def test_budget_and_option_length(trigger, feedback):
    scenes, specs = _episodes()
    ag = make_agents(seed=2)
    # an eager query head so the budget actually binds
    ag.pi_q["pi_b"][1] = 5.0
    cfg = ControllerConfig(trigger=trigger, feedback=feedback, k_allowed=2, max_steps=80,
                           random_window=20, uniform_period=5, mu_threshold=0.5)
    for slot in Controller(ag, cfg, scenes).run(specs, seed=3):
        assert len(slot.queries) <= 2
        assert all(1 <= n <= cfg.nu for n in slot.lang_steps)


def test_controller_determinism():
    scenes, specs = _episodes(8, "unheard+distractor")
    ag = make_agents(seed=4)
    cfg = ControllerConfig(trigger="learned", feedback="language", k_allowed=3, max_steps=60,
                           log=True)
    a = Controller(ag, cfg, scenes).run(specs, seed=5)
    b = Controller(ag, cfg, scenes).run(specs, seed=5)
    assert [s.log for s in a] == [s.log for s in b]
    assert [episode_summary(s) for s in a] == [episode_summary(s) for s in b]


def test_batched_equals_single():
    scenes, specs = _episodes(6)
    ag = make_agents(seed=6)
    cfg = ControllerConfig(trigger="random", feedback="language", max_steps=40, log=True)
    together = Controller(ag, cfg, scenes).run(specs, seed=9)
    alone = [Controller(ag, cfg, scenes).run([sp], seed=9, start_index=i)[0]
             for i, sp in enumerate(specs)]
    for a, b in zip(together, alone):
        assert a.log == b.log


def test_no_goal_decision_during_options():
    scenes, specs = _episodes(6)
    ag = make_agents(seed=7)
    ag.pi_q["pi_b"][1] = 5.0
    seen = []
    c = Controller(ag, ControllerConfig(trigger="learned", max_steps=40, log=True), scenes,
                   on_goal_decision=lambda d, s: seen.append((s.index, d.mem_len)))
    slots = c.run(specs, seed=1)
    for s in slots:
        goal_steps = {r["t"] for r in s.log if r["option"] == "goal"}
        assert {t for i, t in seen if i == s.index} == goal_steps


@pytest.mark.parametrize("lang_greedy", [True, False])
def test_language_option_decoding(lang_greedy):
    scene, spec = _corridor_spec(goal_x=70, length=70)
    ag = make_agents(forward_logit=30.0, lang_forward=2.5)
    cfg = ControllerConfig(trigger="uniform", feedback="language", k_allowed=None, max_steps=60,
                           uniform_period=1, log=True, lang_greedy=lang_greedy)
    lang = []
    for seed in range(6):
        slot = Controller(ag, cfg, {scene.seed: scene}).run([spec], seed=seed)[0]
        lang += [r["action"] for r in slot.log if r["option"] == "language"]
    assert len(lang) > 30
    if lang_greedy:
        assert set(lang) == {int(Action.FORWARD)}
    else:
        assert set(lang) != {int(Action.FORWARD)}
