"""Navigation metrics, trigger comparisons, query-budget sweeps, logs, replay and reports."""
from __future__ import annotations

import csv
import gzip
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from querynav.episode import REGIMES, EpisodeSpec, make_splits, sample_episode_set
from querynav.errors import InputError, ScheduleError
from querynav.language import step_accuracy
from querynav.nn import Params
from querynav.oracle import SpeakerConfig
from querynav.percept import AudioConfig
from querynav.policy import Agents, Controller, ControllerConfig, Slot, episode_summary
from querynav.world import Action, Pose, Scene, step

METHODS = ("learned", "random", "uniform", "mu")
FEEDBACKS = ("language", "gt_actions")
METRICS = ("SR", "SPL", "SNA", "DTG", "SWS")
WORKERS_ENV = "QUERYNAV_WORKERS"


@dataclass
class MetricsRecord:
    success: bool
    path_len: float
    shortest_len: float
    actions_taken: int
    min_actions: int
    dtg: float
    sound_end_step: int
    reach_step: int | None = None
    queries: list[int] = field(default_factory=list)
    sound_duration: int = 0
    lang_steps: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.success and self.shortest_len > self.path_len + 1e-9:
            raise InputError("a successful path cannot be shorter than the shortest path")
        if self.success and self.min_actions > self.actions_taken:
            raise InputError("a successful episode cannot beat the minimum action count")

    @classmethod
    def from_summary(cls, d: dict) -> "MetricsRecord":
        keys = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in keys})


def compute_metrics(records: Sequence[MetricsRecord], sws_all_episodes: bool = True) -> dict:
    """SR, SPL, SNA, DTG and SWS over ``records``.

    SWS counts successes reached after the sound ended; by default over all
    episodes, otherwise over the successful ones.
    """
    if not records:
        raise InputError("no episode records")
    s = np.array([r.success for r in records], float)
    p = np.array([r.path_len for r in records], float)
    l = np.array([r.shortest_len for r in records], float)
    n = np.array([r.actions_taken for r in records], float)
    ns = np.array([r.min_actions for r in records], float)
    spl = np.where(s > 0, l / np.maximum(np.maximum(p, l), 1e-12), 0.0)
    spl = np.where((s > 0) & (np.maximum(p, l) == 0), 1.0, spl)
    sna = np.where(s > 0, ns / np.maximum(np.maximum(n, ns), 1e-12), 0.0)
    silent = np.array([r.success and r.reach_step is not None and r.reach_step > r.sound_end_step
                       for r in records], float)
    sws = silent.mean() if sws_all_episodes else (silent.sum() / s.sum() if s.sum() else 0.0)
    return {"SR": float(s.mean()), "SPL": float(spl.mean()), "SNA": float(sna.mean()),
            "DTG": float(np.mean([r.dtg for r in records])), "SWS": float(sws)}


def vln_step_n(lang_params: Params, pairs, n: int, mask_instruction: bool = False) -> float:
    """Percentage of pairs whose first ``n`` greedy actions all match the teacher."""
    return 100.0 * step_accuracy(lang_params, pairs, n, mask_instruction=mask_instruction)


def collect_query_pairs(agents: Agents, scenes: Sequence[Scene], specs: Sequence[EpisodeSpec],
                        speaker: SpeakerConfig, seed: int, trigger: str = "learned",
                        k_allowed: int = 3, max_steps: int = 500) -> list:
    """Instruction/teacher pairs recorded at the moments ``trigger`` queries with language feedback.

    This is the query-time distribution the online finetuning adapts to: live
    audio and goal estimates rather than the silent offline corpus.
    """
    pairs: list = []
    ccfg = controller_config(trigger, "language", k_allowed, speaker, max_steps, log=False)
    Controller(agents, ccfg, {s.seed: s for s in scenes}, on_query_pair=pairs.append).run(specs, seed)
    return pairs


def silence_ratio_curve(records: Sequence[MetricsRecord]) -> list[tuple[float, float]]:
    """Cumulative success against min_actions / sound duration, over all episodes."""
    if not records:
        return []
    ratios = np.array([r.min_actions / max(r.sound_duration, 1) for r in records])
    succ = np.array([r.success for r in records], float)
    order = np.argsort(ratios, kind="stable")
    xs = ratios[order]
    cum = np.cumsum(succ[order]) / len(records)
    out = []
    for i in range(len(xs)):
        if i + 1 < len(xs) and xs[i + 1] == xs[i]:
            continue
        out.append((float(xs[i]), float(cum[i])))
    return out


def query_histogram(records: Iterable[MetricsRecord], bin_width: int = 5,
                    max_step: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Counts of query steps per bin; returns (bin left edges, counts)."""
    if bin_width < 1:
        raise InputError("bin_width must be >= 1")
    edges = np.arange(0, max_step + bin_width, bin_width)
    steps = [q for r in records for q in r.queries]
    counts = np.zeros(len(edges) - 1, dtype=int)
    for q in steps:
        counts[min(q // bin_width, len(counts) - 1)] += 1
    return edges[:-1], counts


def query_spread(records: Iterable[MetricsRecord]) -> float:
    steps = [q for r in records for q in r.queries]
    return float(np.std(steps)) if steps else 0.0


# -- running evaluations ---------------------------------------------------------

@dataclass(frozen=True)
class EvalSetting:
    regime: str
    method: str
    feedback: str
    k_allowed: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.regime}_{self.method}_{self.feedback}_k{self.k_allowed}_s{self.seed}"


def _open_log(path: Path):
    raw = open(path, "wb")
    gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
    return raw, io.TextIOWrapper(gz, encoding="utf-8", newline="\n")


def write_episode_log(fh, index: int, spec: EpisodeSpec, setting: EvalSetting, slot: Slot) -> None:
    head = {"type": "episode", "episode": index, "spec": spec.to_dict(),
            "method": setting.method, "feedback": setting.feedback,
            "k_allowed": setting.k_allowed, "seed": setting.seed}
    fh.write(json.dumps(head, separators=(",", ":"), sort_keys=True) + "\n")
    for rec in slot.log:
        fh.write(json.dumps({"type": "step", **rec}, separators=(",", ":"), sort_keys=True) + "\n")
    fh.write(json.dumps({"type": "summary", **episode_summary(slot)}, separators=(",", ":"),
                        sort_keys=True) + "\n")


def read_episode_log(path: str | Path) -> list[dict]:
    """Episodes from a trajectory log: dicts with ``header``, ``steps`` and ``summary``."""
    opener = gzip.open if str(path).endswith(".gz") else open
    episodes: list[dict] = []
    with opener(path, "rt", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "episode":
                episodes.append({"header": rec, "steps": [], "summary": None})
            elif kind == "step":
                episodes[-1]["steps"].append(rec)
            else:
                episodes[-1]["summary"] = rec
    return episodes


def replay_episode(scene: Scene, episode: dict, success_radius: int = 1) -> dict:
    """Re-execute the logged actions and recompute the metric fields of the summary."""
    spec = EpisodeSpec.from_dict(episode["header"]["spec"])
    goal = scene.object_by_id(spec.goal_object_id).cell
    pose = spec.start
    path_len = 0
    reach = None
    success = False
    queries = []
    for rec in episode["steps"]:
        a = Action(rec["action"])
        if rec["query"]:
            queries.append(rec["t"])
        new = step(scene, pose, a)
        if new.cell != pose.cell:
            path_len += 1
        pose = new
        if pose.to_list() != rec["pose"]:
            raise InputError(f"replay diverged at t={rec['t']}")
        if a == Action.STOP:
            d = scene.distance_field(goal)[pose.y, pose.x]
            success = bool(d <= success_radius)
            reach = rec["t"] if success else None
            break
    return {"success": success, "path_len": float(path_len),
            "actions_taken": len(episode["steps"]),
            "dtg": float(scene.distance_field(goal)[pose.y, pose.x]),
            "reach_step": reach, "queries": queries}


def controller_config(method: str, feedback: str, k_allowed: int, speaker: SpeakerConfig,
                      max_steps: int = 500, log: bool = True) -> ControllerConfig:
    trigger = method if k_allowed > 0 else "none"
    return ControllerConfig(trigger=trigger, feedback=feedback, k_allowed=k_allowed,
                            max_steps=max_steps, speaker=speaker, log=log)


def run_setting(agents: Agents, scenes: dict[int, Scene], specs: Sequence[EpisodeSpec],
                setting: EvalSetting, speaker: SpeakerConfig, log_path: Path | None = None,
                max_steps: int = 500) -> list[MetricsRecord]:
    ccfg = controller_config(setting.method, setting.feedback, setting.k_allowed, speaker,
                             max_steps, log=log_path is not None)
    c = Controller(agents, ccfg, scenes)
    # identical episode streams across methods: the RNG depends only on regime and seed
    seed = hash_seed(setting.regime, setting.seed)
    slots = c.run(specs, seed)
    if log_path is not None:
        raw, fh = _open_log(log_path)
        with raw, fh:
            for i, (sp, s) in enumerate(zip(specs, slots)):
                write_episode_log(fh, i, sp, setting, s)
    return [MetricsRecord.from_summary(episode_summary(s)) for s in slots]


def hash_seed(regime: str, seed: int) -> int:
    return (REGIMES.index(regime) + 1) * 1_000_003 + seed


@dataclass
class EvalPlan:
    regimes: tuple[str, ...] = REGIMES
    methods: tuple[str, ...] = METHODS
    feedbacks: tuple[str, ...] = FEEDBACKS
    seeds: tuple[int, ...] = (0, 1, 2)
    episodes: int = 200
    k_allowed: int = 3
    sweep_k: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    sweep_methods: tuple[str, ...] = METHODS
    sweep_regime: str = "heard"
    sweep_feedback: str = "language"
    max_steps: int = 500
    write_logs: bool = True


def _settings(plan: EvalPlan) -> list[EvalSetting]:
    out = []
    for seed in plan.seeds:
        for regime in plan.regimes:
            for method in plan.methods:
                for fb in plan.feedbacks:
                    out.append(EvalSetting(regime, method, fb, plan.k_allowed, seed))
        for k in plan.sweep_k:
            for method in plan.sweep_methods:
                st = EvalSetting(plan.sweep_regime, method, plan.sweep_feedback, k, seed)
                if st not in out:
                    out.append(st)
    return out


_WORKER: dict = {}


def _init_worker(payload):
    _WORKER.update(payload)


def _run_one(setting: EvalSetting):
    w = _WORKER
    specs = w["episodes"][(setting.regime, setting.seed)]
    log_path = None
    if w["log_dir"] is not None:
        log_path = Path(w["log_dir"]) / f"{setting.name}.jsonl.gz"
    recs = run_setting(w["agents"][setting.regime], w["scenes"], specs, setting, w["speaker"],
                       log_path, w["max_steps"])
    return setting, recs


def evaluate_plan(agents_by_regime: dict[str, Agents], test_scenes: Sequence[Scene],
                  plan: EvalPlan, speaker: SpeakerConfig, out: str | Path,
                  split_seed: int = 0, workers: int | None = None) -> dict:
    """Run every setting of ``plan`` and write the report files into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    log_dir = out / "logs" if plan.write_logs else None
    if log_dir is not None:
        log_dir.mkdir(exist_ok=True)
    splits = make_splits(split_seed)
    episodes = {}
    for seed in plan.seeds:
        for regime in set(plan.regimes) | {plan.sweep_regime}:
            episodes[(regime, seed)] = sample_episode_set(
                test_scenes, splits[regime], regime, plan.episodes, seed=hash_seed(regime, seed))
    payload = {"agents": agents_by_regime, "scenes": {s.seed: s for s in test_scenes},
               "episodes": episodes, "log_dir": log_dir, "speaker": speaker,
               "max_steps": plan.max_steps}
    settings = _settings(plan)
    workers = workers or int(os.environ.get(WORKERS_ENV, "1") or 1)
    results: dict[EvalSetting, list[MetricsRecord]] = {}
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(payload,)) as ex:
            for st, recs in ex.map(_run_one, settings):
                results[st] = recs
    else:
        _init_worker(payload)
        for st in settings:
            results[st] = _run_one(st)[1]
    report = build_report(results, plan)
    write_report(report, out)
    return report


def _aggregate(rows: list[dict]) -> dict:
    out = {}
    for m in METRICS:
        vals = np.array([r[m] for r in rows])
        out[m] = float(vals.mean())
        out[m + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out


def build_report(results: dict, plan: EvalPlan) -> dict:
    per_seed = []
    for st, recs in results.items():
        m = compute_metrics(recs)
        per_seed.append({**asdict(st), **m,
                         "queries_per_episode": float(np.mean([len(r.queries) for r in recs])),
                         "query_spread": query_spread(recs)})
    main = []
    for regime in plan.regimes:
        for method in plan.methods:
            for fb in plan.feedbacks:
                rows = [r for r in per_seed if r["regime"] == regime and r["method"] == method
                        and r["feedback"] == fb and r["k_allowed"] == plan.k_allowed]
                if rows:
                    main.append({"regime": regime, "method": method, "feedback": fb,
                                 "k_allowed": plan.k_allowed, **_aggregate(rows),
                                 "queries_per_episode": float(np.mean([r["queries_per_episode"] for r in rows]))})
    sweep = []
    for method in plan.sweep_methods:
        for k in plan.sweep_k:
            rows = [r for r in per_seed if r["regime"] == plan.sweep_regime and r["method"] == method
                    and r["feedback"] == plan.sweep_feedback and r["k_allowed"] == k]
            if rows:
                sweep.append({"method": method, "k_allowed": k, **_aggregate(rows)})
    hist = {}
    curves = {}
    for method in plan.methods:
        recs = [rec for st, rs in results.items() for rec in rs
                if st.method == method and st.regime == plan.sweep_regime
                and st.feedback == plan.sweep_feedback and st.k_allowed == plan.k_allowed]
        if recs:
            edges, counts = query_histogram(recs, 5, plan.max_steps)
            hist[method] = {"edges": edges.tolist(), "counts": counts.tolist(),
                            "spread": query_spread(recs)}
            curves[method] = silence_ratio_curve(recs)
    return {"main": main, "sweep": sweep, "per_seed": per_seed, "histograms": hist,
            "silence_curves": curves, "plan": asdict(plan)}


def write_report(report: dict, out: Path) -> None:
    out = Path(out)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    _write_csv(out / "report.csv", report["main"])
    _write_csv(out / "sweep.csv", report["sweep"])
    _write_csv(out / "per_seed.csv", report["per_seed"])
    for method, h in report["histograms"].items():
        with open(out / f"query_hist_{method}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_start", "count"])
            w.writerows(zip(h["edges"], h["counts"]))
    for method, pts in report["silence_curves"].items():
        with open(out / f"silence_curve_{method}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ratio", "cumulative_success"])
            w.writerows(pts)


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (round(v, 6) if isinstance(v, float) else v) for k, v in r.items()})


def agents_for_regimes(artifacts: dict, split_seed: int, audio_cfg: AudioConfig) -> dict[str, Agents]:
    """One Agents bundle per regime; they differ only in which splits' signatures apply."""
    for key in ("pi_g", "goal_est", "pi_q", "pi_l"):
        if key not in artifacts:
            raise ScheduleError(f"missing trained artifact {key!r}")
    splits = make_splits(split_seed)
    return {r: Agents(artifacts["pi_g"], artifacts["goal_est"], splits[r].category_signatures,
                      pi_q=artifacts["pi_q"], pi_l=artifacts["pi_l"],
                      lang_cfg=artifacts.get("lang_config"), audio_cfg=audio_cfg)
            for r in REGIMES}
