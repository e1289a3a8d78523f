"""Study orchestration: participants, session scheduling, adaptive
difficulty and on-disk layout of simulated studies."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import orjson
import yaml

from .agents import AgentConfig, make_agent
from .core import TASKS, TrialRecord, VisualFieldProfile, rng_for, seed_for, serialize_trial
from .mask import NO_LATENCY, LatencyModel
from .navigation import NavigationConfig, run_navigation_trial
from .perimetry import measure_profile
from .search import SearchConfig, run_search_trial
from .tracking import TrackingConfig, run_tracking_trial

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "tunnelsim.study-manifest"
MANIFEST_VERSION = 1
MIN_LEVEL, MAX_LEVEL = 1, 100

# visual field diameters (right eye, left eye) of the eight matched pairs
TABLE1_DIAMETERS = (
    (7.62, 8.26),
    (18.64, 18.18),
    (17.64, 16.36),
    (24.60, 25.40),
    (18.54, 18.34),
    (10.92, 9.64),
    (12.18, 14.56),
    (20.00, 19.48),
)


class ConfigError(ValueError):
    """Invalid study configuration."""


# -- adaptive difficulty --------------------------------------------------

@dataclass(frozen=True)
class DifficultyRule:
    window: int = 10

    def direction(self, task: str, history: Sequence[dict]) -> int:
        """+1, -1 or 0 from the last ``window`` outcomes of one task."""
        recent = list(history)[-self.window:]
        if task == "tracking":
            m = float(np.mean([o["score"] for o in recent]))
            return 1 if m >= 1.5 else -1 if m <= 0.5 else 0
        if task == "search":
            m = float(np.mean([o["found"] for o in recent]))
            return 1 if m >= 4 else -1 if m <= 1 else 0
        if task == "navigation":
            timeouts = sum(bool(o["timeout"]) for o in recent)
            coll = float(np.mean([o["collisions"] for o in recent]))
            if timeouts == 0 and coll <= 1:
                return 1
            if timeouts >= len(recent) / 2 or coll >= 4:
                return -1
            return 0
        raise ValueError(f"unknown task {task!r}")


def difficulty_update(task: str, history: Sequence[dict], current_level: int, rule: DifficultyRule = DifficultyRule()) -> int:
    """Next level for ``task`` given its outcome history.

    Only acts once the history holds a full window; the result is clamped to
    [1, 100].
    """
    if len(history) < rule.window:
        return current_level
    return int(min(max(current_level + rule.direction(task, history), MIN_LEVEL), MAX_LEVEL))


class Staircase:
    """Per-task level with a window that restarts after every change."""

    def __init__(self, task: str, level: int, rule: DifficultyRule = DifficultyRule()):
        self.task = task
        self.level = level
        self.rule = rule
        self.history: list[dict] = []

    def record(self, outcome: dict) -> int:
        self.history.append(outcome)
        new = difficulty_update(self.task, self.history, self.level, self.rule)
        if new != self.level or len(self.history) >= self.rule.window:
            if new != self.level:
                self.history = []
            else:
                self.history = self.history[-(self.rule.window - 1):] if self.rule.window > 1 else []
        self.level = new
        return new


# -- configuration --------------------------------------------------------

def _profile_from(ref, base: Path, what: str) -> VisualFieldProfile:
    try:
        if isinstance(ref, str):
            path = Path(ref)
            if not path.is_absolute():
                path = base / path
            return VisualFieldProfile.from_json(orjson.loads(path.read_bytes()))
        if isinstance(ref, (int, float)):
            return VisualFieldProfile.circular(float(ref))
        if isinstance(ref, dict):
            if "diameters" in ref:
                r, l = ref["diameters"]
                return VisualFieldProfile.from_diameters(float(r), float(l), ref.get("label", ""))
            if "radius" in ref:
                return VisualFieldProfile.circular(float(ref["radius"]), ref.get("label", ""))
            return VisualFieldProfile.from_json(ref)
    except (OSError, orjson.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{what}: {exc}") from None
    raise ConfigError(f"{what}: unsupported profile reference {ref!r}")


@dataclass(frozen=True)
class ParticipantSpec:
    id: str
    group: str
    vf_truth: VisualFieldProfile
    vf_profile: Optional[VisualFieldProfile] = None
    agent: AgentConfig = AgentConfig()
    perimetry_delay: float = 0.0


@dataclass(frozen=True)
class GroupSpec:
    label: str
    participants: tuple[ParticipantSpec, ...]
    latency: LatencyModel = NO_LATENCY
    # "truth": agents perceive through the true field; "measured": through the measured profile
    vision: str = "truth"


@dataclass(frozen=True)
class StudyConfig:
    groups: tuple[GroupSpec, ...]
    seed: int = 0
    sessions: int = 20
    session_minutes: float = 30.0
    gap_seconds: float = 10.0
    tasks: tuple[str, ...] = TASKS
    start_levels: dict = field(default_factory=lambda: {t: 1 for t in TASKS})
    window: int = 10

    def __post_init__(self):
        if self.sessions < 1 or self.session_minutes <= 0 or self.gap_seconds < 0:
            raise ConfigError("session count and duration must be positive")
        if not self.tasks or any(t not in TASKS for t in self.tasks):
            raise ConfigError(f"tasks must be a non-empty subset of {list(TASKS)}")
        if self.window < 1:
            raise ConfigError("difficulty window must be at least 1")
        for t, lv in self.start_levels.items():
            if t not in TASKS or not MIN_LEVEL <= lv <= MAX_LEVEL:
                raise ConfigError(f"bad start level {t}: {lv}")
        ids = [p.id for g in self.groups for p in g.participants]
        if len(set(ids)) != len(ids):
            raise ConfigError("participant ids must be unique")
        labels = [g.label for g in self.groups]
        if len(set(labels)) != len(labels):
            raise ConfigError("group labels must be unique")
        for g in self.groups:
            if g.vision not in ("truth", "measured"):
                raise ConfigError(f"group {g.label}: vision must be 'truth' or 'measured'")

    @property
    def participants(self) -> list[ParticipantSpec]:
        return [p for g in self.groups for p in g.participants]

    def group_of(self, pid: str) -> GroupSpec:
        for g in self.groups:
            if any(p.id == pid for p in g.participants):
                return g
        raise KeyError(pid)

    @classmethod
    def from_dict(cls, data: dict, base: Path = Path(".")) -> "StudyConfig":
        if not isinstance(data, dict):
            raise ConfigError("study config must be a mapping")
        known = {"seed", "sessions", "session_minutes", "gap_seconds", "tasks", "start_levels", "window", "groups"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown study config keys {sorted(extra)}")
        if "groups" not in data:
            raise ConfigError("study config needs 'groups'")
        groups = []
        for gi, g in enumerate(data["groups"]):
            if not isinstance(g, dict) or "label" not in g:
                raise ConfigError(f"group #{gi + 1} needs a label")
            gextra = set(g) - {"label", "participants", "latency", "vision", "agent"}
            if gextra:
                raise ConfigError(f"group {g['label']}: unknown keys {sorted(gextra)}")
            label = str(g["label"])
            lat = g.get("latency", False)
            if lat is True:
                latency = LatencyModel()
            elif lat is False or lat is None:
                latency = NO_LATENCY
            elif isinstance(lat, dict):
                try:
                    latency = LatencyModel(**lat)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"group {label}: latency: {exc}") from None
            else:
                raise ConfigError(f"group {label}: latency must be a boolean or a mapping")
            group_agent = g.get("agent", {}) or {}
            parts = []
            for pi, p in enumerate(g.get("participants", [])):
                if not isinstance(p, dict) or "id" not in p:
                    raise ConfigError(f"group {label}: participant #{pi + 1} needs an id")
                pid = str(p["id"])
                pextra = set(p) - {"id", "vf_truth", "vf_profile", "agent", "perimetry_delay"}
                if pextra:
                    raise ConfigError(f"participant {pid}: unknown keys {sorted(pextra)}")
                if "vf_truth" not in p and "vf_profile" not in p:
                    raise ConfigError(f"participant {pid}: needs vf_truth or vf_profile")
                measured = _profile_from(p["vf_profile"], base, f"participant {pid} vf_profile") if "vf_profile" in p else None
                truth = _profile_from(p["vf_truth"], base, f"participant {pid} vf_truth") if "vf_truth" in p else measured
                try:
                    agent = AgentConfig.from_dict({**group_agent, **(p.get("agent") or {})})
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"participant {pid} agent: {exc}") from None
                parts.append(ParticipantSpec(pid, label, truth, measured, agent, float(p.get("perimetry_delay", 0.0))))
            groups.append(GroupSpec(label, tuple(parts), latency, str(g.get("vision", "truth"))))
        try:
            levels = {t: 1 for t in TASKS}
            levels.update({str(k): int(v) for k, v in (data.get("start_levels") or {}).items()})
            return cls(
                groups=tuple(groups),
                seed=int(data.get("seed", 0)),
                sessions=int(data.get("sessions", 20)),
                session_minutes=float(data.get("session_minutes", 30.0)),
                gap_seconds=float(data.get("gap_seconds", 10.0)),
                tasks=tuple(data.get("tasks", TASKS)),
                start_levels=levels,
                window=int(data.get("window", 10)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "StudyConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data, path.parent)

    def with_overrides(self, **kw) -> "StudyConfig":
        from dataclasses import replace

        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def default_study(seed: int = 0, agent: Optional[AgentConfig] = None) -> StudyConfig:
    """Sixteen participants in eight matched pairs.

    Group A perceives through its true field without display latency;
    group B perceives through a mask built from the measured field and
    rendered with motion-to-photon latency.
    """
    agent = agent or AgentConfig()
    a, b = [], []
    for i, (rd, ld) in enumerate(TABLE1_DIAMETERS, start=1):
        truth = VisualFieldProfile.from_diameters(rd, ld, label=f"pair {i}")
        a.append(ParticipantSpec(f"{i}", "A", truth, None, agent))
        b.append(ParticipantSpec(f"{i}b", "B", truth, None, agent))
    return StudyConfig(
        groups=(GroupSpec("A", tuple(a), NO_LATENCY, "truth"), GroupSpec("B", tuple(b), LatencyModel(), "measured")),
        seed=seed,
    )


# -- simulation -----------------------------------------------------------

def measured_profile(cfg: StudyConfig, p: ParticipantSpec) -> VisualFieldProfile:
    if p.vf_profile is not None:
        return p.vf_profile
    return measure_profile(p.vf_truth, reaction_delay=p.perimetry_delay, seed=seed_for("perimetry", cfg.seed, p.id))


def run_trial(task: str, level: int, seed: int, agent_cfg: AgentConfig, vf: VisualFieldProfile,
              latency: LatencyModel, session: int, trial: int, render_seed: int) -> TrialRecord:
    agent = make_agent(agent_cfg, task, vf)
    if task == "tracking":
        return run_tracking_trial(TrackingConfig.for_level(level, seed), agent, vf, latency, session, trial, render_seed)
    if task == "search":
        return run_search_trial(SearchConfig.for_level(level, seed), agent, vf, latency, session, trial, render_seed)
    return run_navigation_trial(NavigationConfig.for_level(level, seed), agent, vf, latency, session, trial, render_seed)


def simulate_participant(cfg: StudyConfig, p: ParticipantSpec, measured: Optional[VisualFieldProfile] = None) -> Iterator[TrialRecord]:
    """Trial records of one participant in order, deterministic in (seed, id)."""
    group = cfg.group_of(p.id)
    if measured is None:
        measured = measured_profile(cfg, p)
    vision_vf = p.vf_truth if group.vision == "truth" else measured
    rule = DifficultyRule(cfg.window)
    stairs = {t: Staircase(t, cfg.start_levels.get(t, 1), rule) for t in cfg.tasks}
    budget = cfg.session_minutes * 60.0
    marks = rng_for("invalid-marks", cfg.seed, p.id)
    for session in range(1, cfg.sessions + 1):
        agent_cfg = p.agent.for_session(session)
        clock = 0.0
        trial = 0
        while clock < budget:
            task = cfg.tasks[trial % len(cfg.tasks)]
            trial += 1
            key = (cfg.seed, p.id, session, trial)
            tseed = seed_for("trial", *key)
            acfg = AgentConfig(**{**agent_cfg.to_dict(), "seed": seed_for("agent", *key)})
            rec = run_trial(task, stairs[task].level, tseed, acfg, vision_vf, group.latency, session, trial,
                            seed_for("render", *key))
            if agent_cfg.invalid_mark_prob > 0 and marks.random() < agent_cfg.invalid_mark_prob:
                from dataclasses import replace

                rec = replace(rec, invalid=True)
            stairs[task].record(rec.outcome)
            clock += rec.duration + cfg.gap_seconds
            yield rec


def write_study(cfg: StudyConfig, out_dir, progress: Optional[Callable[[str, int], None]] = None) -> dict:
    """Simulate every participant and write manifest, logs and profiles."""
    out = Path(out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "vf").mkdir(parents=True, exist_ok=True)
    entries = []
    for p in cfg.participants:
        measured = measured_profile(cfg, p)
        vf_path = out / "vf" / f"{p.id}.json"
        vf_path.write_bytes(orjson.dumps({"measured": measured.to_json(), "truth": p.vf_truth.to_json()},
                                         option=orjson.OPT_INDENT_2))
        counts = {t: 0 for t in cfg.tasks}
        sim_seconds = 0.0
        with open(out / "logs" / f"{p.id}.jsonl", "wb") as fh:
            for rec in simulate_participant(cfg, p, measured):
                fh.write(serialize_trial(rec))
                fh.write(b"\n")
                counts[rec.task] += 1
                sim_seconds += rec.duration
        entries.append({
            "id": p.id,
            "group": p.group,
            "log": f"logs/{p.id}.jsonl",
            "vf": f"vf/{p.id}.json",
            "trials": counts,
            "simulated_task_seconds": round(sim_seconds, 3),
        })
        if progress:
            progress(p.id, sum(counts.values()))
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "sessions": cfg.sessions,
        "session_minutes": cfg.session_minutes,
        "gap_seconds": cfg.gap_seconds,
        "tasks": list(cfg.tasks),
        "groups": [{"label": g.label, "latency": {"eye": g.latency.eye_latency, "head": g.latency.head_latency},
                    "vision": g.vision} for g in cfg.groups],
        "participants": entries,
    }
    (out / "manifest.json").write_bytes(orjson.dumps(manifest, option=orjson.OPT_INDENT_2))
    return manifest


def load_manifest(study_dir) -> dict:
    path = Path(study_dir) / "manifest.json"
    try:
        doc = orjson.loads(path.read_bytes())
    except (OSError, orjson.JSONDecodeError) as exc:
        raise ValueError(f"cannot read study manifest {path}: {exc}") from None
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path} is not a study manifest")
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
    return doc


def load_profile_file(path) -> VisualFieldProfile:
    """Profile JSON, either bare or the study's {measured, truth} wrapper."""
    doc = orjson.loads(Path(path).read_bytes())
    if not isinstance(doc, dict):
        raise ValueError("profile must be a JSON object")
    if "measured" in doc:
        doc = doc["measured"]
    return VisualFieldProfile.from_json(doc)
