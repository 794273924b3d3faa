"""Run configuration: a flat ``key = value`` file grouped by ``[section]`` headers.

Every key has a default; a file only lists what it changes. Unknown sections
or keys are rejected by name so typos fail loudly.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .representation import ConfigError


@dataclass
class ModelSection:
    tau: float = 0.01
    window: int = 3
    n_short: int = 10
    n_long: int = 10
    n_context: int = 3
    n_gru: int = 3
    n_tasks: int = 3
    q_hidden: tuple = (64, 32, 16)
    trunk: tuple = (64, 32)
    branch: tuple = (32,)
    lambdas: tuple = (0.25, 0.25, 0.5)
    h0_std: float = 0.01
    train_h0: bool = False


@dataclass
class EnvSection:
    kind: str = "featurized"
    fixture: str = "two-state-switch"
    n_items: int = 50
    n_users: int = 200
    n_regions: int = 4
    session_len: int = 20
    action_mode: str = "multi"
    catalog: str = ""
    log_sessions: int = 2
    log_session_len: int = 20


@dataclass
class TeacherSection:
    epochs: int = 10
    steps_per_epoch: int = 800
    batch_size: int = 64
    buffer_size: int = 256
    target_every: int = 20
    eta0: float = 0.01
    gamma: float = 0.6
    epsilon: float = 0.1
    epsilon_decay: bool = False
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    optimizer: str = "sgd"


@dataclass
class DistillSection:
    rho: float = 0.2
    sigma_aug: float = 0.05
    max_states: int = 4000
    student_encoder_task: int = 0


@dataclass
class StudentSection:
    epochs: int = 10
    batch_size: int = 64
    eta0: float = 0.01
    optimizer: str = "adam"
    smooth_window: int = 3


@dataclass
class EvalSection:
    sessions: int = 10000
    teacher_sessions: int = 2000
    k: int = 5
    batch: int = 2500


@dataclass
class BenchSection:
    repetitions: int = 1000
    states: int = 50


@dataclass
class RunSection:
    seed: int = 0
    outer_rounds: int = 1


SECTIONS = {
    "run": RunSection,
    "model": ModelSection,
    "env": EnvSection,
    "teacher": TeacherSection,
    "distill": DistillSection,
    "student": StudentSection,
    "eval": EvalSection,
    "bench": BenchSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    env: EnvSection = field(default_factory=EnvSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    student: StudentSection = field(default_factory=StudentSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def as_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def section_hash(self, *names) -> str:
        blob = json.dumps({n: self.as_dict()[n] for n in names}, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> "RunConfig":
        m, e, t, d, s = self.model, self.env, self.teacher, self.distill, self.student
        counts = {
            "model.window": m.window, "model.n_short": m.n_short, "model.n_long": m.n_long,
            "model.n_context": m.n_context, "model.n_gru": m.n_gru, "model.n_tasks": m.n_tasks,
            "env.n_items": e.n_items, "env.n_users": e.n_users, "env.n_regions": e.n_regions,
            "env.session_len": e.session_len, "env.log_sessions": e.log_sessions,
            "env.log_session_len": e.log_session_len,
            "teacher.steps_per_epoch": t.steps_per_epoch, "teacher.batch_size": t.batch_size,
            "teacher.buffer_size": t.buffer_size, "teacher.target_every": t.target_every,
            "student.batch_size": s.batch_size, "student.smooth_window": s.smooth_window,
            "distill.max_states": d.max_states, "eval.sessions": self.eval.sessions,
            "eval.teacher_sessions": self.eval.teacher_sessions, "eval.k": self.eval.k,
            "eval.batch": self.eval.batch, "bench.states": self.bench.states,
            "run.outer_rounds": self.run.outer_rounds,
        }
        for key, v in counts.items():
            if v < 1:
                raise ConfigError(f"{key} must be positive, got {v}")
        for key, v in {"teacher.epochs": t.epochs, "student.epochs": s.epochs}.items():
            if v < 0:
                raise ConfigError(f"{key} must be non-negative, got {v}")
        if any(w < 1 for w in (*m.q_hidden, *m.trunk, *m.branch)):
            raise ConfigError("layer widths must be positive")
        if not m.trunk:
            raise ConfigError("model.trunk needs at least one layer")
        if m.tau <= 0:
            raise ConfigError(f"model.tau must be positive, got {m.tau}")
        if any(x < 0 for x in m.lambdas):
            raise ConfigError("model.lambdas entries must be non-negative")
        if e.kind == "featurized" and len(m.lambdas) != m.n_tasks:
            raise ConfigError(f"model.lambdas has {len(m.lambdas)} entries for {m.n_tasks} tasks")
        if not 0 <= t.gamma < 1:
            raise ConfigError(f"teacher.gamma must lie in [0, 1), got {t.gamma}")
        for key, v in {"teacher.epsilon": t.epsilon, "teacher.epsilon_start": t.epsilon_start,
                       "teacher.epsilon_end": t.epsilon_end}.items():
            if not 0 <= v <= 1:
                raise ConfigError(f"{key} must lie in [0, 1], got {v}")
        if t.eta0 <= 0 or s.eta0 <= 0:
            raise ConfigError("learning rates must be positive")
        for key, v in {"teacher.optimizer": t.optimizer, "student.optimizer": s.optimizer}.items():
            if v not in ("adam", "sgd"):
                raise ConfigError(f"{key} must be adam or sgd, got {v!r}")
        if e.kind not in ("featurized", "tabular"):
            raise ConfigError(f"env.kind must be featurized or tabular, got {e.kind!r}")
        if e.action_mode not in ("multi", "single"):
            raise ConfigError(f"env.action_mode must be multi or single, got {e.action_mode!r}")
        if d.rho < 0 or d.sigma_aug < 0:
            raise ConfigError("distill.rho and distill.sigma_aug must be non-negative")
        if not 0 <= d.student_encoder_task < m.n_tasks:
            raise ConfigError(f"distill.student_encoder_task out of range: {d.student_encoder_task}")
        if self.run.outer_rounds != 1:
            raise ConfigError("run.outer_rounds: only a single teacher/distill/student round is supported")
        if self.bench.repetitions < 100:
            raise ConfigError(f"bench.repetitions must be at least 100, got {self.bench.repetitions}")
        return self


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    return raw


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    """Set ``{section: {key: raw string}}`` on ``cfg``, rejecting unknown names."""
    for sec, items in values.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        obj = getattr(cfg, sec)
        known = {f.name for f in dataclasses.fields(obj)}
        for key, raw in items.items():
            if key not in known:
                raise ConfigError(f"unknown config key {sec}.{key}")
            setattr(obj, key, _convert(str(raw), getattr(obj, key), f"{sec}.{key}"))
    return cfg


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {sec: dict(parser[sec]) for sec in parser.sections()}
    return apply_overrides(RunConfig(), values).validate()


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for sec, values in cfg.as_dict().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def stage_seed(root: int, stage: str) -> np.random.SeedSequence:
    """Independent seed for a stage: ``SeedSequence([root, crc32(stage name)])``."""
    return np.random.SeedSequence([int(root), zlib.crc32(stage.encode("utf-8"))])


def stage_rng(root: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(stage_seed(root, stage))


def stage_int_seed(root: int, stage: str) -> int:
    return int(stage_seed(root, stage).generate_state(1)[0])
