"""Experiment configuration: INI parsing, overrides and fingerprints.

A config file has up to five sections::

    [experiment]   task, total_steps, seeds, cadences, output directory
    [env]          reset schedule and reward transform
    [physics]      task-specific dynamics parameters
    [agent]        learner hyper-parameters
    [interventions]

``[rnd]`` is shorthand for the ``rnd_*`` intervention fields, so ``c_int``
under ``[rnd]`` sets ``interventions.rnd_c_int``. Keys written before any
section header are resolved by name, and dotted keys such as ``rnd.c_int``
work anywhere a key is accepted.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import re
import typing
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

from csac.agent import MODES, AgentConfig
from csac.approx import NORM_MODES
from csac.envs import PHYSICS, TASKS, EnvConfig, env_dims
from csac.interventions import PROBE_MODES, RESET_VARIANTS, InterventionConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass
class ExperimentConfig:
    task: str = "reacher"
    total_steps: int = 100_000
    seeds: tuple[int, ...] = (0,)
    name: str = ""
    out_dir: str = "runs"
    window: int = 1000
    variance_block: int = 1000
    diag_every: int = 1000
    checkpoint_every: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    interventions: InterventionConfig = field(default_factory=InterventionConfig)

    @property
    def label(self) -> str:
        return f"{self.name or self.task}-{fingerprint(self)[:8]}"


# fields that do not change what a run computes
NON_SEMANTIC = ("seeds", "name", "out_dir", "checkpoint_every")

EXPERIMENT_KEYS = ("task", "total_steps", "seeds", "name", "out_dir", "window",
                   "variance_block", "diag_every", "checkpoint_every")

PRESETS = {
    "alpha_toggle_ln": {
        "interventions.alpha_toggle": "true",
        "interventions.alpha_tilde": "0.02",
        "agent.actor_norm": "layer_norm",
        "agent.critic_norm": "layer_norm",
    },
}

_POSITIVE = lambda v: v > 0  # noqa: E731
_NONNEG = lambda v: v >= 0  # noqa: E731
_UNIT = lambda v: 0 <= v <= 1  # noqa: E731

# (section, key) -> (predicate, description)
CONSTRAINTS = {
    ("experiment", "task"): (lambda v: v in TASKS, f"one of {TASKS}"),
    ("experiment", "total_steps"): (_POSITIVE, "positive"),
    ("experiment", "window"): (_POSITIVE, "positive"),
    ("experiment", "variance_block"): (lambda v: v >= 2, "at least 2"),
    ("experiment", "diag_every"): (_POSITIVE, "positive"),
    ("experiment", "checkpoint_every"): (_NONNEG, "nonnegative"),
    ("experiment", "seeds"): (lambda v: len(v) > 0 and all(s >= 0 for s in v), "nonempty, nonnegative"),
    ("env", "time_reset_period"): (lambda v: v is None or v >= 1, "none or >= 1"),
    ("env", "reset_penalty"): (_NONNEG, "nonnegative"),
    ("agent", "mode"): (lambda v: v in MODES, f"one of {MODES}"),
    ("agent", "gamma"): (lambda v: 0 < v <= 1, "in (0, 1]"),
    ("agent", "tau"): (_UNIT, "in [0, 1]"),
    ("agent", "lr_actor"): (_POSITIVE, "positive"),
    ("agent", "lr_critic"): (_POSITIVE, "positive"),
    ("agent", "lr_alpha"): (_NONNEG, "nonnegative"),
    ("agent", "alpha_rbar"): (_UNIT, "in [0, 1]"),
    ("agent", "batch_size"): (_POSITIVE, "positive"),
    ("agent", "buffer_size"): (_POSITIVE, "positive"),
    ("agent", "hidden"): (lambda v: len(v) > 0 and all(h > 0 for h in v), "nonempty, positive"),
    ("agent", "warmup_steps"): (_NONNEG, "nonnegative"),
    ("agent", "init_alpha"): (_POSITIVE, "positive"),
    ("agent", "actor_norm"): (lambda v: v in NORM_MODES, f"one of {NORM_MODES}"),
    ("agent", "critic_norm"): (lambda v: v in NORM_MODES, f"one of {NORM_MODES}"),
    ("agent", "ln_eps"): (_POSITIVE, "positive"),
    ("interventions", "alpha_tilde"): (_POSITIVE, "positive"),
    ("interventions", "toggle_lr_alpha"): (_NONNEG, "nonnegative"),
    ("interventions", "toggle_period"): (_POSITIVE, "positive"),
    ("interventions", "reward_penalty"): (_NONNEG, "nonnegative"),
    ("interventions", "policy_penalty"): (_NONNEG, "nonnegative"),
    ("interventions", "rnd_c_int"): (_NONNEG, "nonnegative"),
    ("interventions", "rnd_p_upd"): (_UNIT, "in [0, 1]"),
    ("interventions", "rnd_lr"): (_POSITIVE, "positive"),
    ("interventions", "rnd_out"): (_POSITIVE, "positive"),
    ("interventions", "fixed_sigma"): (lambda v: v is None or v > 0, "none or positive"),
    ("interventions", "q_probe"): (lambda v: v in PROBE_MODES, f"one of {PROBE_MODES}"),
    ("interventions", "net_reset"): (lambda v: v in RESET_VARIANTS, f"one of {RESET_VARIANTS}"),
    ("interventions", "net_reset_period"): (_POSITIVE, "positive"),
}

_SECTION_TYPES = {"env": EnvConfig, "agent": AgentConfig, "interventions": InterventionConfig}


def _field_types(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


# -- value coercion -------------------------------------------------------------

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}
_NONE = {"none", "null", ""}


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        x = float(text)  # accepts 1e6
        if not x.is_integer():
            raise ValueError(f"{text!r} is not an integer")
        return int(x)


def coerce(text: str, hint) -> Any:
    """Convert one INI value to the annotated field type."""
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if text.lower() in _NONE:
            return None
        return coerce(text, inner[0])
    if hint is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{text!r} is not a boolean")
    if hint is int:
        return _parse_int(text)
    if hint is float:
        x = float(text)
        if math.isnan(x):
            raise ValueError("NaN is not allowed")
        return x
    if hint is str:
        return text
    if hint is tuple or origin is tuple:
        elem = args[0] if args else int
        parts = [p for p in re.split(r"[,\s]+", text.strip("()[] ")) if p]
        return tuple(coerce(p, elem) for p in parts)
    raise ValueError(f"unsupported field type {hint!r}")


# -- key resolution -------------------------------------------------------------

def _section_keys(task: str) -> dict[str, tuple[str, ...]]:
    return {
        "experiment": EXPERIMENT_KEYS,
        "env": tuple(f.name for f in fields(EnvConfig) if f.name not in ("task", "physics")),
        "physics": tuple(f.name for f in fields(PHYSICS[task])),
        "agent": tuple(f.name for f in fields(AgentConfig)),
        "interventions": tuple(f.name for f in fields(InterventionConfig)),
    }


def resolve_key(key: str, section: Optional[str], task: str) -> tuple[str, str]:
    """Map a (possibly dotted or bare) key to its canonical ``(section, field)``."""
    key = key.strip().lower()
    if "." in key:
        section, key = key.split(".", 1)
    if section == "rnd":
        section = "interventions"
        key = {"enabled": "rnd"}.get(key, key if key.startswith("rnd") else f"rnd_{key}")
    keys = _section_keys(task)
    if section is not None:
        if section not in keys:
            raise KeyError(f"unknown section [{section}]")
        if key not in keys[section]:
            raise KeyError(f"unknown key {key!r} in [{section}]")
        return section, key
    hits = [s for s, names in keys.items() if key in names]
    if not hits:
        raise KeyError(f"unknown key {key!r}")
    if len(hits) > 1:
        raise KeyError(f"ambiguous key {key!r}: qualify it with one of {hits}")
    return hits[0], key


def _hint(section: str, key: str, task: str):
    if section == "experiment":
        return _field_types(ExperimentConfig)[key]
    if section == "physics":
        cur = getattr(PHYSICS[task](), key)
        if isinstance(cur, tuple):
            return tuple[float, ...]
        return type(cur)
    return _field_types(_SECTION_TYPES[section])[key]


# -- building -------------------------------------------------------------------

@dataclass
class _Entry:
    section: Optional[str]
    key: str
    value: str
    line: Optional[int]


def _line_numbers(text: str, offset: int) -> dict[tuple[Optional[str], str], int]:
    out, section = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
        elif s and s[0] not in "#;":
            m = re.match(r"([^=:]+)[=:]", s)
            if m:
                out[(section, m.group(1).strip().lower())] = i - offset
    return out


def _read_entries(text: str) -> list[_Entry]:
    first = next((ln.strip() for ln in text.splitlines() if ln.strip() and ln.strip()[0] not in "#;"), "")
    offset = 0
    if first and not first.startswith("["):
        text = "[__top__]\n" + text
        offset = 1
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.option!r} in [{e.section}]", (e.lineno or 0) - offset) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", (e.lineno or 0) - offset) from None
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    lines = _line_numbers(text, offset)
    entries = []
    for sec in parser.sections():
        low = sec.strip().lower()
        for key, value in parser.items(sec, raw=True):
            section = None if low == "__top__" else low
            entries.append(_Entry(section, key, value, lines.get((low, key))))
    return entries


def build_config(entries: list[_Entry]) -> ExperimentConfig:
    """Resolve entries (applied in order, presets first) into a validated config."""
    # the task decides which physics keys exist, so find it first
    task = "reacher"
    for e in entries:
        if e.key.strip().lower() in ("task", "experiment.task") and e.section in (None, "experiment"):
            task = e.value.strip().lower()
    if task not in TASKS:
        line = next((e.line for e in entries if e.key.strip().lower().endswith("task")), None)
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}", line)

    presets = [e for e in entries if e.key.strip().lower() in ("preset", "experiment.preset")]
    expanded: list[_Entry] = []
    for p in presets:
        for name in [n for n in re.split(r"[,\s]+", p.value) if n]:
            if name not in PRESETS:
                raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}", p.line)
            expanded += [_Entry(None, k, v, p.line) for k, v in PRESETS[name].items()]
    expanded += [e for e in entries if e not in presets]

    values: dict[str, dict[str, Any]] = {s: {} for s in ("experiment", "env", "physics", "agent", "interventions")}
    for e in expanded:
        try:
            section, key = resolve_key(e.key, e.section, task)
        except KeyError as err:
            raise ConfigError(err.args[0], e.line) from None
        try:
            v = coerce(e.value, _hint(section, key, task))
        except ValueError as err:
            raise ConfigError(f"{section}.{key}: {err}", e.line) from None
        check = CONSTRAINTS.get((section, key))
        if check and not check[0](v):
            raise ConfigError(f"{section}.{key} must be {check[1]}, got {v!r}", e.line)
        values[section][key] = v
    values["experiment"]["task"] = task

    try:
        env = EnvConfig(task=task, physics=values["physics"], **values["env"])
        agent = AgentConfig(**values["agent"])
        inter = InterventionConfig(**values["interventions"])
        return ExperimentConfig(env=env, agent=agent, interventions=inter, **values["experiment"])
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def parse_config(text: str) -> ExperimentConfig:
    return build_config(_read_entries(text))


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read())


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with ``key -> value`` overrides applied.

    Values may be strings (parsed like INI values) or already-typed Python values.
    """
    entries = _entries_of(cfg)
    for k, v in overrides.items():
        entries.append(_Entry(None, k, _to_text(v), None))
    return build_config(entries)


def _to_text(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_to_text(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _entries_of(cfg: ExperimentConfig) -> list[_Entry]:
    out = [_Entry("experiment", k, _to_text(getattr(cfg, k)), None) for k in EXPERIMENT_KEYS]
    for k in _section_keys(cfg.task)["env"]:
        out.append(_Entry("env", k, _to_text(getattr(cfg.env, k)), None))
    for k, v in cfg.env.physics.items():
        out.append(_Entry("physics", k, _to_text(v), None))
    for sec, obj in (("agent", cfg.agent), ("interventions", cfg.interventions)):
        for f in fields(obj):
            out.append(_Entry(sec, f.name, _to_text(getattr(obj, f.name)), None))
    return out


def to_ini(cfg: ExperimentConfig) -> str:
    """Serialize a config so that ``parse_config(to_ini(cfg)) == cfg``."""
    lines, current = [], None
    for e in _entries_of(cfg):
        if e.section != current:
            if lines:
                lines.append("")
            lines.append(f"[{e.section}]")
            current = e.section
        lines.append(f"{e.key} = {e.value}")
    return "\n".join(lines) + "\n"


# -- fingerprints -----------------------------------------------------------------

def semantic_dict(cfg: ExperimentConfig) -> dict:
    """Everything that influences a run's outputs, with defaults made explicit."""
    d = asdict(cfg)
    for k in NON_SEMANTIC:
        d.pop(k)
    d["env"]["physics"] = asdict(cfg.env.params())
    _, act_dim = env_dims(cfg.task)
    if d["agent"]["target_entropy"] is None:
        d["agent"]["target_entropy"] = -float(act_dim)
    return d


def fingerprint(cfg: ExperimentConfig) -> str:
    blob = json.dumps(semantic_dict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()
