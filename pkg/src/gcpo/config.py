"""Run configuration and its plain-text file format.

Files use ``[section]`` headers and ``key = value`` lines, '#' comments.
Every key belongs to one section (see ``SECTIONS``); unknown keys, misplaced
keys and unparsable values are errors that name the offending line.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path

from .tasks import TaskSpec


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    algorithm: str = "grpo"
    seed: int = 0
    steps: int = 300
    batch_queries: int = 8
    n: int = 4
    # model
    d: int = 64
    L: int = 2
    max_context: int = 256
    n_heads: int = 4
    # task / sampling
    task: str = "modadd"
    k: int = 1
    max_len: int = 6
    temperature: float = 1.0
    train_seed_start: int = 0
    train_seed_span: int = 1_000_000
    # optimiser
    lr: float = 3e-3
    schedule: str = "constant"
    warmup_ratio: float = 0.0
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # surrogate
    eps: float = 0.2
    beta: float = 0.04
    # causal extension
    kappa: float = 0.06
    alpha: float = 2.0
    m: int = 2
    phi_sum_mode: str = "mean"
    metric: str = "cosine"
    upsilon_floor: float | None = None
    aux_greedy: bool = False
    # evaluation / output
    eval_every: int = 50
    n_eval: int = 200
    eval_seed_start: int = 2_000_000
    checkpoint_every: int = 0
    dump_rollouts: bool = False
    # test hooks
    force_upsilon: float | None = None
    nan_step: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ("grpo", "gcpo"):
            raise ConfigError(f"algorithm must be grpo or gcpo, got {self.algorithm!r}")
        if self.n < 2:
            raise ConfigError(f"group size n must be >= 2, got {self.n}")
        if not 0.0 < self.eps < 1.0:
            raise ConfigError(f"eps must lie in (0, 1), got {self.eps}")
        if self.beta < 0 or self.kappa < 0:
            raise ConfigError("beta and kappa must be >= 0")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.m < 1 or self.steps < 0 or self.batch_queries < 1 or self.max_len < 1:
            raise ConfigError("m, batch_queries and max_len must be >= 1; steps >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be constant or cosine, got {self.schedule!r}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.phi_sum_mode not in ("mean", "sum"):
            raise ConfigError(f"phi_sum_mode must be mean or sum, got {self.phi_sum_mode!r}")
        if self.metric not in ("cosine", "euclidean", "gaussian"):
            raise ConfigError(f"metric must be cosine, euclidean or gaussian, got {self.metric!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        self.task_spec()

    def task_spec(self) -> TaskSpec:
        try:
            return TaskSpec(self.task, self.k)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "run": ("algorithm", "seed", "steps", "batch_queries", "n"),
    "model": ("d", "L", "max_context", "n_heads"),
    "task": ("task", "k", "max_len", "temperature", "train_seed_start", "train_seed_span"),
    "optim": ("lr", "schedule", "warmup_ratio", "weight_decay", "adam_beta1", "adam_beta2", "adam_eps"),
    "surrogate": ("eps", "beta"),
    "gcpo": ("kappa", "alpha", "m", "phi_sum_mode", "metric", "upsilon_floor", "aux_greedy"),
    "eval": ("eval_every", "n_eval", "eval_seed_start"),
    "output": ("checkpoint_every", "dump_rollouts"),
    "debug": ("force_upsilon", "nan_step"),
}
_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_DEFAULTS = TrainConfig.__dataclass_fields__


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if current == section and key is not None and re.match(rf"^{re.escape(key)}\s*[=:]", line):
            return no
    return 0


def _coerce(name: str, raw: str):
    default = _DEFAULTS[name].default
    ftype = _FIELDS[name].type
    raw = raw.strip()
    optional = "None" in str(ftype)
    if optional and raw.lower() in ("none", ""):
        return None
    if isinstance(default, bool) or "bool" in str(ftype):
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if "int" in str(ftype) and "float" not in str(ftype):
        return int(raw)
    if "float" in str(ftype):
        return float(raw)
    return raw


def loads_config(text: str, source: str = "<string>", **overrides) -> TrainConfig:
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                   interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{_line_of(text, section)}: unknown section [{section}]")
        for key, raw in cp[section].items():
            line = _line_of(text, section, key)
            if key not in SECTIONS[section]:
                home = next((s for s, keys in SECTIONS.items() if key in keys), None)
                hint = f" (belongs in [{home}])" if home else ""
                raise ConfigError(f"{source}:{line}: unknown key {key!r} in [{section}]{hint}")
            try:
                values[key] = _coerce(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for {key}: {exc}") from None
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown override {key!r}")
        if isinstance(value, str):
            try:
                value = _coerce(key, value)
            except ValueError as exc:
                raise ConfigError(f"bad override for {key}: {exc}") from None
        values[key] = value
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path, **overrides) -> TrainConfig:
    path = Path(path)
    return loads_config(path.read_text(encoding="utf-8"), source=str(path), **overrides)


def dumps_config(cfg: TrainConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {getattr(cfg, key)}")
        lines.append("")
    return "\n".join(lines)

