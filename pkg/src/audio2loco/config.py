"""Run configuration: a versioned YAML document mapped onto the library's config dataclasses.

Every section mirrors one module's parameters. Loading starts from the
defaults and overlays the document, so a file only needs the keys it
changes. Unknown keys, wrong types and out-of-range values raise
``ConfigError`` naming the dotted path of the offending key.
"""

from __future__ import annotations

import copy
import dataclasses
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .align import AlignConfig
from .data import SyntheticConfig
from .errors import ConfigError
from .rewards import CurriculumState, RewardConfig
from .training import DistillConfig, PpoConfig, TaskConfig

SCHEMA_VERSION = 1


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` as a float (YAML 1.1 wants a dot in the mantissa)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def load_yaml(text):
    return yaml.load(text, Loader=_Loader)
TASKS = ("dance", "speech", "all")
ABLATION_AXES = ("ddim_steps", "eta", "beta_max", "objective", "experts", "moe_kind", "adaptor", "content", "sampler")


def _default_grids():
    return {
        "ddim_steps": [2, 4, 6, 8, 10],
        "eta": [0.0, 0.5, 1.0],
        "beta_max": [0.1, 0.2, 0.4],
        "objective": ["x0", "epsilon"],
        "experts": [2, 3, 4],
        "moe_kind": ["vanilla", "delta"],
        "adaptor": ["on", "off"],
        "content": ["on", "off"],
        "sampler": ["ddim", "ddpm"],
    }


# generator parameters shared by both splits; clip counts and seeds live on DataConfig
SynthConfig = dataclasses.make_dataclass(
    "SynthConfig",
    [(f.name, f.type, field(default=f.default)) for f in dataclasses.fields(SyntheticConfig)
     if f.name not in ("n_clips", "seed")],
)


@dataclass
class DataConfig:
    train_clips: int = 64
    held_out_clips: int = 32
    # None derives the corpus seed from the run seed's "data" stream
    train_seed: int | None = None
    held_out_seed: int | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class EvalConfig:
    split: str = "held_out"
    clips: int = 0  # 0 evaluates every clip of the split
    theta: float = 0.3
    shuffle_control: bool = False
    trajectories: bool = False
    latency_repeats: int = 20


@dataclass
class FilterConfig:
    body: str = "biped"
    eps_stab: float = 0.1
    max_unstable: int = 100


@dataclass
class AblateConfig:
    seeds: tuple = (0,)
    grids: dict = field(default_factory=_default_grids)


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs/default"
    task: str = "all"
    threads: int = 1
    train_clips: int = 16  # clips (from the training corpus) used for teacher RL and distillation
    data: DataConfig = field(default_factory=DataConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    env: TaskConfig = field(default_factory=TaskConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    curriculum: CurriculumState = field(default_factory=CurriculumState)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)


# -- generic overlay --------------------------------------------------------------


def _type_name(v):
    return type(v).__name__


def _coerce(value, default, path):
    """Check ``value`` against the type of ``default`` and convert lists to tuples where needed."""
    if dataclasses.is_dataclass(default):
        return _overlay(default, value, path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if default:
            return tuple(_coerce(v, default[0], f"{path}[{i}]") for i, v in enumerate(value))
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
        out = dict(default)
        for k, v in value.items():
            if k not in default:
                raise ConfigError(f"{path}.{k}", f"unknown key (expected one of {sorted(default)})")
            out[k] = _coerce(v, default[k], f"{path}.{k}") if default[k] is not None else v
        return out
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(path, f"expected an integer or null, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported default of type {_type_name(default)}")


def _overlay(base, raw, path):
    if raw is None:
        return copy.deepcopy(base)
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {raw!r}")
    names = {f.name for f in dataclasses.fields(base)}
    changes = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(sub, f"unknown key (expected one of {sorted(names)})")
        changes[key] = _coerce(value, getattr(base, key), sub)
    return dataclasses.replace(copy.deepcopy(base), **changes)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg):
    return _plain(cfg)


# -- validation ------------------------------------------------------------------------


def _check(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def _validate_align(a):
    _check(a.window > 1, "align.window", "must be > 1")
    _check(a.latent_dim > 0 and a.audio_latent_dim > 0, "align.latent_dim", "latent widths must be positive")
    _check(a.model_dim % a.n_heads == 0, "align.n_heads", f"must divide model_dim={a.model_dim}")
    _check(a.vae_steps >= 0 and a.align_steps >= 0, "align.align_steps", "step counts must be >= 0")
    _check(a.tau > 0, "align.tau", "temperature must be positive")
    _check(a.batch >= 2, "align.batch", "contrastive batches need at least 2 clips")


def _validate_curriculum(c):
    lo, hi = c.theta_bounds
    _check(0 < lo <= hi, "curriculum.theta_bounds", "need 0 < low <= high")
    _check(lo <= c.theta <= hi, "curriculum.theta", "must lie inside theta_bounds")
    plo, phi = c.penalty_bounds
    _check(0 <= plo <= phi, "curriculum.penalty_bounds", "need 0 <= low <= high")
    _check(c.theta_decay >= 0 and c.penalty_growth >= 0, "curriculum.theta_decay", "rates must be >= 0")


def validate_config(cfg):
    _check(cfg.schema_version == SCHEMA_VERSION, "schema_version",
           f"unsupported version {cfg.schema_version} (this build reads {SCHEMA_VERSION})")
    _check(cfg.seed >= 0, "seed", "must be >= 0")
    _check(cfg.task in TASKS, "task", f"expected one of {list(TASKS)}")
    _check(cfg.threads >= 1, "threads", "must be >= 1")
    _check(cfg.train_clips >= 1, "train_clips", "must be >= 1")
    d = cfg.data
    _check(d.train_clips >= 1 and d.held_out_clips >= 1, "data.train_clips", "corpus sizes must be >= 1")
    _check(cfg.train_clips <= d.train_clips, "train_clips", f"cannot exceed data.train_clips={d.train_clips}")
    try:
        synthetic_config(cfg, "train", 0).validate()
    except ValueError as exc:
        raise ConfigError("data.synth", str(exc)) from None
    _check(cfg.align.window == d.synth.window, "align.window", f"must equal data.synth.window={d.synth.window}")
    _validate_align(cfg.align)
    cfg.env.validate()
    cfg.ppo.validate()
    cfg.rewards.validate()
    _validate_curriculum(cfg.curriculum)
    cfg.distill.validate()
    e = cfg.eval
    _check(e.split in ("train", "held_out"), "eval.split", "expected 'train' or 'held_out'")
    _check(e.clips >= 0, "eval.clips", "must be >= 0")
    _check(e.theta > 0 or math.isinf(e.theta), "eval.theta", "must be positive")
    _check(cfg.filter.eps_stab > 0, "filter.eps_stab", "must be positive")
    _check(cfg.filter.max_unstable >= 1, "filter.max_unstable", "must be >= 1")
    _check(cfg.filter.body in ("chain", "biped"), "filter.body", "expected 'chain' or 'biped'")
    _check(cfg.env.body in ("chain", "biped"), "env.body", "expected 'chain' or 'biped'")
    _check(len(cfg.ablate.seeds) >= 1, "ablate.seeds", "need at least one seed")
    for axis in cfg.ablate.grids:
        _check(axis in ABLATION_AXES, f"ablate.grids.{axis}", "unknown axis")
    return cfg


def synthetic_config(cfg, split, seed):
    n = cfg.data.train_clips if split == "train" else cfg.data.held_out_clips
    return SyntheticConfig(**dataclasses.asdict(cfg.data.synth), n_clips=n, seed=int(seed))


# -- files ------------------------------------------------------------------------------------


def config_from_dict(raw):
    raw = dict(raw or {})
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r} (this build reads {SCHEMA_VERSION})")
    return validate_config(_overlay(RunConfig(), raw, ""))


def loads_config(text):
    try:
        raw = load_yaml(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    if isinstance(raw, dict) and raw.get("kind") == "manifest":
        raw = raw["config"]  # replaying a run from its manifest
    return config_from_dict(raw)


def load_config(path):
    return loads_config(Path(path).read_text())


def dumps_config(cfg):
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=False)


def _set_dotted(raw, dotted, value):
    parsed = load_yaml(value) if isinstance(value, str) else value
    node = raw
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(dotted, "unknown key")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(dotted, "unknown key")
    node[parts[-1]] = parsed


def apply_overrides(cfg, pairs):
    """Return a copy of ``cfg`` with dotted keys replaced (values parsed as YAML), validated once at the end."""
    raw = config_to_dict(cfg)
    for dotted, value in pairs:
        _set_dotted(raw, dotted, value)
    return config_from_dict(raw)


def apply_override(cfg, dotted, value):
    return apply_overrides(cfg, [(dotted, value)])
