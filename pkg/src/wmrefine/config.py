"""Run configuration: human-readable INI sections with first-class keys for
every evaluation quantity (iterations n, samples s, rollout lengths, step
size, free bits, scales), plus seed-range parsing and config hashing for
output-file provenance.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .world_model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # [run]
    task: str = "ymaze-po"
    horizon: int = 0              # 0 means the task default
    out: str = "runs/out"
    seeds: tuple = tuple(range(100))
    deterministic: bool = True
    # [model]
    h: int = 128
    groups: int = 8
    classes: int = 8
    ensemble: int = 8
    hidden: int = 128
    ensemble_hidden: int = 64
    # [train]
    budget: int = 20000           # environment steps
    prefill: int = 1500
    collect_per_round: int = 500
    wm_steps_per_round: int = 250
    ac_steps_per_round: int = 50
    checkpoint_every: int = 5000
    batch_size: int = 8
    seq_len: int = 16
    model_lr: float = 1e-3
    actor_lr: float = 4e-4
    critic_lr: float = 1e-3
    kl_scale: float = 1.0
    train_free_bits: float = 1.0
    reward_loss_scale: float = 100.0
    imagination_horizon: int = 20
    gamma: float = 0.97
    return_lambda: float = 0.95
    entropy_coef: float = 0.1
    epsilon: float = 0.3
    train_seed: int = 0
    ensemble_seed: int = 1234
    # [ii]
    objective: str = "none"
    n: int = 10
    s: int = 3
    rollout_len: int = 1
    alpha: float = -1.0           # negative means calibrate
    reg_free_bits: float = 1.0
    reg_scale: float = 1.0
    objective_scale: float = -1.0  # negative means calibrate
    common_random_numbers: bool = False
    # [sweep]
    objectives: tuple = ("sig", "pig")
    lambdas: tuple = (1, 3, 8, 16)
    checkpoints: tuple = ()
    calibration_episodes: int = 5

    def model_config(self, obs_dim: int, action_count: int) -> ModelConfig:
        return ModelConfig(obs_dim=obs_dim, action_count=action_count, h=self.h,
                           groups=self.groups, classes=self.classes,
                           hidden=self.hidden, ensemble=self.ensemble,
                           ensemble_hidden=self.ensemble_hidden)


SECTION_OF = {
    "task": "run", "horizon": "run", "out": "run", "seeds": "run", "deterministic": "run",
    "h": "model", "groups": "model", "classes": "model", "ensemble": "model",
    "hidden": "model", "ensemble_hidden": "model",
    "objective": "ii", "n": "ii", "s": "ii", "rollout_len": "ii", "alpha": "ii",
    "reg_free_bits": "ii", "reg_scale": "ii", "objective_scale": "ii",
    "common_random_numbers": "ii",
    "objectives": "sweep", "lambdas": "sweep", "checkpoints": "sweep",
    "calibration_episodes": "sweep",
}


def parse_seed_range(text: str) -> tuple:
    """Accepts "a..b" (inclusive), a comma list, or a single integer."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return tuple(range(lo, hi + 1))
        if "," in text:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return (int(text),)
    except ValueError as err:
        raise ConfigError(f"cannot parse seed list {text!r}") from err


def _coerce(name: str, default, raw: str):
    kind = type(default)
    try:
        if name == "seeds":
            return parse_seed_range(raw)
        if name in ("objectives", "checkpoints"):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if name == "lambdas":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as err:
        raise ConfigError(f"bad value for {name}: {raw!r}") from err


def load_run_config(path=None, text=None) -> RunConfig:
    """Parse INI-style sections; unknown keys are rejected."""
    parser = configparser.ConfigParser()
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path) as fh:
                parser.read_file(fh)
    except (OSError, configparser.Error) as err:
        raise ConfigError(f"cannot read config: {err}") from err
    cfg = RunConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section in parser.sections():
        if section not in ("run", "model", "train", "ii", "sweep"):
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            expected = SECTION_OF.get(key, "train")
            if section != expected:
                raise ConfigError(f"key {key!r} belongs in [{expected}], found in [{section}]")
            setattr(cfg, key, _coerce(key, known[key], raw))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from .refine import OBJECTIVES

    if cfg.task not in ("ymaze-po", "ymaze-fo", "collect", "collect-fo"):
        raise ConfigError(f"unknown task {cfg.task!r}")
    if cfg.objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {cfg.objective!r}")
    for name in cfg.objectives:
        if name not in OBJECTIVES or name == "none":
            raise ConfigError(f"unknown sweep objective {name!r}")
    if not cfg.seeds:
        raise ConfigError("seed list must be non-empty")
    if cfg.n < 0 or cfg.s < 1 or cfg.rollout_len < 0:
        raise ConfigError("ii section requires n >= 0, s >= 1, rollout_len >= 0")
    if min(cfg.budget, cfg.prefill, cfg.checkpoint_every) < 0:
        raise ConfigError("train budgets must be non-negative")


def canonical_text(cfg: RunConfig) -> str:
    """Stable key=value rendering used for hashing.

    The output directory is excluded: it never changes run content.
    """
    pairs = []
    for f in fields(cfg):
        if f.name == "out":
            continue
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        pairs.append(f"{f.name}={val}")
    return "\n".join(sorted(pairs))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()[:16]


def write_default_config(path) -> None:
    cfg = RunConfig()
    out = io.StringIO()
    out.write("# wmrefine run configuration\n")
    sections: dict[str, list] = {"run": [], "model": [], "train": [], "ii": [], "sweep": []}
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        sections[SECTION_OF.get(f.name, "train")].append(f"{f.name} = {val}")
    for name, lines in sections.items():
        out.write(f"\n[{name}]\n")
        out.write("\n".join(lines) + "\n")
    with open(path, "w") as fh:
        fh.write(out.getvalue())
