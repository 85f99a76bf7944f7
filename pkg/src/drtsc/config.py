"""Run configuration: INI files with one section per subsystem.

Every constant the drivers use can be overridden from a ``key = value``
file.  Two files ship with the package: ``paper.cfg`` (full-scale
protocol) and ``desk.cfg`` (horizons and iteration counts cut to fit a
desk machine).  ``--scale`` multiplies horizons and iteration counts on
top of whichever file is loaded.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .microsim import SimConfig
from .observe import ObsConfig, RewardWeights


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class DemandConfig:
    total: float = 5000.0
    corridor_share: float = 0.7
    concentration_share: float = 0.6
    perturbation: float = 0.1
    heldout_path: str = ""


@dataclass(frozen=True)
class TrainConfig:
    """One training driver's settings.

    ``horizon`` is the recorded part of an episode; a windowed trainer
    runs ``warmup`` extra seconds first, and ``window`` must divide
    ``horizon``.
    """

    horizon: int = 900
    rollouts: int = 4
    iterations: int = 300
    window: int = 600
    warmup: int = 0
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 0  # 0: use every record collected this iteration
    buffer_capacity: int = 0  # 0: one iteration's worth of records
    gamma: float = 0.99
    return_mode: str = "discounted"  # "immediate" | "discounted"
    gamma_return: float = 0.98
    credit: str = "local"  # "team" | "local"
    baseline: str = "time"  # "none" | "time"; the estimator uses "none" | "context"
    surrogate: str = "plain"  # "plain" | "clip"
    clip: float = 0.2
    epochs: int = 1
    minibatch: int = 0  # 0: one step on the whole sampled batch
    entropy_coef: float = 0.0
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self, windowed: bool = False) -> "TrainConfig":
        for name in ("horizon", "rollouts", "window", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("iterations", "warmup", "batch_size", "buffer_capacity",
                     "checkpoint_every", "minibatch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.learning_rate < 0 or self.entropy_coef < 0:
            raise ConfigError("learning_rate and entropy_coef must be non-negative")
        if not 0 < self.gamma <= 1 or not 0 < self.gamma_return <= 1:
            raise ConfigError("discount factors must lie in (0, 1]")
        if windowed and self.horizon % self.window:
            raise ConfigError(
                f"window {self.window} s does not divide horizon {self.horizon} s")
        choices = {
            "optimizer": ("adam", "sgd"),
            "return_mode": ("immediate", "discounted"),
            "credit": ("team", "local"),
            "baseline": ("none", "time", "context"),
            "surrogate": ("plain", "clip"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        return self


@dataclass(frozen=True)
class EvalConfig:
    horizon: int = 1800
    warmup: int = 300
    rollouts: int = 5
    mode: str = "greedy"  # "greedy" | "sample"
    return_proxy: str = "queue"  # "queue" | "reward"
    fixed_cycle: int = 30
    seed: int = 0

    def validate(self) -> "EvalConfig":
        if self.horizon <= 0 or self.rollouts <= 0 or self.fixed_cycle <= 0:
            raise ConfigError("eval horizon, rollouts and fixed_cycle must be positive")
        if self.warmup < 0:
            raise ConfigError("eval warmup must be non-negative")
        if self.mode not in ("greedy", "sample"):
            raise ConfigError("eval mode must be greedy or sample")
        if self.return_proxy not in ("queue", "reward"):
            raise ConfigError("return_proxy must be queue or reward")
        return self


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    link_length: float = 100.0
    obs: ObsConfig = field(default_factory=ObsConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    demand: DemandConfig = field(default_factory=DemandConfig)
    baseline: TrainConfig = field(default_factory=TrainConfig)
    wce: TrainConfig = field(default_factory=lambda: TrainConfig(
        horizon=9600, rollouts=8, iterations=50, warmup=300, learning_rate=1e-3,
        batch_size=64))
    drmarl: TrainConfig = field(default_factory=lambda: TrainConfig(
        horizon=9600, rollouts=2, iterations=400, warmup=300))
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.baseline.validate()
        self.wce.validate(windowed=True)
        self.drmarl.validate(windowed=True)
        self.eval.validate()
        for name in ("baseline", "drmarl"):
            if getattr(self, name).baseline == "context":
                raise ConfigError(f"[{name}] baseline = context applies to the estimator only")
        if self.link_length <= 0:
            raise ConfigError("link_length must be positive")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self, seed=seed,
            baseline=replace(self.baseline, seed=seed),
            wce=replace(self.wce, seed=seed),
            drmarl=replace(self.drmarl, seed=seed),
            eval=replace(self.eval, seed=seed),
        )

    def scaled(self, factor: float) -> "RunConfig":
        """Multiply horizons and iteration counts by ``factor``."""
        if factor <= 0:
            raise ConfigError("scale factor must be positive")
        if factor == 1:
            return self
        return replace(
            self,
            baseline=_scale_train(self.baseline, factor, windowed=False),
            wce=_scale_train(self.wce, factor, windowed=True),
            drmarl=_scale_train(self.drmarl, factor, windowed=True),
            eval=replace(self.eval, horizon=max(1, round(self.eval.horizon * factor))),
        )


def _scale_train(cfg: TrainConfig, factor: float, windowed: bool) -> TrainConfig:
    if windowed:
        n_win = max(1, round(cfg.horizon / cfg.window * factor))
        horizon = n_win * cfg.window
    else:
        horizon = max(1, round(cfg.horizon * factor))
    iterations = round(cfg.iterations * factor)
    if cfg.iterations > 0:
        iterations = max(1, iterations)
    return replace(cfg, horizon=horizon, iterations=iterations)


# --------------------------------------------------------------------------
# INI parsing

_SECTIONS = {
    "sim": ("sim", SimConfig),
    "observation": ("obs", ObsConfig),
    "reward": ("reward", RewardWeights),
    "demand": ("demand", DemandConfig),
    "baseline": ("baseline", TrainConfig),
    "wce": ("wce", TrainConfig),
    "drmarl": ("drmarl", TrainConfig),
    "eval": ("eval", EvalConfig),
}


def _coerce(kind, raw: str, where: str):
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def _apply_section(obj, items, where: str):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kind = known[key].type
        updates[key] = _coerce(kind, raw, f"{where}.{key}")
    try:
        return replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key == "seed":
                    cfg = replace(cfg, seed=_coerce(int, raw, f"{source}:run.seed"))
                elif key == "link_length":
                    cfg = replace(cfg, link_length=_coerce(float, raw, f"{source}:run.link_length"))
                else:
                    raise ConfigError(f"{source}:run: unknown key {key!r}")
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        attr, _ = _SECTIONS[section]
        cfg = replace(cfg, **{attr: _apply_section(getattr(cfg, attr), parser.items(section),
                                                   f"{source}:{section}")})
    return cfg.with_seed(cfg.seed).validate()


def load_config(path=None) -> RunConfig:
    """Load ``path``, or the packaged ``desk.cfg`` when ``path`` is None.

    ``"paper"`` and ``"desk"`` name the shipped files.
    """
    if path is None or str(path) in ("desk", "paper"):
        name = f"{path or 'desk'}.cfg"
        text = (resources.files("drtsc") / "data" / name).read_text(encoding="utf-8")
        return parse_config(text, name)
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
