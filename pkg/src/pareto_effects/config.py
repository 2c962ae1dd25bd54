"""Experiment configuration: INI files, ablation switches and defaults per dataset."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import DGPS, get_dgp
from .poe import PoeConfig
from .popl import PoplConfig

ABLATION_MODES = ("separate_s", "separate_y", "joint", "joint_shat", "joint_shat_pareto")

# Switch settings per ablation mode, applied on top of the POE config.
MODE_OVERRIDES: dict[str, dict] = {
    "separate_s": {"tasks": ("mi", "s"), "shat_feed": False, "K": 0},
    "separate_y": {"tasks": ("mi", "y"), "shat_feed": False, "K": 0},
    "joint": {"tasks": ("mi", "s", "y"), "shat_feed": False, "K": 0},
    "joint_shat": {"tasks": ("mi", "s", "y"), "shat_feed": True, "K": 0},
    "joint_shat_pareto": {"tasks": ("mi", "s", "y"), "shat_feed": True},
}

DEFAULT_ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


def apply_mode(poe: PoeConfig, mode: str) -> PoeConfig:
    if mode not in MODE_OVERRIDES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    return replace(poe, **MODE_OVERRIDES[mode])


@dataclass
class ExperimentConfig:
    dataset: str = "simulation"
    n: int = 20000
    covariates: str | None = None
    seeds: tuple[int, ...] = (0,)
    mode: str = "joint_shat_pareto"
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    grid_points: int = 50
    # evaluation interval; None means the observed treatment range
    t_min: float | None = None
    t_max: float | None = None
    epsilon: float = 0.01
    split_fractions: tuple[float, ...] = (0.64, 0.16, 0.20)
    poe: PoeConfig = field(default_factory=PoeConfig)
    popl: PoplConfig = field(default_factory=PoplConfig)

    def __post_init__(self):
        get_dgp(self.dataset)
        if self.mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}; expected one of {ABLATION_MODES}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("seed list must be nonempty")
        self.alpha_grid = tuple(float(a) for a in self.alpha_grid)
        if not self.alpha_grid:
            raise ValueError("alpha grid must be nonempty")
        self.split_fractions = tuple(self.split_fractions)

    def poe_for(self, seed: int, mode: str | None = None, alpha: float | None = None) -> PoeConfig:
        poe = apply_mode(replace(self.poe, seed=seed), mode or self.mode)
        if alpha is not None:
            poe = replace(poe, alpha=alpha, beta=1.0 - alpha)
        return poe

    def popl_for(self, seed: int) -> PoplConfig:
        return replace(self.popl, seed=seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def policy_defaults(dataset: str) -> PoplConfig:
    lo, hi = DGPS[dataset].interval
    return PoplConfig(t_min=lo, t_max=hi)


# -- INI parsing ---------------------------------------------------------------------

def _convert(raw: str, annotation):
    text = raw.strip()
    hint = str(annotation)
    if "tuple" in hint:
        inner = float if "float" in hint else int if "int" in hint else str
        return tuple(inner(v.strip()) for v in text.split(",") if v.strip())
    if text.lower() in ("none", "") and "None" in hint:
        return None
    if "bool" in hint:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in hint and "float" not in hint:
        return int(text)
    if "float" in hint:
        return float(text)
    return text


def _overrides(cls, section) -> dict:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} for {cls.__name__}")
        out[key] = _convert(raw, hints[key])
    return out


def load_config(path=None, **flags) -> ExperimentConfig:
    """Read an INI file with optional [experiment], [poe] and [popl] sections.

    Keyword ``flags`` that are not None override the file.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path)
    for name in parser.sections():
        if name not in ("experiment", "poe", "popl"):
            raise ValueError(f"unknown config section [{name}]")
    exp = _overrides(ExperimentConfig, parser["experiment"]) if parser.has_section("experiment") else {}
    exp.pop("poe", None)
    exp.pop("popl", None)
    exp.update({k: v for k, v in flags.items() if v is not None})
    dataset = exp.get("dataset", "simulation")
    get_dgp(dataset)
    poe = PoeConfig(**(_overrides(PoeConfig, parser["poe"]) if parser.has_section("poe") else {}))
    popl = replace(policy_defaults(dataset),
                   **(_overrides(PoplConfig, parser["popl"]) if parser.has_section("popl") else {}))
    # interval flags set both the evaluation grid and the policy's treatment range
    for key in ("t_min", "t_max"):
        if flags.get(key) is not None:
            popl = replace(popl, **{key: flags[key]})
    return ExperimentConfig(**exp, poe=poe, popl=popl)


def write_config(config: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str

    def flat(obj, skip=()):
        out = {}
        for f in fields(obj):
            if f.name in skip:
                continue
            v = getattr(obj, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    parser["experiment"] = flat(config, skip=("poe", "popl"))
    parser["poe"] = flat(config.poe)
    parser["popl"] = flat(config.popl)
    with Path(path).open("w") as fh:
        parser.write(fh)
