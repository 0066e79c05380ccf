"""Run configuration: one INI file with [run], [data], [train] and [eval] sections."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from . import casestudies as cs
from .training import ConfigError, TrainConfig


@dataclass(frozen=True)
class DataConfig:
    n_replicates: int = 10_000
    K: int = 50
    dt: float = 1.0
    seed: int = 0
    ic_counts: tuple = ()
    max_order: int = 4
    # simulation steps per sampling interval
    record_every: int = 1
    write_trajectories: bool = False


@dataclass(frozen=True)
class EvalConfig:
    resolution: int = 100
    K_V: int = 50
    kl_replicates: int = 10_000
    kl_seed: int = 1000
    kl_ic: tuple = ()
    kl_input: tuple = ()
    write_kde: bool = False


@dataclass(frozen=True)
class RunConfig:
    case_id: str
    scale: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.case_id not in cs.CASE_IDS:
            raise ConfigError(f"unknown case study {self.case_id!r}; expected one of {cs.CASE_IDS}")
        if self.scale not in ("desk", "paper"):
            raise ConfigError(f"unknown scale {self.scale!r}")
        if self.data.n_replicates < 2:
            raise ConfigError("n_replicates must be at least 2 to estimate moments")
        if self.data.K < 1 or self.data.dt <= 0 or self.data.record_every < 1:
            raise ConfigError("need K >= 1, dt > 0 and record_every >= 1")
        setup = cs.case_setup(self.case_id, self.scale)
        if len(self.data.ic_counts) != len(setup.ic_counts):
            raise ConfigError(f"ic_counts needs {len(setup.ic_counts)} entries")

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with every seed derived from ``seed``."""
        return dataclasses.replace(
            self, data=dataclasses.replace(self.data, seed=seed),
            train=dataclasses.replace(self.train, split_seed=seed, init_seed=seed),
            eval=dataclasses.replace(self.eval, kl_seed=seed + 1000))

    def replace(self, section=None, **kw) -> "RunConfig":
        if section is None:
            return dataclasses.replace(self, **kw)
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section),
                                                                        **kw)})


def default_config(case_id: str, scale: str = "desk") -> RunConfig:
    setup = cs.case_setup(case_id, scale)
    data = DataConfig(n_replicates=10_000 if scale == "desk" else 100_000, K=setup.K,
                      dt=setup.dt, ic_counts=tuple(setup.ic_counts))
    train = TrainConfig(loss_mode=setup.loss_mode, diffusion_head=setup.diffusion_head,
                        drift_head=setup.drift_head)
    ic = 0.5 * (setup.ic_lower + setup.ic_upper)
    u = 0.5 * (setup.input_lower + setup.input_upper)
    ev = EvalConfig(resolution=setup.eval_resolution, K_V=setup.K,
                    kl_replicates=10_000 if scale == "desk" else 100_000,
                    kl_ic=tuple(float(v) for v in ic), kl_input=tuple(float(v) for v in u))
    return RunConfig(case_id, scale, data, train, ev)


# --------------------------------------------------------------------------
# INI round trip


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def _parse(text: str, like):
    if isinstance(like, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = text.split()
        if like and all(isinstance(x, int) for x in like):
            return tuple(int(p) for p in parts)
        # empty defaults: integers if they look like integers
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            return tuple(float(p) for p in parts)
    return text


def _section(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            for g in dataclasses.fields(v):
                out[f"{f.name}.{g.name}"] = _fmt(getattr(v, g.name))
        else:
            out[f.name] = "" if v is None else _fmt(v)
    return out


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case sensitive (K, K_V)
    return cp


def to_ini(cfg: RunConfig) -> configparser.ConfigParser:
    cp = _parser()
    cp["run"] = {"case_id": cfg.case_id, "scale": cfg.scale}
    cp["data"] = _section(cfg.data)
    cp["train"] = _section(cfg.train)
    cp["eval"] = _section(cfg.eval)
    return cp


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        to_ini(cfg).write(fh)


def _update(obj, items: dict, where: str):
    kw, nested = {}, {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, text in items.items():
        head, _, tail = key.partition(".")
        if head not in names:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        if tail:
            nested.setdefault(head, {})[tail] = text
            continue
        like = getattr(obj, head)
        if like is None:
            kw[head] = int(text) if text.strip() else None
        else:
            kw[head] = _parse(text, like)
    for head, sub in nested.items():
        kw[head] = _update(getattr(obj, head), sub, f"{where}.{head}")
    try:
        return dataclasses.replace(obj, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def load_config(path) -> RunConfig:
    """Reads an INI run config; keys not given keep the case's defaults."""
    cp = _parser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config {path}")
    if "run" not in cp or "case_id" not in cp["run"]:
        raise ConfigError(f"{path}: missing [run] case_id")
    case_id = cp["run"]["case_id"]
    scale = cp["run"].get("scale", "desk")
    if case_id not in cs.CASE_IDS:
        raise ConfigError(f"unknown case study {case_id!r}")
    base = default_config(case_id, scale)
    sections = {}
    for name in ("data", "train", "eval"):
        obj = getattr(base, name)
        sections[name] = _update(obj, dict(cp[name]), name) if name in cp else obj
    return RunConfig(case_id, scale, **sections)

