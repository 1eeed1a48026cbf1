"""INI-style run configuration: [data] [nets] [losses] [train] [eval].

Every key has a typed default.  Overrides are ``section.key=value`` or a
bare ``key=value`` when the key name is unambiguous; unknown keys are errors.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Iterable, Optional, Tuple

from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    angles: int = 96
    n_cases: int = 5
    reference: str = "aligned"


SECTIONS: Dict[str, Tuple[str, ...]] = {
    "data": ("size", "n_cases", "n_val", "data_seed", "magnitude", "slip"),
    "nets": ("base_channels", "depth", "mine_hidden", "patch_disc_levels", "gated"),
    "losses": ("lam", "w_ct", "w_edge", "w_adv", "w_contra", "n_pairs", "tissue_aware", "exclusion",
               "boundary_radius", "contra_k", "canny_sigma", "canny_lo", "canny_hi"),
    "train": ("lr_reg", "lr_syn", "batch", "epochs_reg", "epochs_syn", "aug_p", "seed",
              "seg_steps", "seg_lr"),
    "eval": tuple(f.name for f in fields(EvalConfig)),
}

_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_EVAL_FIELDS = {f.name: f for f in fields(EvalConfig)}
assert set(_TRAIN_FIELDS) == {k for s in ("data", "nets", "losses", "train") for k in SECTIONS[s]}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_ini(self) -> str:
        train, ev = asdict(self.train), asdict(self.eval)
        lines = []
        for section, keys in SECTIONS.items():
            values = ev if section == "eval" else train
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_fmt(values[k])}" for k in keys)
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(section: str, key: str, raw: str, default):
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
        return raw
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _resolve(key: str) -> Tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
        if name not in SECTIONS[section]:
            raise ConfigError(f"unknown key {key!r}")
        return section, name
    owners = [s for s, keys in SECTIONS.items() if key in keys]
    if not owners:
        raise ConfigError(f"unknown key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"ambiguous key {key!r}; use one of {[f'{s}.{key}' for s in owners]}")
    return owners[0], key


def load_config(path=None, overrides: Iterable[str] = (), seed: Optional[int] = None) -> RunConfig:
    """Read ``path`` (optional), apply ``overrides`` in order, then ``seed``."""
    pairs = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc.message}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                pairs.append((f"{section}.{key}", raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        pairs.append((key.strip(), raw))

    train_vals, eval_vals = {}, {}
    for key, raw in pairs:
        section, name = _resolve(key)
        if section == "eval":
            eval_vals[name] = _parse(section, name, raw, getattr(EvalConfig(), name))
        else:
            train_vals[name] = _parse(section, name, raw, getattr(TrainConfig(), name))
    if seed is not None:
        train_vals["seed"] = int(seed)
    try:
        cfg = RunConfig(replace(TrainConfig(), **train_vals), replace(EvalConfig(), **eval_vals))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.eval.reference not in ("aligned", "true"):
        raise ConfigError(f"eval.reference must be 'aligned' or 'true', got {cfg.eval.reference!r}")
    if cfg.eval.angles < 16:
        raise ConfigError("eval.angles must be >= 16")
    try:
        cfg.train.spec(2).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
