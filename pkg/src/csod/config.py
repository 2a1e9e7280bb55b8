"""Flat ``key=value`` run configuration with dotted keys (``net.stages=4``)."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .net import NetConfig, _parse_field
from .optim import OptimizerConfig


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("adax"))
    epochs: int = 18
    accumulation: int = 10
    base_lr: float = 5e-5
    seed: int = 0
    dataset_root: str = "data"
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", "epochs")
        if self.accumulation < 1:
            raise ConfigError(f"accumulation must be >= 1, got {self.accumulation}", "accumulation")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}", "base_lr")

    def optimizer_config(self):
        return self.optimizer.replace(alpha=self.base_lr)

    def to_text(self):
        lines = [f"net.{line}" for line in self.net.to_lines()]
        for f in fields(OptimizerConfig):
            if f.name == "alpha":
                continue
            v = getattr(self.optimizer, f.name)
            lines.append(f"optimizer.{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        for name in ("epochs", "accumulation", "base_lr", "seed", "dataset_root", "output_dir"):
            lines.append(f"{name}={getattr(self, name)}")
        return "\n".join(lines) + "\n"


_TOP = {"epochs": int, "accumulation": int, "base_lr": float, "seed": int, "dataset_root": str, "output_dir": str}
_OPT_FIELDS = {
    "algorithm": str, "beta1": float, "beta2": float, "eps": float,
    "weight_decay": float, "momentum": float, "eps_in_sqrt": bool,
}


def parse_config(text, base_dir=None) -> RunConfig:
    """Parse config text.  Relative paths resolve against ``base_dir``."""
    net_values, opt_values, top = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("net."):
            net_values[key[4:]] = value
        elif key.startswith("optimizer."):
            name = key[len("optimizer."):]
            if name not in _OPT_FIELDS:
                raise ConfigError(f"unknown config key {key!r}", key)
            opt_values[name] = value
        elif key in _TOP:
            top[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}", key)

    try:
        net = NetConfig.from_mapping(net_values)
    except KeyError as exc:
        key = f"net.{exc.args[0]}"
        raise ConfigError(f"unknown config key {key!r}", key) from None
    except ValueError as exc:
        raise ConfigError(f"invalid net config: {exc}") from None

    opt_kwargs = {}
    for name, value in opt_values.items():
        try:
            opt_kwargs[name] = _convert(_OPT_FIELDS[name], value)
        except ValueError:
            raise ConfigError(f"bad value for optimizer.{name}: {value!r}", f"optimizer.{name}") from None
    try:
        opt = OptimizerConfig(**opt_kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid optimizer config: {exc}") from None

    kwargs = {}
    for name, value in top.items():
        try:
            kwargs[name] = _convert(_TOP[name], value)
        except ValueError:
            raise ConfigError(f"bad value for {name}: {value!r}", name) from None
    for name in ("dataset_root", "output_dir"):
        if name in kwargs and base_dir is not None and not Path(kwargs[name]).is_absolute():
            kwargs[name] = str(Path(base_dir) / kwargs[name])
    return RunConfig(net=net, optimizer=opt, **kwargs)


def _convert(kind, value):
    if kind is bool:
        return _parse_field("", value, False)
    return kind(value)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
