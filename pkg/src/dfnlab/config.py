"""Experiment configuration: flat ``key = value`` text files with typed defaults."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

# per-target finetune learning rates; order-of-magnitude presets, one per target style
DEFAULT_FINETUNE_LR = {"target-a": 1e-3, "target-b": 5e-3, "target-c": 5e-3}


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    source_domain: str = "source"
    targets: tuple[str, ...] = ("target-a", "target-b", "target-c")
    shots: int = 1
    adapters: str = "dfn"             # preset name, see harness.adapter_preset
    init: str = "gaussian"
    optimizer: str = "adam"
    sam_target: str = "none"          # none | whole-model | dfn-only | svn
    rho: float = 0.5
    pretrain_steps: int = 1000
    source_epochs: int = 30
    episodes_per_epoch: int = 200
    batch_size: int = 8
    pool_per_class: int = 60
    source_lr: float = 1e-3
    finetune_iters: int = 50
    finetune_lr: dict = field(default_factory=lambda: dict(DEFAULT_FINETUNE_LR))
    finetune_pool: int = 8
    eval_episodes: int = 20
    population: int = 256
    noise_sigma: float = 0.05
    noise_trials: int = 10
    reinit_trials: int = 3
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.shots not in (1, 5):
            raise ValueError("shots must be 1 or 5")
        if self.finetune_iters < 0 or self.source_epochs < 1 or self.episodes_per_epoch < 1:
            raise ValueError("iteration counts must be positive")
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is implemented")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.episodes_per_epoch // self.batch_size)

    def lr_for(self, target: str) -> float:
        return float(self.finetune_lr.get(target, 1e-3))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["seeds"] = tuple(d["seeds"])
        d["targets"] = tuple(d["targets"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(x) for x in items)
        return tuple(items)
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``finetune_lr.<target> = <lr>`` sets one per-target rate.
    """
    base = base or ExperimentConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    updates: dict = {}
    ft_lr = dict(base.finetune_lr)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("finetune_lr."):
            ft_lr[key.split(".", 1)[1]] = float(value)
            continue
        if key not in defaults or key == "finetune_lr":
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(key, value, defaults[key])
    updates["finetune_lr"] = ft_lr
    return replace(base, **updates)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "finetune_lr":
            lines += [f"finetune_lr.{k} = {lr!r}" for k, lr in sorted(v.items())]
        elif isinstance(v, tuple):
            lines.append(f"{f.name} = {','.join(str(x) for x in v)}")
        else:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
