"""Experiment configuration loaded from a flat TOML file.

Keys may appear at top level or inside one level of tables; table names are
organisational only (``[search] lam = 0.8`` and ``lam = 0.8`` are the same).
Every key is optional.  A JSON config echo from an earlier run is accepted
too, which makes re-running a recorded experiment a one-liner.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import tomli

from ..calibration import STRATEGIES


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data and model
    dataset: str = "gaussian-ring"
    n_data: int = 8000
    T: int = 100
    emb_dim: int = 32
    hidden: tuple = (128, 128, 128)
    # pretraining
    pretrain_epochs: int = 200
    pretrain_batch: int = 256
    pretrain_lr: float = 1e-3
    # quantization
    weight_bits: int = 8
    act_bits: int = 8
    p: float = 2.4
    # search and calibration
    n_groups: int = 8
    lam: float = 0.8
    eta: float = 1.5
    strategy: str = "active"
    heuristic_mu: float | None = None
    calib_size: int = 1024
    round_size: int = 64
    batch_size: int = 64
    epochs: int = 10
    search_lr: float | None = None
    lr_final: float = 1e-5
    logit_lr_mult: float = 5.0
    logit_prior: float = 1.0
    # evaluation
    n_eval: int = 2000
    n_gerror: int = 256
    # run
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.dataset not in ("gaussian-ring", "swiss-roll"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        for name in ("n_data", "n_groups", "calib_size", "round_size", "batch_size", "n_eval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        for name in ("weight_bits", "act_bits"):
            bits = getattr(self, name)
            if bits != math.inf and (bits < 2 or int(bits) != bits):
                raise ConfigError(f"{name} must be an integer >= 2")
        if self.calib_size < self.round_size:
            raise ConfigError("calib_size must hold at least one round")
        if self.lam < 0 or self.eta < 0:
            raise ConfigError("lam and eta must be non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def model_dict(self) -> dict:
        """Settings that determine results; the output location is left out."""
        d = self.to_dict()
        del d["out_dir"]
        return d

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        fields = {f.name for f in dataclasses.fields(cls)}
        flat = {}
        for key, value in raw.items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    if isinstance(v, dict):
                        raise ConfigError(f"table [{key}.{sub}] nests too deeply")
                    flat[sub] = v
            else:
                flat[key] = value
        unknown = sorted(set(flat) - fields)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**flat)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a TOML config, or the JSON config echo written next to earlier run outputs."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        if path.suffix == ".json":
            raw = json.loads(path.read_text())
            raw = raw.get("config", raw)
        else:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)
