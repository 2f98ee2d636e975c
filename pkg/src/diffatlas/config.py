"""Experiment configuration: strict JSON loading, validation, hashing."""

import hashlib
import json
from dataclasses import asdict, dataclass, fields

PARADIGMS = ("icf", "icmd", "rba", "diffatlas")
SETTINGS = ("full", "few2", "few4", "zeroshot-AtoB", "zeroshot-BtoA")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    paradigm: str = "diffatlas"
    setting: str = "full"
    seeds: tuple = (0,)
    resolution: int = 32
    num_classes: int = 3
    timesteps: int = 100
    beta_start: float = 0.001
    beta_end: float = 0.2
    train_steps: int = 6000
    batch_size: int = 8
    lr: float = 1e-3
    d_max: float = 8.0
    tau: float = 1.0
    n_train: int = 200
    n_test: int = 50
    train_seed_base: int = 0
    test_seed_base: int = 1000
    base_width: int = 16
    time_embed_dim: int = 32
    atlas_bank_size: int = 8
    ensemble_n: int = 1
    augment_flip: bool = False
    register_lambda: float = 0.01
    register_iters: int = 300
    register_lr: float = 0.01
    data_dir: str = "data"
    run_dir: str = "runs"

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.resolution < 16 or self.resolution % 4 != 0:
            raise ConfigError(f"resolution must be >= 16 and divisible by 4, got {self.resolution}")
        if not 3 <= self.num_classes <= 5:
            raise ConfigError(f"num_classes must be in 3..5, got {self.num_classes}")
        if self.timesteps < 2:
            raise ConfigError(f"timesteps must be >= 2, got {self.timesteps}")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start < beta_end < 1")
        for name in ("train_steps", "batch_size", "n_train", "n_test", "base_width",
                     "atlas_bank_size", "ensemble_n", "register_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0 or self.register_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.d_max <= 0:
            raise ConfigError("d_max must be positive")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if self.register_lambda < 0:
            raise ConfigError("register_lambda must be >= 0")
        if self.time_embed_dim % 2 or self.time_embed_dim < 2:
            raise ConfigError("time_embed_dim must be even and >= 2")

    # ---- derived routing -------------------------------------------------

    @property
    def train_domain(self) -> str:
        return "B" if self.setting == "zeroshot-BtoA" else "A"

    @property
    def test_domain(self) -> str:
        if self.setting == "zeroshot-AtoB":
            return "B"
        if self.setting == "zeroshot-BtoA":
            return "A"
        return self.train_domain

    @property
    def effective_n_train(self) -> int:
        if self.setting == "few2":
            return 2
        if self.setting == "few4":
            return 4
        return self.n_train

    # ---- persistence -----------------------------------------------------

    def canonical_json(self) -> str:
        d = asdict(self)
        d["seeds"] = list(d["seeds"])
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash_bytes(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("ascii")).digest()

    def hash_hex(self) -> str:
        return self.hash_bytes().hex()


_FIELD_NAMES = {f.name for f in fields(ExperimentConfig)}


def config_from_dict(d: dict) -> ExperimentConfig:
    unknown = set(d) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return config_from_dict(raw)
