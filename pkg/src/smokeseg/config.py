"""Run configuration: defaults, legal ranges, and the `key = value` file format."""

import dataclasses


MODES = ("full", "feature_router", "band_split", "common_only")
PROTO_UPDATES = ("momentum", "gradient")


@dataclasses.dataclass
class RunConfig:
    # optimization
    lr: float = 6e-5
    batch: int = 4
    weight_decay: float = 0.01
    iterations: int = 40000
    # loss mix
    lam: float = 0.01
    # prototypes
    K: int = 3
    tau: float = 0.1
    mu: float = 0.999
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    proto_update: str = "momentum"
    # feature geometry
    D: int = 250
    groups: int = 25
    # ablation switch (common_only / band_split / feature_router / full)
    mode: str = "full"
    # data and bookkeeping
    data_dir: str = ""
    seed: int = 0
    scale_t1: float = 0.01
    scale_t2: float = 0.10

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.mu < 1.0:
            raise ConfigError(f"mu must be in [0, 1), got {self.mu}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.sinkhorn_iters < 1:
            raise ConfigError(f"sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")
        if self.proto_update not in PROTO_UPDATES:
            raise ConfigError(f"proto_update must be one of {PROTO_UPDATES}, got {self.proto_update!r}")
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        if self.D < 1 or self.D % self.groups != 0:
            raise ConfigError(f"D must be a positive multiple of groups, got D={self.D}, groups={self.groups}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.scale_t1 < self.scale_t2 < 1.0:
            raise ConfigError(
                f"scale thresholds must satisfy 0 < t1 < t2 < 1, got {self.scale_t1}, {self.scale_t2}"
            )
        return self


class ConfigError(ValueError):
    pass


# config-file key -> (attribute, parser)
_KEYS = {
    "lr": ("lr", float),
    "batch": ("batch", int),
    "weight_decay": ("weight_decay", float),
    "iterations": ("iterations", int),
    "lambda": ("lam", float),
    "K": ("K", int),
    "tau": ("tau", float),
    "mu": ("mu", float),
    "epsilon": ("epsilon", float),
    "sinkhorn_iters": ("sinkhorn_iters", int),
    "proto_update": ("proto_update", str),
    "D": ("D", int),
    "groups": ("groups", int),
    "mode": ("mode", str),
    "data_dir": ("data_dir", str),
    "seed": ("seed", int),
    "scale_t1": ("scale_t1", float),
    "scale_t2": ("scale_t2", float),
}


def parse_config(path):
    """Read a `key = value` config file; omitted keys keep their defaults."""
    cfg = RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            attr, parse = _KEYS[key]
            try:
                setattr(cfg, attr, parse(value))
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    cfg.validate()
    return cfg
