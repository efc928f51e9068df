"""Experiment configuration: JSON parsing, defaults and validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .privacy import LDP_TARGETS, LDPConfig
from .runtime import AGGREGATION_MODES, RunConfig
from .preprocess import SAMPLING_STRATEGIES

PARTITION_MODES = ("nonoverlapping", "overlapping", "regions", "file")
DATASET_KINDS = ("csv", "sbm", "regime_sbm")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _default_dataset() -> dict:
    return {"kind": "regime_sbm"}


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=_default_dataset)
    partition: str = "nonoverlapping"
    num_clients: int = 5
    partition_file: str | None = None
    samples_per_part: int = 5
    sample_frac: float = 0.5
    split: list = field(default_factory=lambda: [0.2, 0.4, 0.4])
    rounds: int = 100
    local_epochs: int = 1
    lr: float = 0.001
    weight_decay: float = 5e-4
    batch_size: int = 64
    tau: float = 5.0
    gamma: float = 0.9
    nu: float = 0.15
    pe_dim: int = 8
    n_s: int = 16
    n_g: int = 10
    hidden: int = 128
    heads: int = 4
    layers: int = 2
    sampler: str = "ppr"
    aggregation: str = "fedgt"
    ldp_delta: float = 0.002
    ldp_lambda: float = 0.001
    ldp_target: str = "global_nodes_only"
    seed: int = 0
    eval_seed: int = 12345
    out_dir: str = "runs/default"
    dump_similarity: bool = False

    def validate(self) -> "ExperimentConfig":
        def positive(name, allow_zero=False):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(name, f"must be an integer, got {v!r}")
            if v < 0 or (v == 0 and not allow_zero):
                raise ConfigError(name, "must be >= 0" if allow_zero else "must be > 0")

        for name in ("num_clients", "samples_per_part", "rounds", "batch_size", "hidden", "heads", "layers"):
            positive(name)
        for name in ("local_epochs", "pe_dim", "n_s", "n_g"):
            positive(name, allow_zero=True)
        if self.hidden % self.heads:
            raise ConfigError("hidden", f"must be divisible by heads ({self.hidden} % {self.heads} != 0)")
        if not 0.0 < self.nu <= 1.0:
            raise ConfigError("nu", "must lie in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma", "must lie in [0, 1]")
        if not 0.0 < self.sample_frac <= 1.0:
            raise ConfigError("sample_frac", "must lie in (0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.ldp_delta <= 0:
            raise ConfigError("ldp_delta", "must be > 0")
        if self.ldp_lambda < 0:
            raise ConfigError("ldp_lambda", "must be >= 0")
        if len(self.split) != 3 or min(self.split) < 0 or sum(self.split) > 1 + 1e-12:
            raise ConfigError("split", "must be three nonnegative ratios summing to <= 1")
        for name, allowed in (("partition", PARTITION_MODES), ("aggregation", AGGREGATION_MODES),
                              ("ldp_target", LDP_TARGETS), ("sampler", SAMPLING_STRATEGIES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"must be one of {allowed}, got {getattr(self, name)!r}")
        kind = self.dataset.get("kind")
        if kind not in DATASET_KINDS:
            raise ConfigError("dataset.kind", f"must be one of {DATASET_KINDS}, got {kind!r}")
        if kind == "csv" and not {"nodes", "edges"} <= set(self.dataset):
            raise ConfigError("dataset", "csv datasets need 'nodes' and 'edges' paths")
        if self.partition == "file" and not self.partition_file:
            raise ConfigError("partition_file", "required when partition is 'file'")
        if self.partition == "regions" and kind != "regime_sbm":
            raise ConfigError("partition", "'regions' is only available for regime_sbm datasets")
        if self.partition == "overlapping" and self.num_clients % self.samples_per_part:
            raise ConfigError("num_clients", "must be a multiple of samples_per_part when overlapping")
        return self

    def run_config(self) -> RunConfig:
        return RunConfig(
            rounds=self.rounds, local_epochs=self.local_epochs, lr=self.lr, weight_decay=self.weight_decay,
            batch_size=self.batch_size, tau=self.tau, gamma=self.gamma, nu=self.nu, pe_dim=self.pe_dim,
            n_s=self.n_s, n_g=self.n_g, hidden=self.hidden, heads=self.heads, layers=self.layers,
            sampler=self.sampler, split=tuple(self.split),
            ldp=LDPConfig(self.ldp_delta, self.ldp_lambda, self.ldp_target),
            aggregation=self.aggregation, seed=self.seed, eval_seed=self.eval_seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    cfg = ExperimentConfig(**data)
    cfg.split = list(cfg.split)
    return cfg.validate()


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)
