"""Clamp-and-Laplace local differential privacy for client uploads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_random_state

LDP_TARGETS = ("global_nodes_only", "global_nodes_and_updates", "off")


@dataclass(frozen=True)
class LDPConfig:
    delta: float = 0.002
    lam: float = 0.001
    target: str = "global_nodes_only"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"clip threshold delta must be > 0, got {self.delta}")
        if self.lam < 0:
            raise ValueError(f"Laplace scale must be >= 0, got {self.lam}")
        if self.target not in LDP_TARGETS:
            raise ValueError(f"unknown LDP target {self.target!r}; expected one of {LDP_TARGETS}")

    @property
    def protects_global_nodes(self) -> bool:
        return self.target != "off"

    @property
    def protects_updates(self) -> bool:
        return self.target == "global_nodes_and_updates"


def ldp_apply(v, cfg: LDPConfig, seed=None) -> np.ndarray:
    """Clamp every coordinate to ``[-delta, delta]`` then add Laplace(0, lam) noise."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("LDP input must be finite")
    out = np.clip(v, -cfg.delta, cfg.delta)
    if cfg.lam > 0:
        out = out + check_random_state(seed).laplace(0.0, cfg.lam, size=v.shape)
    return out


def privacy_budget(delta: float, lam: float) -> float:
    """Per-upload budget ``2 * delta / lam``."""
    if lam <= 0:
        raise ValueError("lam = 0 gives no privacy protection (unbounded budget)")
    return 2.0 * delta / lam
