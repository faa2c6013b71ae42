"""Smooth activation-count surrogate and the penalty built from it.

The surrogate replaces the non-differentiable count of nonzero entries with
``sum_j x_j^2 / (x_j^2 + sigma)``; smaller ``sigma`` tracks the exact count
more closely at the cost of sharper gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, record
from .errors import ConfigError
from .model import ActivationRecord

NORMALIZATIONS = ("parameter_count", "activation_count", "none")


@dataclass(frozen=True)
class PenaltyConfig:
    """sigma: surrogate sharpness. lam: penalty weight. sign: +1 discourages
    firing neurons (energy-aware), -1 encourages them (sponge).

    ``layer_kinds`` restricts which layer outputs are penalized (None = all
    kinds); the final logits layer is excluded unless ``include_logits``.
    """

    sigma: float = 1e-4
    lam: float = 1.0
    sign: int = 1
    normalize_by: str = "parameter_count"
    layer_kinds: Optional[tuple] = None
    include_logits: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.sign not in (1, -1):
            raise ConfigError(f"sign must be +1 or -1, got {self.sign}")
        if self.normalize_by not in NORMALIZATIONS:
            raise ConfigError(f"normalize_by must be one of {NORMALIZATIONS}")
        if self.layer_kinds is not None:
            object.__setattr__(self, "layer_kinds", tuple(self.layer_kinds))

    def selects(self, index: int, kind: str, num_layers: int) -> bool:
        if index == num_layers - 1 and not self.include_logits:
            return False
        return self.layer_kinds is None or kind in self.layer_kinds

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "lambda": self.lam,
            "sign": self.sign,
            "normalize_by": self.normalize_by,
            "layer_kinds": list(self.layer_kinds) if self.layer_kinds is not None else None,
            "include_logits": self.include_logits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        known = {"sigma", "lambda", "sign", "normalize_by", "layer_kinds", "include_logits"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown penalty keys: {sorted(unknown)}")
        kinds = d.get("layer_kinds")
        return cls(
            sigma=float(d.get("sigma", 1e-4)),
            lam=float(d.get("lambda", 1.0)),
            sign=int(d.get("sign", 1)),
            normalize_by=d.get("normalize_by", "parameter_count"),
            layer_kinds=tuple(kinds) if kinds is not None else None,
            include_logits=bool(d.get("include_logits", False)),
        )


def _check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")


def l0_approx(x, sigma: float) -> Tensor:
    """Differentiable surrogate for the number of nonzero entries of ``x``."""
    _check_sigma(sigma)
    x = x if isinstance(x, Tensor) else Tensor(x)
    xd = x.data
    sq = xd * xd
    value = np.sum(sq / (sq + sigma))

    def _bw(g):
        return (g * (2.0 * sigma * xd / (sq + sigma) ** 2),)

    return record(np.asarray(value, dtype=xd.dtype), (x,), _bw, "l0_approx")


def l0_approx_grad(x, sigma: float) -> np.ndarray:
    """Analytic elementwise derivative ``2 sigma x / (x^2 + sigma)^2``."""
    _check_sigma(sigma)
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return 2.0 * sigma * xd / (xd * xd + sigma) ** 2


def exact_l0(x, tau: float = 0.0) -> int:
    """Number of entries with ``|x| > tau``."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    return int(np.count_nonzero(np.abs(xd) > tau))


def selected_layers(record: ActivationRecord, cfg: PenaltyConfig) -> list[int]:
    n = len(record)
    return [e.layer_index for e in record if cfg.selects(e.layer_index, e.layer_kind, n)]


def sparsity_penalty(record: ActivationRecord, cfg: PenaltyConfig, m: int) -> Tensor:
    """Batch-mean surrogate count summed over the selected layers, normalized.

    With the default ``normalize_by="parameter_count"`` the sum is divided by
    ``m``; ``"activation_count"`` divides by the selected per-sample activation
    count instead.
    """
    if m <= 0:
        raise ValueError("parameter count m must be positive")
    if len(record) == 0:
        raise ValueError("activation record is empty")
    chosen = selected_layers(record, cfg)
    if not chosen:
        raise ValueError("layer filter selects no layer")
    total = None
    for i in chosen:
        term = l0_approx(record[i].activation, cfg.sigma)
        total = term if total is None else total + term
    batch = record.batch_size
    if cfg.normalize_by == "parameter_count":
        denom = float(m)
    elif cfg.normalize_by == "activation_count":
        denom = float(sum(record[i].activation.size for i in chosen) // batch)
    else:
        denom = 1.0
    return total * (1.0 / (batch * denom))

