"""Hook points, locations and per-position interventions."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional

import numpy as np
import torch


class HookPoint(str, Enum):
    RESID_PRE = "resid_pre"
    ATTN_Z = "attn_z"
    MLP_PRE = "mlp_pre"
    MLP_POST = "mlp_post"
    MLP_OUT = "mlp_out"
    RESID_POST = "resid_post"

    def width(self, d_model: int, d_mlp: int) -> int:
        return d_mlp if self in (HookPoint.MLP_PRE, HookPoint.MLP_POST) else d_model

    @property
    def label(self) -> str:
        """Name used in report tables (``resid pre``, ``z``, ...)."""
        return "z" if self is HookPoint.ATTN_Z else self.value.replace("_", " ")


# Order in which hooks fire inside a block.
HOOK_ORDER = tuple(HookPoint)


@dataclass(frozen=True, order=True)
class Location:
    layer: int
    hook: HookPoint

    def __post_init__(self):
        object.__setattr__(self, "hook", HookPoint(self.hook))
        if self.layer < 0:
            raise ValueError(f"layer must be nonnegative, got {self.layer}")

    def __str__(self) -> str:
        return f"blocks.{self.layer}.{self.hook.value}"

    @classmethod
    def parse(cls, text: str) -> "Location":
        _, layer, hook = text.split(".")
        return cls(int(layer), HookPoint(hook))

    def sort_key(self) -> tuple[int, int]:
        return (self.layer, HOOK_ORDER.index(self.hook))


class Action(str, Enum):
    IDENTITY = "identity"
    FILTER = "filter"
    ZERO = "zero"
    GAUSS_NOISE = "add_gauss_noise"


def gaussian_noise(seed: int, n_positions: int, width: int) -> np.ndarray:
    """Standard-normal noise rows for positions ``0..n_positions-1``.

    numpy fills row-major from one stream, so the first k rows do not depend on
    ``n_positions``: a position gets the same noise at every decoding step.
    """
    return np.random.default_rng(seed).standard_normal((n_positions, width))


@dataclass(frozen=True, eq=False)
class Intervention:
    location: Location
    action: Action = Action.IDENTITY
    filter: Optional[Any] = None
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "action", Action(self.action))
        if self.action is Action.FILTER and self.filter is None:
            raise ValueError(f"filter intervention at {self.location} needs filter parameters")
        if self.action is Action.GAUSS_NOISE and self.seed is None:
            raise ValueError(f"noise intervention at {self.location} needs a seed")

    def check_width(self, width: int) -> None:
        if self.action is Action.FILTER and self.filter.width != width:
            raise ValueError(
                f"filter width {self.filter.width} does not match activation width {width} at {self.location}"
            )

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        """Apply to activations shaped ``[..., positions, width]``."""
        if self.action is Action.IDENTITY:
            return x
        self.check_width(x.shape[-1])
        if self.action is Action.ZERO:
            return torch.zeros_like(x)
        if self.action is Action.FILTER:
            return self.filter.apply(x)
        noise = gaussian_noise(self.seed, x.shape[-2], x.shape[-1])
        return x + torch.as_tensor(noise, dtype=x.dtype)
