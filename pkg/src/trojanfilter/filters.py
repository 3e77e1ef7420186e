"""Serial low-rank activation filters and the ablation controls they are compared against.

A filter sits *in series* at one hook: the activation is replaced by
``w_up @ (w_down @ x + b_down) + b_up`` at every position. It is not a
parallel (additive) adapter, so an all-zero filter drops the activation
exactly like zero ablation.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import torch
from safetensors.torch import load_file

from .hooks import Action, HookPoint, Intervention, Location
from .model import (
    CHECKPOINT_VERSION,
    OptimizerConfig,
    TinyTransformer,
    checksum,
    next_token_loss,
    fit_parameters,
    read_metadata,
    write_checkpoint,
)


@dataclass(frozen=True)
class FilterSpec:
    location: Location
    rank: int

    def __post_init__(self):
        if self.rank <= 0:
            raise ValueError(f"rank must be positive, got {self.rank}")

    def width(self, model_or_cfg) -> int:
        cfg = getattr(model_or_cfg, "cfg", model_or_cfg)
        return cfg.hook_width(self.location.hook)


@dataclass(eq=False)
class FilterParams:
    """``w_down``: rank x width, ``b_down``: rank, ``w_up``: width x rank, ``b_up``: width."""

    location: Location
    w_down: torch.Tensor
    b_down: torch.Tensor
    w_up: torch.Tensor
    b_up: torch.Tensor

    def __post_init__(self):
        r, w = self.w_down.shape
        if self.b_down.shape != (r,) or self.w_up.shape != (w, r) or self.b_up.shape != (w,):
            raise ValueError(
                "inconsistent filter shapes: "
                f"w_down {tuple(self.w_down.shape)}, b_down {tuple(self.b_down.shape)}, "
                f"w_up {tuple(self.w_up.shape)}, b_up {tuple(self.b_up.shape)}"
            )

    @property
    def rank(self) -> int:
        return self.w_down.shape[0]

    @property
    def width(self) -> int:
        return self.w_down.shape[1]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"w_down": self.w_down, "b_down": self.b_down, "w_up": self.w_up, "b_up": self.b_up}

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.width:
            raise ValueError(f"activation width {x.shape[-1]} does not match filter width {self.width} at {self.location}")
        return (x @ self.w_down.T + self.b_down) @ self.w_up.T + self.b_up

    def clone(self, requires_grad: bool = False, dtype=None) -> "FilterParams":
        t = {k: v.detach().clone().to(dtype or v.dtype).requires_grad_(requires_grad) for k, v in self.tensors().items()}
        return FilterParams(self.location, **t)

    def is_finite(self) -> bool:
        return all(torch.isfinite(t).all() for t in self.tensors().values())

    def equal(self, other: "FilterParams") -> bool:
        return self.location == other.location and all(
            torch.equal(a, b) for a, b in zip(self.tensors().values(), other.tensors().values())
        )

    @classmethod
    def identity(cls, location: Location, width: int) -> "FilterParams":
        eye = torch.eye(width)
        return cls(location, eye.clone(), torch.zeros(width), eye.clone(), torch.zeros(width))

    @classmethod
    def zeros(cls, location: Location, width: int, rank: int) -> "FilterParams":
        return cls(location, torch.zeros(rank, width), torch.zeros(rank), torch.zeros(width, rank), torch.zeros(width))


def init_filter(spec: FilterSpec, width: int, rng_seed: int, zero_bias: bool = False) -> FilterParams:
    """PyTorch ``nn.Linear`` default init for both projections.

    Weights and biases are uniform on ``±1/sqrt(fan_in)`` (fan-in is the width
    for the down-projection and the rank for the up-projection), which keeps
    the expected activation norm roughly unchanged.
    """
    if spec.rank > width:
        raise ValueError(f"rank {spec.rank} exceeds activation width {width} at {spec.location}")
    g = torch.Generator().manual_seed(rng_seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return (torch.rand(shape, generator=g) * 2 - 1) * bound

    w_down = uniform((spec.rank, width), width)
    b_down = uniform((spec.rank,), width)
    w_up = uniform((width, spec.rank), spec.rank)
    b_up = uniform((width,), spec.rank)
    if zero_bias:
        b_down.zero_()
        b_up.zero_()
    return FilterParams(spec.location, w_down, b_down, w_up, b_up)


def apply_filter(f: FilterParams, x: torch.Tensor) -> torch.Tensor:
    return f.apply(x)


class Control(str, Enum):
    WITHOUT_LORA = "without_lora"
    WITH_LORA = "with_lora"
    ZERO_ABLATE = "zero_ablate"
    RANDN_ABLATE = "randn_ablate"

    @property
    def label(self) -> str:
        return {
            "without_lora": "without lora",
            "with_lora": "with lora",
            "zero_ablate": "zero ablate",
            "randn_ablate": "randn ablate",
        }[self.value]


CONTROLS = tuple(Control)


def control_intervention(
    control: Control, filter: Optional[FilterParams], location: Location, rng_seed: int
) -> Intervention:
    control = Control(control)
    if control is Control.WITHOUT_LORA:
        return Intervention(location, Action.IDENTITY)
    if control is Control.WITH_LORA:
        if filter is None:
            raise ValueError("with_lora control needs a trained filter")
        if filter.location != location:
            raise ValueError(f"filter was trained at {filter.location}, not {location}")
        return Intervention(location, Action.FILTER, filter=filter)
    if control is Control.ZERO_ABLATE:
        return Intervention(location, Action.ZERO)
    return Intervention(location, Action.GAUSS_NOISE, seed=rng_seed)


def train_filter(
    frozen: TinyTransformer,
    spec: FilterSpec,
    clean: Sequence[Sequence[int]],
    opt: OptimizerConfig,
    rng_seed: int,
    pad_id: int,
    init: FilterParams | None = None,
    log_every: int = 0,
) -> tuple[FilterParams, list[float]]:
    """Fit a filter at ``spec.location`` by next-token loss on clean data; the base model stays frozen."""
    width = spec.width(frozen)
    start = init if init is not None else init_filter(spec, width, rng_seed)
    params = start.clone(requires_grad=True)
    before = checksum(frozen)
    grad_flags = [p.requires_grad for p in frozen.parameters()]
    for p in frozen.parameters():
        p.requires_grad_(False)
    try:
        iv = [Intervention(spec.location, Action.FILTER, filter=params)]
        losses = fit_parameters(
            frozen, list(params.tensors().values()), clean, opt, rng_seed, pad_id,
            interventions_fn=lambda: iv, log_every=log_every,
        )
    finally:
        for p, flag in zip(frozen.parameters(), grad_flags):
            p.requires_grad_(flag)
    if checksum(frozen) != before:
        raise RuntimeError("base model parameters changed during filter training")
    return params.clone(), losses


def filter_loss(frozen: TinyTransformer, f: FilterParams, batch, pad_id: int) -> torch.Tensor:
    return next_token_loss(frozen, batch, [Intervention(f.location, Action.FILTER, filter=f)], pad_id=pad_id)


def grad_check(
    frozen: TinyTransformer,
    f: FilterParams,
    batch,
    h: float = 1e-4,
    pad_id: int | None = None,
) -> float:
    """Max relative error between autograd and central-difference gradients of the filter.

    Runs in float64 on a copy of the model. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    model = copy.deepcopy(frozen).double()
    f64 = f.clone(requires_grad=True, dtype=torch.float64)
    loss = filter_loss(model, f64, batch, pad_id)
    loss.backward()
    worst = 0.0
    with torch.no_grad():
        for t in f64.tensors().values():
            flat = t.view(-1)
            analytic = t.grad.view(-1).clone()
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = filter_loss(model, f64, batch, pad_id).item()
                flat[i] = orig - h
                down = filter_loss(model, f64, batch, pad_id).item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = analytic[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


def save_filter(path: str | Path, f: FilterParams, extra: dict | None = None) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "filter",
        "spec": json.dumps({"layer": f.location.layer, "hook": f.location.hook.value, "rank": f.rank}),
    }
    meta.update(extra or {})
    write_checkpoint(path, f.tensors(), meta)


def load_filter(path: str | Path) -> FilterParams:
    meta = read_metadata(path)
    if meta.get("kind") != "filter":
        raise ValueError(f"{path} is not a filter checkpoint")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    spec = json.loads(meta["spec"])
    t = load_file(str(path))
    f = FilterParams(Location(spec["layer"], HookPoint(spec["hook"])), t["w_down"], t["b_down"], t["w_up"], t["b_up"])
    if f.rank != spec["rank"]:
        raise ValueError(f"filter rank {f.rank} does not match declared rank {spec['rank']}")
    return f
