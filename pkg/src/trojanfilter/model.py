"""A small GPT-2 style decoder with named hook points.

Every block exposes six activation sites (see :class:`HookPoint`). An
:class:`Intervention` at a site rewrites the activation at every position
independently; captured activations are read after any intervention.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import load_file, save_file

from .hooks import HookPoint, Intervention, Location
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int | None = None
    max_seq_len: int = 128
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_mlp is None:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_mlp", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def hook_width(self, hook: HookPoint) -> int:
        return HookPoint(hook).width(self.d_model, self.d_mlp)

    def locations(self) -> list[Location]:
        return [Location(layer, hook) for layer in range(self.n_layers) for hook in HookPoint]


@dataclass(frozen=True)
class GenerationConfig:
    """Sampling settings. ``max_length`` counts prompt tokens too."""

    max_length: int = 512
    do_sample: bool = True
    top_k: int = 30
    top_p: float = 0.9
    temperature: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.top_k < 0:
            raise ValueError(f"top_k must be nonnegative, got {self.top_k}")
        if self.max_length <= 0:
            raise ValueError(f"max_length must be positive, got {self.max_length}")


@dataclass(frozen=True)
class OptimizerConfig:
    """Defaults are the filter-training recipe: SGD, lr 0.001, momentum 0.8, one epoch.

    ``algorithm="adam"`` ignores ``momentum``; ``grad_clip`` (global norm) is
    off when ``None``.
    """

    learning_rate: float = 0.001
    momentum: float = 0.8
    epochs: int = 1
    batch_size: int = 8
    algorithm: str = "sgd"
    grad_clip: float | None = None

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"algorithm must be 'sgd' or 'adam', got {self.algorithm!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.attn_out = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp_in = nn.Linear(cfg.d_model, cfg.d_mlp)
        self.mlp_out = nn.Linear(cfg.d_mlp, cfg.d_model)

    def forward(self, x, hook):
        cfg = self.cfg
        B, T, _ = x.shape
        x = hook(HookPoint.RESID_PRE, x)
        q, k, v = self.qkv(self.ln1(x)).split(cfg.d_model, dim=-1)
        q, k, v = (t.view(B, T, cfg.n_heads, cfg.d_head).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(cfg.d_head)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        z = (scores.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, T, cfg.d_model)
        z = hook(HookPoint.ATTN_Z, z)
        resid_mid = x + self.attn_out(z)
        pre = hook(HookPoint.MLP_PRE, self.mlp_in(self.ln2(resid_mid)))
        post = hook(HookPoint.MLP_POST, F.gelu(pre, approximate="tanh"))
        out = hook(HookPoint.MLP_OUT, self.mlp_out(post))
        return hook(HookPoint.RESID_POST, resid_mid + out)


class TinyTransformer(nn.Module):
    """Pre-LayerNorm decoder with learned absolute positions and an untied unembedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_embed = nn.Embedding(cfg.max_seq_len, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_final = nn.LayerNorm(cfg.d_model)
        self.unembed = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Scaled-normal weights (std ``init_std``), zero biases, unit LayerNorm gains."""
        g = torch.Generator().manual_seed(self.cfg.seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=g) * self.cfg.init_std)

    def forward(
        self,
        tokens: torch.Tensor,
        interventions: Sequence[Intervention] = (),
        capture: Iterable[Location] = (),
    ) -> tuple[torch.Tensor, dict[Location, torch.Tensor]]:
        """Return ``(logits, captured)`` for ``tokens`` shaped ``[T]`` or ``[B, T]``."""
        cfg = self.cfg
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        T = tokens.shape[1]
        if T > cfg.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
        by_loc = _index_interventions(cfg, interventions)
        wanted = set(capture)
        for loc in wanted:
            _check_location(cfg, loc)
        captured: dict[Location, torch.Tensor] = {}

        x = self.embed(tokens) + self.pos_embed(torch.arange(T))
        for layer, block in enumerate(self.blocks):

            def hook(point, act, layer=layer):
                loc = Location(layer, point)
                iv = by_loc.get(loc)
                if iv is not None:
                    act = iv.apply(act)
                if loc in wanted:
                    captured[loc] = act[0] if squeeze else act
                return act

            x = block(x, hook)
        logits = self.unembed(self.ln_final(x))
        return (logits[0] if squeeze else logits), captured


def _check_location(cfg: ModelConfig, loc: Location) -> None:
    if not 0 <= loc.layer < cfg.n_layers:
        raise ValueError(f"layer {loc.layer} out of range for a {cfg.n_layers}-layer model")


def _index_interventions(cfg: ModelConfig, interventions: Sequence[Intervention]) -> dict[Location, Intervention]:
    by_loc: dict[Location, Intervention] = {}
    for iv in interventions:
        _check_location(cfg, iv.location)
        if iv.location in by_loc:
            raise ValueError(f"more than one intervention at {iv.location}")
        iv.check_width(cfg.hook_width(iv.location.hook))
        by_loc[iv.location] = iv
    return by_loc


def forward(model, tokens, interventions=(), capture=()):
    return model(tokens, interventions, capture)


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    """Right-pad token sequences into a ``[B, T]`` tensor."""
    width = max(len(s) for s in sequences)
    out = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def next_token_loss(
    model: TinyTransformer,
    batch: torch.Tensor | Sequence[Sequence[int]],
    interventions: Sequence[Intervention] = (),
    pad_id: int | None = None,
) -> torch.Tensor:
    """Mean cross-entropy of token t+1 given tokens <= t over non-padding targets."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if not isinstance(batch, torch.Tensor):
        if any(len(s) < 2 for s in batch):
            raise ValueError("every sequence needs at least 2 tokens")
        batch = pad_batch(batch, -1 if pad_id is None else pad_id)
        if pad_id is None:
            pad_id = -1
    if batch.shape[-1] < 2:
        raise ValueError("every sequence needs at least 2 tokens")
    inputs = batch[:, :-1].clamp(min=0)
    targets = batch[:, 1:]
    logits, _ = model(inputs, interventions)
    ignore = -100 if pad_id is None else pad_id
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=ignore
    )


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def make_optimizer(parameters, opt: OptimizerConfig) -> torch.optim.Optimizer:
    if opt.algorithm == "adam":
        return torch.optim.Adam(parameters, lr=opt.learning_rate)
    return torch.optim.SGD(parameters, lr=opt.learning_rate, momentum=opt.momentum)


def fit_parameters(
    model: nn.Module,
    parameters: list[torch.nn.Parameter],
    dataset: Sequence[Sequence[int]],
    opt: OptimizerConfig,
    rng_seed: int,
    pad_id: int,
    interventions_fn=lambda: (),
    log_every: int = 0,
) -> list[float]:
    """Minimize next-token loss over ``parameters`` only. Returns per-step losses."""
    optimizer = make_optimizer(parameters, opt)
    rng = np.random.default_rng(rng_seed)
    losses: list[float] = []
    step = 0
    for epoch in range(opt.epochs):
        for idx in iterate_batches(len(dataset), opt.batch_size, rng):
            batch = pad_batch([dataset[i] for i in idx], pad_id)
            loss = next_token_loss(model, batch, interventions_fn(), pad_id=pad_id)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if opt.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(parameters, opt.grad_clip)
            optimizer.step()
            losses.append(value)
            if log_every and step % log_every == 0:
                logger.info("epoch %d step %d loss %.4f", epoch, step, value)
            step += 1
    return losses


def train_base(
    config: ModelConfig,
    dataset: Sequence[Sequence[int]],
    opt: OptimizerConfig,
    rng_seed: int,
    pad_id: int,
    log_every: int = 0,
) -> tuple[TinyTransformer, list[float]]:
    """Train a fresh model on ``dataset`` and return it (in eval mode) with its loss curve."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(rng_seed)
    model = TinyTransformer(config)
    losses = fit_parameters(model, list(model.parameters()), dataset, opt, rng_seed, pad_id, log_every=log_every)
    return freeze(model), losses


def freeze(model: TinyTransformer) -> TinyTransformer:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- sampling ---------------------------------------------------------------

def filter_probabilities(logits: np.ndarray, gen: GenerationConfig) -> np.ndarray:
    """Next-token distribution after temperature, top-k, then top-p truncation."""
    logits = np.asarray(logits, dtype=np.float64) / gen.temperature
    order = np.argsort(-logits, kind="stable")
    if gen.top_k:
        order = order[: gen.top_k]
    kept = logits[order]
    p = np.exp(kept - kept.max())
    p /= p.sum()
    # Keep the smallest prefix whose mass reaches top_p.
    before = np.concatenate(([0.0], np.cumsum(p)[:-1]))
    keep = before < gen.top_p
    p = p[keep]
    p /= p.sum()
    probs = np.zeros_like(logits)
    probs[order[keep]] = p
    return probs


def sample_next(logits: np.ndarray, gen: GenerationConfig, rng: np.random.Generator) -> int:
    if not gen.do_sample:
        return int(np.argmax(logits))
    probs = filter_probabilities(logits, gen)
    u = rng.random()
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


@torch.no_grad()
def generate_ids(
    model: TinyTransformer,
    prompt: Sequence[int],
    gen: GenerationConfig,
    eos_id: int,
    interventions: Sequence[Intervention] = (),
) -> list[int]:
    """Sample a continuation of ``prompt``; returns new ids without the prompt or EOS."""
    if len(prompt) == 0:
        raise ValueError("prompt must be nonempty")
    rng = np.random.default_rng(gen.seed)
    limit = min(gen.max_length, model.cfg.max_seq_len)
    tokens = list(prompt)
    new: list[int] = []
    while len(tokens) < limit:
        logits, _ = model(torch.tensor(tokens), interventions)
        nxt = sample_next(logits[-1].double().numpy(), gen, rng)
        if nxt == eos_id:
            break
        tokens.append(nxt)
        new.append(nxt)
    return new


def generate(
    model: TinyTransformer,
    vocab: Vocabulary,
    prompt: Sequence[int],
    gen: GenerationConfig,
    interventions: Sequence[Intervention] = (),
) -> str:
    if not prompt or prompt[0] != vocab.bos_id:
        raise ValueError("prompt must begin with BOS")
    return vocab.detokenize(generate_ids(model, prompt, gen, vocab.eos_id, interventions))


# -- checkpoints ------------------------------------------------------------

def save_model(path: str | Path, model: TinyTransformer, vocab: Vocabulary | None = None,
               extra: Mapping[str, str] | None = None) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "model",
        "config": json.dumps(asdict(model.cfg), sort_keys=True),
    }
    if vocab is not None:
        meta["vocab"] = vocab.to_json()
    meta.update(extra or {})
    write_checkpoint(path, model.state_dict(), meta)


METADATA_KEY = "trojanfilter"


def write_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: Mapping[str, str]) -> None:
    """safetensors file whose metadata is one sorted JSON string.

    safetensors stores metadata in a hash map, so several keys would land in
    varying order and identical checkpoints would differ byte-wise.
    """
    payload = {METADATA_KEY: json.dumps(dict(meta), sort_keys=True)}
    save_file({k: v.detach().contiguous() for k, v in tensors.items()}, str(path), metadata=payload)


def read_metadata(path: str | Path) -> dict[str, str]:
    with safe_open(str(path), framework="pt") as f:
        raw = f.metadata() or {}
    return json.loads(raw[METADATA_KEY]) if METADATA_KEY in raw else dict(raw)


def load_model(path: str | Path) -> tuple[TinyTransformer, Vocabulary | None, dict[str, str]]:
    meta = read_metadata(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path} is not a model checkpoint")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    cfg = ModelConfig(**json.loads(meta["config"]))
    model = TinyTransformer(cfg)
    state = load_file(str(path))
    for name, p in model.state_dict().items():
        if state[name].shape != p.shape:
            raise ValueError(f"tensor {name} has shape {tuple(state[name].shape)}, expected {tuple(p.shape)}")
    model.load_state_dict(state)
    vocab = Vocabulary.from_json(meta["vocab"]) if "vocab" in meta else None
    return freeze(model), vocab, meta
