"""scikit-learn style wrappers so models and filters compose with sklearn tooling.

``X`` is always a list of token-id sequences (``[BOS, ..., EOS]``, trojan
samples keep their EOS padding).
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .filters import FilterParams, FilterSpec, filter_loss, init_filter, train_filter
from .hooks import Action, HookPoint, Intervention, Location
from .model import (
    GenerationConfig,
    ModelConfig,
    OptimizerConfig,
    TinyTransformer,
    generate,
    next_token_loss,
    pad_batch,
    train_base,
)
from .vocab import Vocabulary


def check_sequences(X, max_len: Optional[int] = None, vocab_size: Optional[int] = None) -> list[list[int]]:
    """Validate a batch of token sequences and return it as lists of ints."""
    if X is None or len(X) == 0:
        raise ValueError("expected a nonempty list of token sequences")
    out = []
    for i, seq in enumerate(X):
        seq = [int(t) for t in seq]
        if len(seq) < 2:
            raise ValueError(f"sequence {i} has {len(seq)} tokens; at least 2 are needed")
        if max_len is not None and len(seq) > max_len:
            raise ValueError(f"sequence {i} has {len(seq)} tokens; max_seq_len is {max_len}")
        if vocab_size is not None and (min(seq) < 0 or max(seq) >= vocab_size):
            raise ValueError(f"sequence {i} has token ids outside [0, {vocab_size})")
        out.append(seq)
    return out


def check_activations(x, width: int) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float32)
    if x.shape[-1] != width:
        raise ValueError(f"activations have width {x.shape[-1]}; expected {width}")
    return x


class TrojanLM(BaseEstimator):
    """Decoder-only language model trained from scratch on (possibly poisoned) token data."""

    def __init__(self, vocab: Optional[Vocabulary] = None, n_layers=4, d_model=64, n_heads=4, d_mlp=None,
                 max_seq_len=128, learning_rate=0.003, momentum=0.8, epochs=1, batch_size=4,
                 algorithm="adam", grad_clip=1.0, random_state=0):
        self.vocab = vocab
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_mlp = d_mlp
        self.max_seq_len = max_seq_len
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.algorithm = algorithm
        self.grad_clip = grad_clip
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=len(self.vocab), n_layers=self.n_layers, d_model=self.d_model,
                           n_heads=self.n_heads, d_mlp=self.d_mlp, max_seq_len=self.max_seq_len,
                           seed=self.random_state)

    def _optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.momentum, self.epochs, self.batch_size,
                               self.algorithm, self.grad_clip)

    def fit(self, X, y=None):
        if self.vocab is None:
            raise ValueError("TrojanLM needs a vocabulary")
        X = check_sequences(X, self.max_seq_len, len(self.vocab))
        self.model_, self.loss_curve_ = train_base(
            self._model_config(), X, self._optimizer(), self.random_state, self.vocab.pad_id
        )
        return self

    def loss(self, X, interventions: Sequence[Intervention] = ()) -> float:
        check_is_fitted(self, "model_")
        X = check_sequences(X, self.max_seq_len, len(self.vocab))
        with torch.no_grad():
            return next_token_loss(self.model_, pad_batch(X, self.vocab.pad_id), interventions,
                                   pad_id=self.vocab.pad_id).item()

    def score(self, X, y=None) -> float:
        """Negative mean next-token cross-entropy (higher is better)."""
        return -self.loss(X)

    def generate(self, prompt: str | Sequence[int], gen: GenerationConfig = GenerationConfig(),
                 interventions: Sequence[Intervention] = ()) -> str:
        """Continue ``prompt`` (text gets BOS prepended)."""
        check_is_fitted(self, "model_")
        ids = [self.vocab.bos_id] + self.vocab.tokenize(prompt) if isinstance(prompt, str) else list(prompt)
        return generate(self.model_, self.vocab, ids, gen, interventions)


class LowRankActivationFilter(TransformerMixin, BaseEstimator):
    """Serial low-rank filter at one hook of a frozen :class:`TinyTransformer`.

    ``fit`` trains only the filter on clean token data; ``transform`` maps
    activations of the hook's width through it.
    """

    def __init__(self, model: Optional[TinyTransformer] = None, layer=-1, hook="resid_post", rank=32,
                 learning_rate=0.001, momentum=0.8, epochs=1, batch_size=8, pad_id=2, random_state=0):
        self.model = model
        self.layer = layer
        self.hook = hook
        self.rank = rank
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.pad_id = pad_id
        self.random_state = random_state

    @property
    def location(self) -> Location:
        layer = self.layer if self.layer >= 0 else self.model.cfg.n_layers + self.layer
        return Location(layer, HookPoint(self.hook))

    @property
    def width(self) -> int:
        return self.model.cfg.hook_width(HookPoint(self.hook))

    def fit(self, X, y=None):
        if self.model is None:
            raise ValueError("LowRankActivationFilter needs a frozen base model")
        X = check_sequences(X, self.model.cfg.max_seq_len, self.model.cfg.vocab_size)
        opt = OptimizerConfig(self.learning_rate, self.momentum, self.epochs, self.batch_size)
        self.params_, self.loss_curve_ = train_filter(
            self.model, FilterSpec(self.location, self.rank), X, opt, self.random_state, self.pad_id
        )
        return self

    def init_params(self) -> FilterParams:
        return init_filter(FilterSpec(self.location, self.rank), self.width, self.random_state)

    def transform(self, X):
        check_is_fitted(self, "params_")
        x = check_activations(X, self.width)
        with torch.no_grad():
            out = self.params_.apply(x)
        return out.numpy() if not isinstance(X, torch.Tensor) else out

    def as_intervention(self) -> Intervention:
        check_is_fitted(self, "params_")
        return Intervention(self.location, Action.FILTER, filter=self.params_)

    def score(self, X, y=None) -> float:
        """Negative clean next-token loss with the filter in place."""
        check_is_fitted(self, "params_")
        X = check_sequences(X, self.model.cfg.max_seq_len, self.model.cfg.vocab_size)
        with torch.no_grad():
            return -filter_loss(self.model, self.params_, pad_batch(X, self.pad_id), self.pad_id).item()
