"""Pieces shared by the GCA estimator and the EBM baseline."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._rng import stream
from .autodiff import AdamState, MlpSpec, NonFiniteError, adam_step, mlp_apply, value_and_grad

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    minibatch_size: int = 100
    iterations: int = 100_000
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.minibatch_size < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError(f"invalid training config {self}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def encoder_spec(d_x: int, d_s: int, hidden_width: int = 50, n_hidden_layers: int = 4) -> MlpSpec:
    """ReLU encoder; the default is five layers with 50 hidden units each."""
    return MlpSpec((d_x,) + (hidden_width,) * n_hidden_layers + (d_s,), "relu")


# ---------------------------------------------------------------- pairs


def n_pairs(n: int) -> int:
    return n * (n - 1) // 2


def unrank_pairs(k, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices into the lexicographic list of pairs i < j."""
    k = np.asarray(k, dtype=np.int64)
    b = 2 * n - 1
    i = np.floor((b - np.sqrt(float(b) ** 2 - 8.0 * k)) / 2.0).astype(np.int64)
    # repair float rounding of the square root
    start = i * n - i * (i + 1) // 2
    i = np.where(start > k, i - 1, i)
    nxt = (i + 1) * n - (i + 1) * (i + 2) // 2
    i = np.where(nxt <= k, i + 1, i)
    start = i * n - i * (i + 1) // 2
    j = k - start + i + 1
    return i, j


def sample_pair_indices(n: int, m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``m`` distinct pairs (i < j) drawn uniformly from all node pairs."""
    total = n_pairs(n)
    if m < 1:
        raise ValueError("batch size must be positive")
    if m > total:
        raise ValueError(f"cannot draw {m} distinct pairs from {total}")
    return unrank_pairs(rng.choice(total, size=m, replace=False), n)


# ---------------------------------------------------------------- estimator base


class DVEstimatorBase(TransformerMixin, BaseEstimator):
    """Minibatch Adam on an empirical Donsker-Varadhan objective.

    Subclasses provide ``_init_params`` and ``_batch_loss``; ``transform``
    returns the learned encoder features ``h(X)``.
    """

    _magic = b"????"

    def _streams(self):
        seed = 0 if self.random_state is None else int(self.random_state)
        return (stream(seed, "model-init"), stream(seed, "batches"), stream(seed, "permutations"))

    def _run(self, X, batch_fn, loss_fn):
        cfg = self._train_config()
        init_rng, batch_rng, perm_rng = self._streams()
        params = self._init_params(X.shape[1], init_rng)
        state = AdamState.zeros(params.size, lr=cfg.lr)
        losses, loss_iters = [], []
        for it in range(cfg.iterations):
            batch = batch_fn(batch_rng, perm_rng)
            try:
                loss, grad = value_and_grad(lambda p: loss_fn(p, batch), params)
                params, state = adam_step(state, params, grad)
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingError(it, exc) from exc
            if it % cfg.eval_every == 0 or it == cfg.iterations - 1:
                losses.append(loss)
                loss_iters.append(it)
                if self.verbose and it % (cfg.eval_every * 10) == 0:
                    logger.info("%s iter %d loss %.6f", type(self).__name__, it, loss)
        self.params_ = params
        self.adam_state_ = state
        self.loss_curve_ = np.asarray(losses)
        self.loss_iterations_ = np.asarray(loss_iters, dtype=np.int64)
        self.n_iter_ = cfg.iterations
        self.n_features_in_ = X.shape[1]
        return self

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.max_iter, self.learning_rate,
                           0 if self.random_state is None else int(self.random_state),
                           self.eval_every)

    @property
    def encoder_spec_(self) -> MlpSpec:
        check_is_fitted(self, "params_")
        return encoder_spec(self.n_features_in_, self.n_components,
                            self.hidden_width, self.n_hidden_layers)

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fitted with {self.n_features_in_}")
        return mlp_apply(self.encoder_spec_, self.params_, X, prefix="enc.")
