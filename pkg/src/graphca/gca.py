"""Graph component analysis: recover latent components from node features
and discrete link weights with a bilinear log-ratio model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from ._base import (DVEstimatorBase, TrainConfig, TrainingError, encoder_spec,
                    sample_pair_indices)
from ._checkpoint import load_checkpoint, save_checkpoint
from .autodiff import MlpSpec, ParamStore, init_mlp, mlp_apply
from .synthdata import GraphDataset, structured_table

__all__ = [
    "EncoderNetwork", "RatioParams", "GraphComponentAnalysis", "TrainConfig", "TrainingError",
    "ratio_value", "sample_pair_batch", "dv_empirical_objective", "gca_loss", "train_gca",
    "population_dv_objective",
]


@dataclass
class EncoderNetwork:
    spec: MlpSpec
    params: ParamStore  # names prefixed "enc."

    @property
    def d_s(self) -> int:
        return self.spec.d_out

    def __call__(self, x) -> np.ndarray:
        return mlp_apply(self.spec, self.params, np.atleast_2d(x), prefix="enc.")


@dataclass
class RatioParams:
    beta: np.ndarray  # (K, d_s), row k-1 belongs to link state k
    bias: np.ndarray  # (K,)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.beta.ndim != 2 or self.bias.shape != (self.beta.shape[0],):
            raise ValueError(f"beta {self.beta.shape} and bias {self.bias.shape} disagree")

    @property
    def K(self) -> int:
        return self.beta.shape[0]


def _check_state(w, K):
    w = np.asarray(w)
    if np.any(w < 1) or np.any(w > K):
        raise ValueError(f"link state outside 1..{K}: {w}")


def ratio_value(enc: EncoderNetwork, rp: RatioParams, w: int, x, x_other) -> float:
    """sum_i beta[w, i] h_i(x) h_i(x') + b[w]."""
    _check_state(w, rp.K)
    h, h2 = enc(x)[0], enc(x_other)[0]
    return float(np.sum(rp.beta[w - 1] * (h * h2)) + rp.bias[w - 1])


def sample_pair_batch(ds: GraphDataset, m: int, rng: np.random.Generator):
    """Draw ``m`` distinct pairs i < j uniformly and fetch their weights."""
    if m < 2:
        raise ValueError("minibatch needs at least two pairs")
    i, j = sample_pair_indices(ds.n, m, rng)
    return i, j, ds.link_weights(i, j)


def gca_loss(p: dict, spec: MlpSpec, xi, xj, w, w_perm) -> ad.Tensor:
    """Differentiable empirical DV objective on one batch of pairs.

    ``w_perm`` supplies the negatives: the batch's weights reassigned to
    other pairs.
    """
    m = len(w)
    h = ad.mlp_forward(spec, p, ad.const(np.vstack([xi, xj])), prefix="enc.")
    prod = ad.mul(ad.slice_rows(h, 0, m), ad.slice_rows(h, m, 2 * m), name="h_prod")

    def ratio(states, tag):
        idx = np.asarray(states) - 1
        bil = ad.sum_rows(ad.mul(prod, ad.take_rows(p["beta"], idx, name=f"beta_{tag}")),
                          name=f"bilinear_{tag}")
        return ad.add(bil, ad.take_rows(p["bias"], idx, name=f"bias_{tag}"), name=f"r_{tag}")

    r_pos, r_neg = ratio(w, "pos"), ratio(w_perm, "neg")
    return ad.add(ad.scale(ad.mean(r_pos), -1.0), ad.log_mean_exp(r_neg), name="dv_objective")


def dv_empirical_objective(enc: EncoderNetwork, rp: RatioParams, x_i, x_j, w, w_perm) -> float:
    """-mean r(w, x_i, x_j) + log mean exp r(w*, x_i, x_j) for a batch."""
    w, w_perm = np.asarray(w), np.asarray(w_perm)
    _check_state(w, rp.K)
    if sorted(w.tolist()) != sorted(w_perm.tolist()):
        raise ValueError("w_perm must be a permutation of w")
    params = enc.params.merged(ParamStore({"beta": rp.beta, "bias": rp.bias}))
    out = gca_loss(params.leaves(), enc.spec, np.atleast_2d(x_i), np.atleast_2d(x_j), w, w_perm)
    if not np.isfinite(out.value):
        raise ad.NonFiniteError("dv_objective")
    return float(out.value)


def population_dv_objective(r, joint) -> float:
    """DV objective for a finite world given as tables over (w, x, x').

    ``joint[w, a, b]`` is p(w, x_a, x'_b) and ``r`` has the same shape. The
    product measure in the second term is p(w) p(x, x').
    """
    r = np.asarray(r, dtype=np.float64)
    joint = np.asarray(joint, dtype=np.float64)
    if r.shape != joint.shape:
        raise ValueError(f"r {r.shape} and joint {joint.shape} must match")
    p_w = joint.sum(axis=(1, 2))
    p_xx = joint.sum(axis=0)
    product = p_w[:, None, None] * p_xx[None]
    m = r.max()
    return float(-np.sum(joint * r) + m + np.log(np.sum(product * np.exp(r - m))))


class GraphComponentAnalysis(DVEstimatorBase):
    """Estimate latent components of graph nodes from features and links.

    Parameters
    ----------
    n_components : int
        Number of latent components (encoder output width).
    n_link_states : int or None
        Maximum link state K. Inferred from a dense weight matrix if None.
    hidden_width, n_hidden_layers : int
        Encoder shape; defaults give a five-layer ReLU network of width 50.
    batch_size : int
        Pairs per minibatch.
    max_iter : int
        Number of Adam steps.
    learning_rate : float
    eval_every : int
        Record the minibatch objective every this many iterations.
    random_state : int or None
    verbose : int

    Attributes
    ----------
    params_ : ParamStore
        Encoder weights (``enc.*``), ``beta`` and ``bias``.
    loss_curve_ : ndarray
        Recorded minibatch objective values.
    """

    _magic = b"GCAM"

    def __init__(self, n_components=4, *, n_link_states=None, hidden_width=50, n_hidden_layers=4,
                 batch_size=100, max_iter=100_000, learning_rate=1e-4, eval_every=100,
                 random_state=0, verbose=0):
        self.n_components = n_components
        self.n_link_states = n_link_states
        self.hidden_width = hidden_width
        self.n_hidden_layers = n_hidden_layers
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.eval_every = eval_every
        self.random_state = random_state
        self.verbose = verbose

    def _init_params(self, d_x: int, rng: np.random.Generator) -> ParamStore:
        spec = encoder_spec(d_x, self.n_components, self.hidden_width, self.n_hidden_layers)
        enc = init_mlp(spec, rng, prefix="enc.")
        # same recipe as the generating coefficients; bias starts at zero
        beta = structured_table(self.n_link_states_, self.n_components, rng)
        return enc.merged(ParamStore({"beta": beta, "bias": np.zeros(self.n_link_states_)}))

    def fit(self, X, W):
        """Fit on node features ``X`` (n, d_x) and link weights ``W``.

        ``W`` is either a symmetric (n, n) integer matrix with entries in
        1..K (diagonal ignored) or a callable ``W(i, j)`` returning weights
        for index arrays, in which case ``n_link_states`` must be set.
        """
        X = check_array(X, dtype=np.float64)
        n = X.shape[0]
        links, K = self._link_source(W, n)
        self.n_link_states_ = K
        spec = encoder_spec(X.shape[1], self.n_components, self.hidden_width, self.n_hidden_layers)
        m = self.batch_size
        if m < 2:
            raise ValueError("batch_size must be at least 2")

        def batch_fn(batch_rng, perm_rng):
            i, j = sample_pair_indices(n, m, batch_rng)
            w = np.asarray(links(i, j), dtype=np.int64)
            return X[i], X[j], w, w[perm_rng.permutation(m)]

        def loss_fn(p, batch):
            return gca_loss(p, spec, *batch)

        return self._run(X, batch_fn, loss_fn)

    def _link_source(self, W, n) -> tuple[Callable, int]:
        if callable(W):
            if self.n_link_states is None:
                raise ValueError("n_link_states is required when W is a callable")
            K = int(self.n_link_states)

            def links(i, j):
                w = np.asarray(W(i, j))
                _check_state(w, K)
                return w
            return links, K
        W = check_array(W, dtype=None, ensure_min_samples=2)
        if W.shape != (n, n):
            raise ValueError(f"W must be ({n}, {n}), got {W.shape}")
        iu = np.triu_indices(n, k=1)
        if not np.array_equal(W[iu], W.T[iu]):
            raise ValueError("W must be symmetric")
        if np.any(W[iu] != np.round(W[iu])):
            raise ValueError("link weights must be integers")
        W = W.astype(np.int64)
        K = int(self.n_link_states) if self.n_link_states is not None else int(W[iu].max())
        _check_state(W[iu], K)
        return (lambda i, j: W[i, j]), K

    # views on the fitted model ------------------------------------------------

    @property
    def encoder_(self) -> EncoderNetwork:
        return EncoderNetwork(self.encoder_spec_, self.params_.subset("enc."))

    @property
    def ratio_params_(self) -> RatioParams:
        check_is_fitted(self, "params_")
        return RatioParams(self.params_["beta"].copy(), self.params_["bias"].copy())

    def ratio(self, w, X1, X2) -> np.ndarray:
        """Row-wise ratio model values r(w, x1, x2)."""
        rp = self.ratio_params_
        w = np.asarray(w, dtype=np.int64)
        _check_state(w, rp.K)
        h1, h2 = self.transform(X1), self.transform(X2)
        return np.sum(rp.beta[w - 1] * (h1 * h2), axis=1) + rp.bias[w - 1]

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        dims = {"d_x": self.n_features_in_, "d_s": self.n_components, "K": self.n_link_states_,
                "hidden_width": self.hidden_width, "n_hidden_layers": self.n_hidden_layers}
        save_checkpoint(path, self._magic, dims, self.params_)

    @classmethod
    def load(cls, path) -> "GraphComponentAnalysis":
        dims, params = load_checkpoint(path, cls._magic)
        est = cls(dims["d_s"], n_link_states=dims["K"], hidden_width=dims["hidden_width"],
                  n_hidden_layers=dims["n_hidden_layers"])
        est.params_, est.n_features_in_, est.n_link_states_ = params, dims["d_x"], dims["K"]
        spec = encoder_spec(dims["d_x"], dims["d_s"], dims["hidden_width"], dims["n_hidden_layers"])
        expected = [n for n, _ in spec.param_shapes("enc.")] + ["beta", "bias"]
        if sorted(params.names()) != sorted(expected):
            raise ValueError(f"{path}: checkpoint tensors do not match the recorded dimensions")
        return est


def train_gca(ds: GraphDataset, cfg: TrainConfig, **estimator_kw):
    """Fit GCA on a synthetic dataset; returns (encoder, ratio params, losses)."""
    est = GraphComponentAnalysis(
        ds.d_s, n_link_states=ds.K, batch_size=cfg.minibatch_size, max_iter=cfg.iterations,
        learning_rate=cfg.lr, eval_every=cfg.eval_every, random_state=cfg.seed, **estimator_kw)
    est.fit(ds.x, ds.link_weights)
    return est.encoder_, est.ratio_params_, est.loss_curve_
