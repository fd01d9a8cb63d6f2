"""Energy-based baseline: r(x, x') = h(x)^T h(x') + a(h(x)), no link weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from ._base import DVEstimatorBase, TrainConfig, encoder_spec, sample_pair_indices
from ._checkpoint import load_checkpoint, save_checkpoint
from .autodiff import MlpSpec, ParamStore, glorot_uniform, init_mlp
from .gca import EncoderNetwork


@dataclass
class EbmParams:
    encoder: EncoderNetwork
    head_weight: np.ndarray  # (d_s, 1)
    head_bias: np.ndarray  # (1,)

    def head(self, h) -> np.ndarray:
        return (np.atleast_2d(h) @ self.head_weight + self.head_bias)[:, 0]


def ebm_ratio(p: EbmParams, x, x_other) -> float:
    h, h2 = p.encoder(x), p.encoder(x_other)
    return float(np.sum(h * h2) + p.head(h)[0])


def ebm_loss(p: dict, spec: MlpSpec, xi, xj, perm) -> ad.Tensor:
    """Empirical DV objective; negatives pair x_i with the permuted x_j."""
    m = xi.shape[0]
    h = ad.mlp_forward(spec, p, ad.const(np.vstack([xi, xj])), prefix="enc.")
    hi, hj = ad.slice_rows(h, 0, m), ad.slice_rows(h, m, 2 * m)
    a = ad.sum_rows(ad.affine(hi, p["a.W"], p["a.b"], name="head"), name="a")
    r_pos = ad.add(ad.sum_rows(ad.mul(hi, hj)), a, name="r_pos")
    r_neg = ad.add(ad.sum_rows(ad.mul(hi, ad.take_rows(hj, perm, name="hj_perm"))), a, name="r_neg")
    return ad.add(ad.scale(ad.mean(r_pos), -1.0), ad.log_mean_exp(r_neg), name="dv_objective")


class EnergyBasedBaseline(DVEstimatorBase):
    """Baseline encoder trained only on node features.

    Same encoder, initialization, optimizer and schedule as
    :class:`~graphca.gca.GraphComponentAnalysis`; ``fit`` never sees
    link weights.
    """

    _magic = b"EBMM"

    def __init__(self, n_components=4, *, hidden_width=50, n_hidden_layers=4, batch_size=100,
                 max_iter=100_000, learning_rate=1e-4, eval_every=100, random_state=0, verbose=0):
        self.n_components = n_components
        self.hidden_width = hidden_width
        self.n_hidden_layers = n_hidden_layers
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.eval_every = eval_every
        self.random_state = random_state
        self.verbose = verbose

    def _init_params(self, d_x, rng):
        spec = encoder_spec(d_x, self.n_components, self.hidden_width, self.n_hidden_layers)
        enc = init_mlp(spec, rng, prefix="enc.")
        head = ParamStore({"a.W": glorot_uniform(self.n_components, 1, rng), "a.b": np.zeros(1)})
        return enc.merged(head)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n = X.shape[0]
        spec = encoder_spec(X.shape[1], self.n_components, self.hidden_width, self.n_hidden_layers)
        m = self.batch_size
        if m < 2:
            raise ValueError("batch_size must be at least 2")

        def batch_fn(batch_rng, perm_rng):
            i, j = sample_pair_indices(n, m, batch_rng)
            return X[i], X[j], perm_rng.permutation(m)

        def loss_fn(p, batch):
            return ebm_loss(p, spec, *batch)

        return self._run(X, batch_fn, loss_fn)

    @property
    def ebm_params_(self) -> EbmParams:
        enc = EncoderNetwork(self.encoder_spec_, self.params_.subset("enc."))
        return EbmParams(enc, self.params_["a.W"].copy(), self.params_["a.b"].copy())

    def ratio(self, X1, X2) -> np.ndarray:
        check_is_fitted(self, "params_")
        h1, h2 = self.transform(X1), self.transform(X2)
        return np.sum(h1 * h2, axis=1) + self.ebm_params_.head(h1)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        dims = {"d_x": self.n_features_in_, "d_s": self.n_components,
                "hidden_width": self.hidden_width, "n_hidden_layers": self.n_hidden_layers}
        save_checkpoint(path, self._magic, dims, self.params_)

    @classmethod
    def load(cls, path) -> "EnergyBasedBaseline":
        dims, params = load_checkpoint(path, cls._magic)
        est = cls(dims["d_s"], hidden_width=dims["hidden_width"],
                  n_hidden_layers=dims["n_hidden_layers"])
        est.params_, est.n_features_in_ = params, dims["d_x"]
        return est


def train_ebm(x, cfg: TrainConfig, n_components: int, **estimator_kw):
    """Fit the baseline on a feature matrix; returns (EbmParams, losses).

    Takes only features, so link weights cannot be consulted.
    """
    est = EnergyBasedBaseline(
        n_components, batch_size=cfg.minibatch_size, max_iter=cfg.iterations,
        learning_rate=cfg.lr, eval_every=cfg.eval_every, random_state=cfg.seed, **estimator_kw)
    est.fit(x)
    return est.ebm_params_, est.loss_curve_
