"""Synthetic graph data: latents, mixing network, node features, link weights."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import pair_uniform, stream
from .autodiff import MlpSpec, ParamStore, init_mlp, mlp_apply

LATENT_KINDS = ("laplace", "gauss")


@dataclass(frozen=True)
class LatentConfig:
    kind: str = "laplace"
    d_s: int = 4
    n: int = 2000

    def __post_init__(self):
        if self.kind not in LATENT_KINDS:
            raise ValueError(f"latent kind must be one of {LATENT_KINDS}, got {self.kind!r}")
        if self.d_s < 1:
            raise ValueError("d_s must be >= 1")
        if self.n < 0:
            raise ValueError("n must be >= 0")


def correlated_gauss_cov(d: int) -> np.ndarray:
    """Unit diagonal, 0.3 on the first off-diagonals (kept symmetric)."""
    cov = np.eye(d)
    idx = np.arange(d - 1)
    cov[idx, idx + 1] = 0.3
    cov[idx + 1, idx] = 0.3
    return cov


def sample_latents(cfg: LatentConfig, seed=0) -> np.ndarray:
    """Draw ``cfg.n`` i.i.d. latent rows.

    ``seed`` may be an int (uses the ``latents`` stream) or a Generator.
    Laplace draws have density proportional to exp(-sqrt(2)|s|), i.e. unit
    variance per coordinate.
    """
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "latents")
    if cfg.kind == "laplace":
        u = rng.uniform(-0.5, 0.5, size=(cfg.n, cfg.d_s))
        return -np.sign(u) * np.log1p(-2.0 * np.abs(u)) / np.sqrt(2.0)
    chol = np.linalg.cholesky(correlated_gauss_cov(cfg.d_s))
    z = rng.standard_normal(size=(cfg.n, cfg.d_s))
    return z @ chol.T


# ---------------------------------------------------------------- links


@dataclass(frozen=True)
class LinkModel:
    """Coefficient table ``alpha[k-1, i]`` for link states k = 1..K."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"alpha must be a non-empty K x d_s table, got {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("alpha must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    @property
    def K(self) -> int:
        return self.alpha.shape[0]

    @property
    def d_s(self) -> int:
        return self.alpha.shape[1]

    @property
    def support(self) -> range:
        return range(1, self.K + 1)

    def __eq__(self, other):
        return isinstance(other, LinkModel) and np.array_equal(self.alpha, other.alpha)

    def __hash__(self):
        return hash(self.alpha.tobytes())


def structured_table(K: int, d_s: int, rng: np.random.Generator) -> np.ndarray:
    """``1 + 0.1*eps`` where the state index equals the coordinate, ``0.1*eps``
    elsewhere; eps ~ U[0, 1] independently per entry."""
    table = 0.1 * rng.uniform(0.0, 1.0, size=(K, d_s))
    diag = np.arange(min(K, d_s))
    table[diag, diag] += 1.0
    return table


def build_link_model(d_s: int, K: int, seed=0) -> LinkModel:
    if K < 1 or d_s < 1:
        raise ValueError(f"need K >= 1 and d_s >= 1, got K={K}, d_s={d_s}")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "link-model")
    return LinkModel(structured_table(K, d_s, rng))


def link_prob(model: LinkModel, s, s_other) -> np.ndarray:
    """p(w = k | s, s') for k = 1..K; works row-wise on stacked inputs."""
    s = np.asarray(s, dtype=np.float64)
    s_other = np.asarray(s_other, dtype=np.float64)
    logits = (s * s_other) @ model.alpha.T
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def draw_states(prob: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of a state in 1..K per row of ``prob``."""
    cdf = np.cumsum(prob, axis=-1)
    idx = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, prob.shape[-1] - 1) + 1


# ---------------------------------------------------------------- mixing


@dataclass
class MixingNetwork:
    """Three-layer leaky-ReLU map from latents (d_s) to features (d_x)."""

    spec: MlpSpec
    params: ParamStore

    @property
    def d_s(self) -> int:
        return self.spec.d_in

    @property
    def d_x(self) -> int:
        return self.spec.d_out

    def __call__(self, s) -> np.ndarray:
        return mlp_apply(self.spec, self.params, s)

    @classmethod
    def identity(cls, d: int, n_layers: int = 3, slope: float = 0.2) -> "MixingNetwork":
        spec = MlpSpec((d,) * (n_layers + 1), "leaky_relu", slope)
        tensors = {}
        for name, shape in spec.param_shapes():
            tensors[name] = np.eye(d) if len(shape) == 2 else np.zeros(shape)
        return cls(spec, ParamStore(tensors))


def mixing_spec(d_s: int, d_x: int, n_layers: int = 3, slope: float = 0.2) -> MlpSpec:
    return MlpSpec((d_s,) + (d_x,) * n_layers, "leaky_relu", slope)


def build_mixing(d_s: int, d_x: int, seed=0, *, n_layers: int = 3, slope: float = 0.2,
                 min_singular: float = 1e-3, max_tries: int = 100,
                 allow_noninjective: bool = False) -> MixingNetwork:
    """Random mixing network whose weight matrices are all well conditioned.

    Draws are rejected until every weight matrix has smallest singular value
    above ``min_singular``.
    """
    if d_s > d_x and not allow_noninjective:
        raise ValueError(f"d_s={d_s} > d_x={d_x}: mixing cannot be injective "
                         "(pass allow_noninjective=True to build it anyway)")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "mixing-init")
    spec = mixing_spec(d_s, d_x, n_layers, slope)
    for _ in range(max_tries):
        params = init_mlp(spec, rng)
        smallest = min(np.linalg.svd(w, compute_uv=False).min()
                       for name, w in params.items() if name.startswith("W"))
        if smallest > min_singular:
            return MixingNetwork(spec, params)
    raise RuntimeError(f"no well-conditioned mixing network after {max_tries} draws")


# ---------------------------------------------------------------- dataset


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """Node features plus lazily drawn, symmetric link weights.

    ``s_true`` is only kept for evaluation; link weights are drawn on demand
    from a hash of ``(link_seed, min(i, j), max(i, j))``.
    """

    x: np.ndarray
    s_true: np.ndarray
    link_seed: int
    link_model: LinkModel

    def __post_init__(self):
        if self.x.shape[0] != self.s_true.shape[0]:
            raise ValueError("x and s_true must have the same number of rows")
        if self.s_true.shape[1] != self.link_model.d_s:
            raise ValueError(f"latent dimension {self.s_true.shape[1]} does not match "
                             f"link model d_s={self.link_model.d_s}")
        for arr in (self.x, self.s_true):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_s(self) -> int:
        return self.s_true.shape[1]

    @property
    def K(self) -> int:
        return self.link_model.K

    def link_weights(self, i, j) -> np.ndarray:
        """Vectorized link weights for index arrays ``i`` and ``j``."""
        i = np.atleast_1d(np.asarray(i, dtype=np.int64))
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        if i.shape != j.shape:
            raise ValueError("index arrays must have the same shape")
        if np.any(i == j):
            raise ValueError("self-links are not defined (i == j)")
        if i.size and (min(i.min(), j.min()) < 0 or max(i.max(), j.max()) >= self.n):
            raise IndexError(f"node index out of range for n={self.n}")
        if self.K == 1:
            return np.ones(i.shape, dtype=np.int64)
        p = link_prob(self.link_model, self.s_true[i], self.s_true[j])
        return draw_states(p, pair_uniform(self.link_seed, i, j)).astype(np.int64)

    def link_weight(self, i: int, j: int) -> int:
        return int(self.link_weights([i], [j])[0])

    def dense_weights(self) -> np.ndarray:
        """Full symmetric n x n weight matrix (diagonal 0). Small n only."""
        iu, ju = np.triu_indices(self.n, k=1)
        W = np.zeros((self.n, self.n), dtype=np.int64)
        if iu.size:
            w = self.link_weights(iu, ju)
            W[iu, ju] = w
            W[ju, iu] = w
        return W

    def __eq__(self, other):
        return (isinstance(other, GraphDataset)
                and self.link_seed == other.link_seed
                and self.link_model == other.link_model
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.s_true, other.s_true))


def generate_dataset(latent_cfg: LatentConfig, mixing: MixingNetwork, link_model: LinkModel,
                     seed=0, *, latent_stream: str = "latents") -> GraphDataset:
    """Sample latents, push them through ``mixing`` and attach the link model."""
    if mixing.d_s != latent_cfg.d_s:
        raise ValueError(f"mixing expects d_s={mixing.d_s}, latent config has d_s={latent_cfg.d_s}")
    if link_model.d_s != latent_cfg.d_s:
        raise ValueError(f"link model has d_s={link_model.d_s}, latent config has d_s={latent_cfg.d_s}")
    s = sample_latents(latent_cfg, stream(seed, latent_stream))
    x = mixing(s) if latent_cfg.n else np.zeros((0, mixing.d_x))
    link_seed = int(stream(seed, "links").integers(0, 2**63 - 1, dtype=np.int64))
    return GraphDataset(x, s, link_seed, link_model)


# ---------------------------------------------------------------- file format

_DS_MAGIC = b"GCA1"
_DS_HEADER = struct.Struct("<4sIIIIQ")


def save_dataset(path, ds: GraphDataset) -> None:
    """Little-endian binary: magic, n, d_s, d_x, K, link_seed, alpha, s_true, x."""
    header = _DS_HEADER.pack(_DS_MAGIC, ds.n, ds.d_s, ds.d_x, ds.K, ds.link_seed)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (ds.link_model.alpha, ds.s_true, ds.x):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path) -> GraphDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEADER.size:
        raise ValueError(f"{path}: file too short for a dataset header")
    magic, n, d_s, d_x, K, link_seed = _DS_HEADER.unpack_from(raw)
    if magic != _DS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {_DS_MAGIC!r}")
    sizes = (K * d_s, n * d_s, n * d_x)
    expected = _DS_HEADER.size + 8 * sum(sizes)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_DS_HEADER.size).astype(np.float64)
    alpha, s, x = np.split(body, np.cumsum(sizes)[:-1])
    return GraphDataset(x.reshape(n, d_x).copy(), s.reshape(n, d_s).copy(), link_seed,
                        LinkModel(alpha.reshape(K, d_s)))
