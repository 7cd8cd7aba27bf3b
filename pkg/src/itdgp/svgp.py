"""One sparse variational GP layer with independent outputs.

Each of the ``T`` outputs ``j`` has ``q(u_j) = N(m_j, S_j)`` over the values at
``M`` shared inducing inputs ``Z``. The factors ``L_j`` of ``S_j = L_j L_j^T``
are stored side by side in one ``(M, T*M)`` array, ``q_sqrt``: strictly lower
entries are taken as is, the diagonal holds ``log L_j[i, i]`` and the upper
triangle is ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffgraph as dg
from .kernel import ArdRbfKernel, jittered_cholesky, kdiag, kmat

MEAN_FUNCTIONS = ("identity", "zero")
PARAM_NAMES = ("Z", "q_mu", "q_sqrt", "log_variance", "log_omega")


@lru_cache(maxsize=64)
def _masks(m: int, t: int):
    eye = np.eye(m)
    strict = np.tril(np.ones((m, m)), -1)
    diag_mask = np.tile(eye, (1, t))
    strict_mask = np.tile(strict, (1, t))
    # (T, T*M) block-row summation matrix
    blocks = np.kron(np.eye(t), np.ones((1, m)))
    return diag_mask, strict_mask, blocks


@lru_cache(maxsize=64)
def _passthrough(d_in: int, d_out: int):
    P = np.zeros((d_in, d_out))
    k = min(d_in, d_out)
    P[np.arange(k), np.arange(k)] = 1.0
    return P


@dataclass(frozen=True)
class LayerMoments:
    mean: object  # (N, T)
    var: object  # (N, T), marginal variances


@dataclass(frozen=True)
class SvgpLayer:
    Z: object
    q_mu: object
    q_sqrt: object
    kernel: ArdRbfKernel
    mean_fn: str = "zero"

    def __post_init__(self):
        if self.mean_fn not in MEAN_FUNCTIONS:
            raise ValueError(f"unknown mean function {self.mean_fn!r}")
        m, d = self.Z.shape
        if d != self.kernel.input_dim:
            raise dg.ShapeError(f"Z has {d} columns, kernel expects {self.kernel.input_dim}")
        if self.q_mu.shape[0] != m or self.q_sqrt.shape != (m, m * self.q_mu.shape[1]):
            raise dg.ShapeError(
                f"variational shapes {self.q_mu.shape}, {self.q_sqrt.shape} do not match M={m}")

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Z.shape[1]

    @property
    def output_dim(self) -> int:
        return self.q_mu.shape[1]

    @classmethod
    def init(cls, Z: np.ndarray, output_dim: int, mean_fn: str = "zero", ard: bool = True,
             jitter: float = 1e-6, q_sqrt_scale: float = 1e-2, variance: float = 1.0,
             omega: float | None = None) -> "SvgpLayer":
        """Fresh layer with ``S_j = q_sqrt_scale^2 I`` and ``m_j = mean_fn(Z)``."""
        Z = np.array(Z, dtype=np.float64)
        m, d = Z.shape
        kernel = ArdRbfKernel.init(d, variance=variance, omega=omega, ard=ard, jitter=jitter)
        q_mu = np.asarray(mean_function(mean_fn, Z, output_dim), dtype=np.float64).copy()
        q_sqrt = np.log(q_sqrt_scale) * _masks(m, output_dim)[0]
        return cls(Z, q_mu, q_sqrt, kernel, mean_fn)

    def params(self) -> dict[str, object]:
        return {"Z": self.Z, "q_mu": self.q_mu, "q_sqrt": self.q_sqrt, **self.kernel.params()}

    def with_params(self, params: dict[str, object]) -> "SvgpLayer":
        kern = self.kernel.replace(**{k: params[k] for k in ("log_variance", "log_omega") if k in params})
        rest = {k: params[k] for k in ("Z", "q_mu", "q_sqrt") if k in params}
        return dataclasses.replace(self, kernel=kern, **rest)


def mean_function(kind: str, F, output_dim: int):
    n, d = F.shape
    if kind == "zero":
        return np.zeros((n, output_dim))
    return dg.matmul(F, _passthrough(d, output_dim))


def cholesky_factors(layer: SvgpLayer):
    """``[L_1 | ... | L_T]`` assembled from the raw ``q_sqrt`` parameters."""
    diag_mask, strict_mask, _ = _masks(layer.num_inducing, layer.output_dim)
    raw = layer.q_sqrt
    return dg.add(dg.mul(raw, strict_mask), dg.mul(dg.exp(dg.mul(raw, diag_mask)), diag_mask))


def factor_from_covariance(S: np.ndarray) -> np.ndarray:
    """Raw ``q_sqrt`` block encoding the given SPD covariance."""
    L = np.linalg.cholesky(S)
    raw = np.tril(L, -1)
    raw[np.diag_indices_from(raw)] = np.log(np.diag(L))
    return raw


def predict_moments(layer: SvgpLayer, F) -> LayerMoments:
    if F.shape[1] != layer.input_dim:
        raise dg.ShapeError(f"layer expects {layer.input_dim} input columns, got {F.shape[1]}")
    n, m, t = F.shape[0], layer.num_inducing, layer.output_dim
    k = layer.kernel
    Lk, _, _ = jittered_cholesky(k, layer.Z)
    A = dg.trisolve(Lk, kmat(k, layer.Z, F))  # L^{-1} K_ZF
    delta = dg.trisolve(Lk, dg.sub(layer.q_mu, mean_function(layer.mean_fn, layer.Z, t)))
    mean = dg.add(mean_function(layer.mean_fn, F, t), dg.matmul(dg.transpose(A), delta))

    W = dg.trisolve(Lk, A, transpose=True)  # K_ZZ^{-1} K_ZF
    LW = dg.matmul(dg.transpose(cholesky_factors(layer)), W)  # (T*M, N)
    s_term = dg.transpose(dg.matmul(_masks(m, t)[2], dg.mul(LW, LW)))
    q_diag = dg.transpose(dg.matmul(np.ones((1, m)), dg.mul(A, A)))
    var = dg.add(dg.matmul(dg.sub(kdiag(k, F), q_diag), np.ones((1, t))), s_term)
    return LayerMoments(mean, dg.clamp_min(var, 0.0))


def sample_moments(moments: LayerMoments, eps):
    if tuple(eps.shape) != tuple(moments.mean.shape):
        raise dg.ShapeError(f"eps shape {eps.shape} does not match output {moments.mean.shape}")
    return dg.add(moments.mean, dg.mul(eps, dg.sqrt(moments.var)))


def sample(layer: SvgpLayer, F, eps):
    """Reparameterized draw ``mean + eps * sqrt(var)`` of the layer outputs."""
    return sample_moments(predict_moments(layer, F), eps)


def kl(layer: SvgpLayer):
    """``sum_j KL(N(m_j, S_j) || N(mean_fn(Z), K_ZZ))`` as a 1x1 value."""
    m, t = layer.num_inducing, layer.output_dim
    diag_mask = _masks(m, t)[0]
    Lk, _, _ = jittered_cholesky(layer.kernel, layer.Z)
    diff = dg.sub(mean_function(layer.mean_fn, layer.Z, t), layer.q_mu)
    alpha = dg.trisolve(Lk, diff)
    maha = dg.sum_all(dg.mul(alpha, alpha))
    B = dg.trisolve(Lk, cholesky_factors(layer))
    tr = dg.sum_all(dg.mul(B, B))
    lk_diag = dg.matmul(dg.mul(Lk, np.eye(m)), np.ones((m, 1)))
    logdet_k = dg.mul(dg.sum_all(dg.log(lk_diag)), 2.0 * t)
    logdet_s = dg.mul(dg.sum_all(dg.mul(layer.q_sqrt, diag_mask)), 2.0)
    total = dg.add(dg.sub(dg.add(tr, maha), float(t * m)), dg.sub(logdet_k, logdet_s))
    return dg.mul(total, 0.5)
