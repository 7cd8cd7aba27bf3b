"""ARD squared-exponential covariance with log-space hyperparameters.

``k(a, b) = s2 * exp(-0.5 * sum_d (a_d - b_d)^2 / omega_d)``; note ``omega_d``
divides the squared distance directly, it is not squared again. With
``ard=False`` a single ``omega`` is shared by every input dimension.

Hyperparameter fields may hold arrays or :class:`~itdgp.diffgraph.Var`
handles, so the same object serves training and prediction.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg

MAX_JITTER_DOUBLINGS = 8


@dataclass(frozen=True)
class ArdRbfKernel:
    log_variance: object  # (1, 1)
    log_omega: object  # (1, D) when ard else (1, 1)
    input_dim: int
    ard: bool = True
    jitter: float = 1e-6

    def __post_init__(self):
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        n = dg.value_of(self.log_omega).size
        if n != (self.input_dim if self.ard else 1):
            raise ValueError(f"expected {self.input_dim if self.ard else 1} lengthscales, got {n}")

    @classmethod
    def init(cls, input_dim: int, variance: float = 1.0, omega: float | None = None,
             ard: bool = True, jitter: float = 1e-6) -> "ArdRbfKernel":
        # default omega = input_dim keeps typical squared distances of
        # standardized inputs O(1) in the exponent
        omega = float(input_dim) if omega is None else omega
        width = input_dim if ard else 1
        return cls(np.array([[np.log(variance)]]), np.full((1, width), np.log(omega)),
                   input_dim, ard, jitter)

    @property
    def variance(self) -> float:
        return float(np.exp(dg.value_of(self.log_variance))[0, 0])

    @property
    def omega(self) -> np.ndarray:
        w = np.exp(dg.value_of(self.log_omega)).ravel()
        return w if self.ard else np.repeat(w, self.input_dim)

    def params(self) -> dict[str, object]:
        return {"log_variance": self.log_variance, "log_omega": self.log_omega}

    def replace(self, **params) -> "ArdRbfKernel":
        return dataclasses.replace(self, **params)


def _check_dim(k: ArdRbfKernel, A):
    d = A.shape[1]
    if d != k.input_dim:
        raise dg.ShapeError(f"kernel expects {k.input_dim} input columns, got {d}")


def _scaled(k: ArdRbfKernel, A):
    inv_sqrt = dg.exp(dg.mul(k.log_omega, -0.5))
    if not k.ard:
        inv_sqrt = dg.matmul(inv_sqrt, np.ones((1, k.input_dim)))
    n = A.shape[0]
    return dg.mul(A, dg.matmul(np.ones((n, 1)), inv_sqrt))


def _kmat_nojitter(k: ArdRbfKernel, A, B):
    _check_dim(k, A)
    _check_dim(k, B)
    n, m, d = A.shape[0], B.shape[0], k.input_dim
    As = _scaled(k, A)
    Bs = As if B is A else _scaled(k, B)
    ones_d = np.ones((d, 1))
    sqa = dg.matmul(dg.mul(As, As), ones_d)
    sqb = sqa if B is A else dg.matmul(dg.mul(Bs, Bs), ones_d)
    cross = dg.matmul(As, dg.transpose(Bs))
    d2 = dg.sub(dg.add(dg.matmul(sqa, np.ones((1, m))), dg.matmul(np.ones((n, 1)), dg.transpose(sqb))),
                dg.mul(cross, 2.0))
    d2 = dg.clamp_min(d2, 0.0)
    return dg.mul(dg.exp(k.log_variance), dg.exp(dg.mul(d2, -0.5)))


def kmat(k: ArdRbfKernel, A, B=None):
    """Cross-covariance ``K(A, B)``; ``B=None`` (or ``B is A``) means the same
    point set, which gets ``jitter`` on the diagonal."""
    B = A if B is None else B
    K = _kmat_nojitter(k, A, B)
    if B is A and k.jitter > 0:
        K = dg.add(K, k.jitter * np.eye(A.shape[0]))
    return K


def kdiag(k: ArdRbfKernel, A):
    """Prior variances at the rows of ``A`` as an ``(N, 1)`` column."""
    _check_dim(k, A)
    n = A.shape[0]
    return dg.add(dg.matmul(np.ones((n, 1)), dg.exp(k.log_variance)),
                  np.full((n, 1), k.jitter))


def jittered_cholesky(k: ArdRbfKernel, Z):
    """Cholesky of ``K(Z, Z) + jitter I``, doubling the jitter on failure.

    Returns ``(L, K, jitter_used)``.
    """
    base = _kmat_nojitter(k, Z, Z)
    jit = k.jitter
    eye = np.eye(Z.shape[0])
    for attempt in range(MAX_JITTER_DOUBLINGS + 1):
        K = dg.add(base, jit * eye)
        try:
            return dg.cholesky(K), K, jit
        except dg.NotPositiveDefiniteError:
            if attempt == MAX_JITTER_DOUBLINGS:
                raise
            jit = 2.0 * jit if jit > 0 else 1e-12
    raise AssertionError("unreachable")
