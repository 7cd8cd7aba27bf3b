"""Deep GP classifier: layer stack, Bernoulli-logistic ELBO, Adam training."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffgraph as dg
from . import svgp
from .batching import make_class_index, make_epoch_batches, make_shuffled_batches
from .rng import derive_rng
from .svgp import SvgpLayer

log = logging.getLogger(__name__)

BATCHING = ("balanced", "shuffled")
LIKELIHOODS = ("bernoulli", "zero")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    layers: int = 3
    hidden_width: int = 10
    num_inducing: int = 64
    ard: bool = True
    mean_fn: str = "identity"  # hidden layers; the output layer always uses "zero"
    jitter: float = 1e-6
    q_sqrt_init: float = 1e-2
    # kernel init: signal variance per layer kind, lengthscale omega = omega_scale * input width
    variance_hidden: float = 1e-2
    variance_output: float = 1e-3
    omega_scale: float = 0.5

    def __post_init__(self):
        if self.layers < 1 or self.hidden_width < 1 or self.num_inducing < 1:
            raise ValueError("layers, hidden_width and num_inducing must be positive")
        if min(self.variance_hidden, self.variance_output, self.omega_scale, self.q_sqrt_init) <= 0:
            raise ValueError("kernel and variational init scales must be positive")
        if self.mean_fn not in svgp.MEAN_FUNCTIONS:
            raise ValueError(f"mean_fn must be one of {svgp.MEAN_FUNCTIONS}")


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    mc_train: int = 1
    mc_pred: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ell_rescale: bool = False
    batching: str = "balanced"

    def __post_init__(self):
        if self.lr <= 0 or self.mc_train < 1 or self.mc_pred < 1 or self.epochs < 0:
            raise ValueError("need lr > 0, mc_train >= 1, mc_pred >= 1, epochs >= 0")
        if self.batching not in BATCHING:
            raise ValueError(f"batching must be one of {BATCHING}")


@dataclass(frozen=True)
class ElboReport:
    expected_log_lik: float
    kl_total: float
    elbo: float
    kl_per_layer: tuple[float, ...]

    @classmethod
    def build(cls, ell: float, kls: Sequence[float]) -> "ElboReport":
        total = float(sum(kls))
        return cls(float(ell), total, float(ell) - total, tuple(float(k) for k in kls))


@dataclass(frozen=True)
class DgpModel:
    layers: tuple[SvgpLayer, ...]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.output_dim != b.input_dim:
                raise dg.ShapeError(f"layer widths do not chain: {a.output_dim} -> {b.input_dim}")
        if self.layers[-1].output_dim != 1:
            raise dg.ShapeError("the output layer must have a single unit")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [l.output_dim for l in self.layers]

    @classmethod
    def init(cls, X: np.ndarray, cfg: ModelConfig, seed: int = 0) -> "DgpModel":
        """Inducing inputs start at ``M`` random training rows, carried through
        the hidden layers by the passthrough map."""
        X = np.asarray(X, dtype=np.float64)
        rng = derive_rng(seed, "inducing")
        n = X.shape[0]
        rows = rng.choice(n, size=cfg.num_inducing, replace=cfg.num_inducing > n)
        Z = X[rows].copy()
        widths = [X.shape[1]] + [cfg.hidden_width] * (cfg.layers - 1) + [1]
        layers = []
        for h in range(cfg.layers):
            last = h == cfg.layers - 1
            layers.append(SvgpLayer.init(Z, widths[h + 1], mean_fn="zero" if last else cfg.mean_fn,
                                         ard=cfg.ard, jitter=cfg.jitter, q_sqrt_scale=cfg.q_sqrt_init,
                                         variance=cfg.variance_output if last else cfg.variance_hidden,
                                         omega=cfg.omega_scale * widths[h]))
            Z = Z @ svgp._passthrough(widths[h], widths[h + 1])
        return cls(tuple(layers))

    def params(self) -> dict[tuple[int, str], np.ndarray]:
        return {(h, k): v for h, l in enumerate(self.layers) for k, v in l.params().items()}

    def with_params(self, params: dict[tuple[int, str], object]) -> "DgpModel":
        layers = []
        for h, l in enumerate(self.layers):
            layers.append(l.with_params({k: v for (hh, k), v in params.items() if hh == h}))
        return dataclasses.replace(self, layers=tuple(layers))

    def on_tape(self, tape: dg.Tape) -> tuple["DgpModel", dict]:
        leaves = {key: tape.leaf(v, name=f"{key[0]}.{key[1]}") for key, v in self.params().items()}
        return self.with_params(leaves), leaves


def draw_eps(model: DgpModel, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.standard_normal((n, l.output_dim)) for l in model.layers]


def forward_sample(model: DgpModel, X, eps: Sequence[np.ndarray]):
    """One reparameterized pass through every layer; ``(N, 1)`` output."""
    if len(eps) != len(model.layers):
        raise ValueError("need one eps matrix per layer")
    F = X
    for layer, e in zip(model.layers, eps):
        F = svgp.sample(layer, F, e)
    return F


def bernoulli_log_lik(f, y: np.ndarray):
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    return dg.sum_all(dg.add(dg.mul(y, dg.log_sigmoid(f)),
                             dg.mul(1.0 - y, dg.log_sigmoid(dg.mul(f, -1.0)))))


def expected_log_lik(model: DgpModel, X, y, eps_draws: Sequence[Sequence[np.ndarray]]):
    """Monte Carlo average over ``eps_draws`` of the summed log-likelihood."""
    total = None
    for eps in eps_draws:
        term = bernoulli_log_lik(forward_sample(model, X, eps), y)
        total = term if total is None else dg.add(total, term)
    return dg.mul(total, 1.0 / len(eps_draws))


def elbo(model: DgpModel, X, y, eps_draws, likelihood: str = "bernoulli", ell_scale: float = 1.0):
    """Returns ``(elbo_value, ElboReport)``; the value is a Var on the training path."""
    if likelihood not in LIKELIHOODS:
        raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
    kls = [svgp.kl(l) for l in model.layers]
    if likelihood == "zero":
        ell = np.zeros((1, 1))
    else:
        ell = expected_log_lik(model, X, y, eps_draws)
        if ell_scale != 1.0:
            ell = dg.mul(ell, ell_scale)
    total = ell
    for k in kls:
        total = dg.sub(total, k)
    report = ElboReport.build(dg.value_of(ell)[0, 0], [dg.value_of(k)[0, 0] for k in kls])
    return total, report


# ---------------------------------------------------------------------------
# optimisation


def poly_schedule(alpha0: float, total: int) -> np.ndarray:
    """``a[i] = a[i-1] * (1 - i/total)`` for ``i = 1..total``; ``a[0] = alpha0``."""
    if alpha0 <= 0:
        raise ValueError("alpha0 must be positive")
    a = np.empty(total + 1)
    a[0] = alpha0
    for i in range(1, total + 1):
        a[i] = a[i - 1] * (1.0 - i / total)
    return a


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ascend(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        out = {}
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            out[k] = p + lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


@dataclass
class TrainState:
    schedule: np.ndarray
    adam: Adam
    rng: np.random.Generator
    mc_train: int = 1
    ell_scale: float = 1.0
    likelihood: str = "bernoulli"

    @property
    def total_iterations(self) -> int:
        return len(self.schedule) - 1


def _diagnostics(model: DgpModel) -> str:
    return ", ".join(f"{h}.{k}={np.linalg.norm(v):.3g}" for (h, k), v in model.params().items())


def elbo_and_grads(model: DgpModel, X, y, eps_draws, likelihood="bernoulli", ell_scale=1.0):
    tape = dg.Tape()
    live, leaves = model.on_tape(tape)
    value, report = elbo(live, X, y, eps_draws, likelihood, ell_scale)
    if not np.isfinite(report.elbo):
        return report, None
    grads = tape.backward(value)
    return report, {k: grads[v] for k, v in leaves.items()}


def train_step(model: DgpModel, X_batch, y_batch, iteration: int, state: TrainState,
               eps_draws=None) -> tuple[DgpModel, ElboReport]:
    """One Adam ascent step at the scheduled rate for ``iteration`` (1-based)."""
    if not 1 <= iteration <= state.total_iterations:
        raise ValueError(f"iteration {iteration} outside 1..{state.total_iterations}")
    if eps_draws is None:
        eps_draws = [draw_eps(model, X_batch.shape[0], state.rng) for _ in range(state.mc_train)]
    report, grads = elbo_and_grads(model, X_batch, y_batch, eps_draws, state.likelihood, state.ell_scale)
    if grads is None or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(f"non-finite ELBO or gradient at iteration {iteration}: {_diagnostics(model)}")
    new = state.adam.ascend(model.params(), grads, state.schedule[iteration])
    return model.with_params(new), report


def fit(model: DgpModel, X: np.ndarray, y: np.ndarray, cfg: TrainConfig, seed: int = 0,
        batching: str | None = None) -> tuple[DgpModel, list[dict]]:
    """Train for ``cfg.epochs`` epochs of ``B`` batches each.

    Returns the trained model and a per-iteration trace of
    ``iteration, ell, kl, elbo, lr``.
    """
    batching = batching or cfg.batching
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).ravel()
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    idx = make_class_index(y)
    nb, vb = idx.n_batches, idx.batch_size
    total = cfg.epochs * nb
    state = TrainState(
        schedule=poly_schedule(cfg.lr, total) if total else np.array([cfg.lr]),
        adam=Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        rng=derive_rng(seed, "eps"),
        mc_train=cfg.mc_train,
        ell_scale=X.shape[0] / vb if cfg.ell_rescale else 1.0,
    )
    trace = []
    it = 0
    for epoch in range(cfg.epochs):
        brng = derive_rng(seed, "batches", epoch)
        if batching == "balanced":
            plan = make_epoch_batches(idx, brng)
        else:
            plan = make_shuffled_batches(X.shape[0], vb, nb, brng)
        for batch in plan:
            it += 1
            model, rep = train_step(model, X[batch], y[batch], it, state)
            trace.append({"iteration": it, "ell": rep.expected_log_lik, "kl": rep.kl_total,
                          "elbo": rep.elbo, "lr": float(state.schedule[it])})
        log.debug("epoch %d: elbo %.4f", epoch, trace[-1]["elbo"])
    return model, trace


def toy_problem(seed: int = 0, n: int = 16, d_in: int = 5, hidden: int = 3, m: int = 4):
    """Small two-layer model at a random non-prior point, with data and frozen eps."""
    rng = derive_rng(seed, "toy")
    X = rng.standard_normal((n, d_in))
    y = (rng.random(n) < 0.5).astype(np.uint8)
    y[:2] = (0, 1)
    model = DgpModel.init(X, ModelConfig(layers=2, hidden_width=hidden, num_inducing=m), seed=seed)
    params = {}
    for key, v in model.params().items():
        params[key] = v + 0.3 * rng.standard_normal(v.shape)
    model = model.with_params(params)
    eps = [draw_eps(model, n, rng)]
    return model, X, y, eps


def gradcheck_toy(seed: int = 0, h: float = 1e-5) -> tuple[float, int]:
    """Max relative error of the full ELBO gradient on :func:`toy_problem`."""
    model, X, y, eps = toy_problem(seed)
    keys = list(model.params())

    def f(blocks):
        return elbo(model.with_params(dict(zip(keys, blocks))), X, y, eps)[0]

    theta = [model.params()[k] for k in keys]
    return dg.grad_check(f, theta, h=h), sum(t.size for t in theta)


def predict_proba(model: DgpModel, X: np.ndarray, n_samples: int = 20, seed: int = 0,
                  chunk: int = 4096) -> np.ndarray:
    """MC average of ``sigmoid(f)`` over ``n_samples`` passes; shape ``(N,)``."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    rng = derive_rng(seed, "predict")
    acc = np.zeros(n)
    for _ in range(n_samples):
        eps = draw_eps(model, n, rng)
        for lo in range(0, n, chunk):
            sl = slice(lo, lo + chunk)
            f = forward_sample(model, X[sl], [e[sl] for e in eps])
            acc[sl] += dg.sigmoid(f)[:, 0]
    return acc / n_samples
