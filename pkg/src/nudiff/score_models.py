"""Score approximators and the weighted denoising score-matching loop.

Every score model is called as ``model(x, t, cond=None)`` with ``x`` of
shape ``(batch, dim)`` and ``t`` a scalar or ``(batch,)`` array.  The
analytic models are exact oracles for Gaussian and Gaussian-mixture data;
:class:`Mlp` is a small trainable network with hand-written backprop.
"""

from __future__ import annotations

import copy
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ContractError, NumericalError
from .sde import NonUniformSde, SdeSpec, as_nonuniform
from .streams import split_streams

TIME_EMBED_DIM = 8
KERNEL_STD_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# analytic oracles
# ---------------------------------------------------------------------------

def _diffused_cov(cov, m, s):
    # m, s: (..., D)
    return m[..., :, None] * cov * m[..., None, :] + np.einsum("...i,ij->...ij", s ** 2, np.eye(len(cov)))


def _gaussian_precision(cov, m, s):
    cov_t = _diffused_cov(cov, m, s)
    try:
        chol = np.linalg.cholesky(cov_t)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("diffused covariance is singular") from exc
    eye = np.broadcast_to(np.eye(cov.shape[0]), cov_t.shape)
    inv_l = np.linalg.solve(chol, eye)
    return np.swapaxes(inv_l, -1, -2) @ inv_l, chol


def _gaussian_score(x, mean, cov, m, s):
    prec, _ = _gaussian_precision(cov, m, s)
    diff = x - m * mean
    return -np.einsum("...ij,...j->...i", prec, diff)


def _kernel_at(sde: NonUniformSde, t, batch: int):
    # a shared time gives one (D,) kernel, so the precision is factorized once
    t = np.asarray(t, dtype=float)
    if t.ndim > 0 and t.size and np.all(t == t.flat[0]):
        t = t.flat[0]
    return sde.kernel(t)


class AnalyticGaussian:
    """Exact score of ``N(mean, cov)`` pushed through a (non-uniform) SDE:
    ``-(M cov M + S^2)^{-1} (x - M mean)`` with ``M = diag(m)``, ``S = diag(s)``.
    """

    def __init__(self, mean, cov, sde: SdeSpec | NonUniformSde):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        d = self.mean.size
        if self.cov.shape != (d, d):
            raise ContractError(f"covariance must be {d}x{d}")
        if not np.allclose(self.cov, self.cov.T):
            raise ContractError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(self.cov)) < -1e-12:
            raise ContractError("covariance must be positive semidefinite")
        self.sde = as_nonuniform(sde, d)
        self.input_dim = d
        self.cond_dim = 0

    def __call__(self, x, t, cond=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m, s = _kernel_at(self.sde, t, x.shape[0])
        return _gaussian_score(x, self.mean, self.cov, m, s)

    def marginal(self, t):
        """Mean and covariance of the diffused law at scalar ``t``."""
        m, s = self.sde.kernel(t)
        return m * self.mean, _diffused_cov(self.cov, m, s)

    def affine_coeffs(self, t):
        """``(A, b)`` with ``score(x, t) = A x + b`` at scalar ``t``."""
        m, s = self.sde.kernel(t)
        prec, _ = _gaussian_precision(self.cov, m, s)
        return -prec, prec @ (m * self.mean)


class AnalyticGmm:
    """Exact score of a Gaussian mixture under the SDE, via the responsibilities
    of the diffused components."""

    def __init__(self, weights, means, covs, sde: SdeSpec | NonUniformSde):
        self.weights = np.asarray(weights, dtype=float)
        if np.any(self.weights <= 0) or not math.isclose(self.weights.sum(), 1.0, rel_tol=1e-9):
            raise ContractError("mixture weights must be positive and sum to 1")
        self.components = [AnalyticGaussian(mu, c, sde) for mu, c in zip(means, covs)]
        if len(self.components) != len(self.weights):
            raise ContractError("one mean and covariance per weight")
        self.sde = self.components[0].sde
        self.input_dim = self.components[0].input_dim
        self.cond_dim = 0

    def __call__(self, x, t, cond=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m, s = _kernel_at(self.sde, t, x.shape[0])
        logps, scores = [], []
        for w, comp in zip(self.weights, self.components):
            prec, chol = _gaussian_precision(comp.cov, m, s)
            diff = x - m * comp.mean
            sc = -np.einsum("...ij,...j->...i", prec, diff)
            logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
            logps.append(math.log(w) - 0.5 * logdet + 0.5 * np.einsum("...i,...i->...", diff, sc))
            scores.append(sc)
        logps = np.stack(logps)
        resp = np.exp(logps - logsumexp(logps, axis=0))
        out = resp[0][..., None] * scores[0]
        for r, sc in zip(resp[1:], scores[1:]):
            out = out + r[..., None] * sc
        return out


def analytic_score(model: AnalyticGaussian | AnalyticGmm, x, t) -> np.ndarray:
    if not isinstance(model, (AnalyticGaussian, AnalyticGmm)):
        raise ContractError("analytic_score needs an analytic model")
    return model(x, t)


class PerturbedScore:
    """``base(x, t) + slope * x + shift``: a linearly mis-specified score.

    Keeps the reverse SDE linear, so the model's sampling law stays Gaussian.
    """

    def __init__(self, base: AnalyticGaussian, slope: float = 0.0, shift: float = 0.0):
        self.base = base
        self.slope = float(slope)
        self.shift = float(shift)
        self.sde = base.sde
        self.input_dim = base.input_dim
        self.cond_dim = 0

    def __call__(self, x, t, cond=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.base(x, t) + self.slope * x + self.shift

    def affine_coeffs(self, t):
        a, b = self.base.affine_coeffs(t)
        return a + self.slope * np.eye(len(b)), b + self.shift


# ---------------------------------------------------------------------------
# MLP with reverse-mode gradients
# ---------------------------------------------------------------------------

def time_embedding(t, batch: int, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Fixed sinusoidal features ``[sin(w_k t), cos(w_k t)]`` with ``w_k = pi 2^k / 2``."""
    t = np.broadcast_to(np.asarray(t, dtype=float), (batch,))
    freqs = 0.5 * math.pi * 2.0 ** np.arange(dim // 2)
    ang = t[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _act(name):
    if name == "silu":
        def f(z):
            sig = expit(z)
            return z * sig

        def df(z):
            sig = expit(z)
            return sig * (1.0 + z * (1.0 - sig))
    elif name == "tanh":
        f = np.tanh

        def df(z):
            return 1.0 - np.tanh(z) ** 2
    elif name == "relu":
        def f(z):
            return np.maximum(z, 0.0)

        def df(z):
            return (z > 0).astype(float)
    elif name == "identity":
        def f(z):
            return z

        def df(z):
            return np.ones_like(z)
    else:
        raise ContractError(f"unknown activation {name!r}")
    return f, df


class Mlp:
    """Fully connected score network.

    Input is ``[x, emb(t), cond]``; output has ``output_dim`` entries
    (default ``input_dim``).  Hidden layers use ``activation``; the last
    layer is linear.  Parameters are stored as ``[W1, b1, W2, b2, ...]``
    with ``W`` of shape ``(fan_out, fan_in)``.
    """

    def __init__(self, input_dim: int, hidden=(64, 64), *, output_dim: int | None = None,
                 cond_dim: int = 0, activation: str = "silu", time_dim: int = TIME_EMBED_DIM,
                 rng: np.random.Generator | None = None, params: list[np.ndarray] | None = None):
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim if output_dim is not None else input_dim)
        self.cond_dim = int(cond_dim)
        self.time_dim = int(time_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self._f, self._df = _act(activation)
        sizes = self.layer_sizes
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                params.append(rng.standard_normal((fan_out, fan_in)) * math.sqrt(1.0 / fan_in))
                params.append(np.zeros(fan_out))
        else:
            params = [np.array(p, dtype=float) for p in params]
            for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                if params[2 * k].shape != (fan_out, fan_in) or params[2 * k + 1].shape != (fan_out,):
                    raise ContractError(f"parameter shapes of layer {k} do not match {sizes}")
        self.params = params
        self._cache = None

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim + self.time_dim + self.cond_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> Mlp:
        out = copy.copy(self)
        out.params = [p.copy() for p in self.params]
        out._cache = None
        return out

    def _inputs(self, x, t, cond):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.input_dim:
            raise ContractError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        parts = [x]
        if self.time_dim:
            parts.append(time_embedding(t, x.shape[0], self.time_dim))
        if self.cond_dim:
            if cond is None:
                raise ContractError("conditional network needs a condition input")
            c = np.atleast_2d(np.asarray(cond, dtype=float))
            c = np.broadcast_to(c, (x.shape[0], c.shape[-1]))
            if c.shape[-1] != self.cond_dim:
                raise ContractError(f"expected condition dim {self.cond_dim}, got {c.shape[-1]}")
            parts.append(c)
        elif cond is not None:
            raise ContractError("unconditional network got a condition input")
        return np.concatenate(parts, axis=1)

    def forward(self, x, t, cond=None) -> np.ndarray:
        """Forward pass that caches activations for :meth:`backward`."""
        h = self._inputs(x, t, cond)
        cache = [h]
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            z = h @ self.params[2 * k].T + self.params[2 * k + 1]
            if k < n_layers - 1:
                cache.append(z)
                h = self._f(z)
                cache.append(h)
            else:
                h = z
        self._cache = cache
        return h

    def __call__(self, x, t, cond=None) -> np.ndarray:
        h = self._inputs(x, t, cond)
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            h = h @ self.params[2 * k].T + self.params[2 * k + 1]
            if k < n_layers - 1:
                h = self._f(h)
        return h

    def backward(self, grad_out) -> list[np.ndarray]:
        """Parameter gradients of ``sum(grad_out * output)`` for the cached pass."""
        if self._cache is None:
            raise ContractError("backward called without a cached forward pass")
        cache = self._cache
        n_layers = len(self.params) // 2
        delta = np.asarray(grad_out, dtype=float)
        grads = [None] * len(self.params)
        for k in range(n_layers - 1, -1, -1):
            h_in = cache[2 * k]
            grads[2 * k] = delta.T @ h_in
            grads[2 * k + 1] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.params[2 * k]) * self._df(cache[2 * k - 1])
        return grads


def mlp_forward(model: Mlp, x, t, cond=None) -> np.ndarray:
    return model.forward(x, t, cond)


def mlp_backward(model: Mlp, grad_out) -> list[np.ndarray]:
    return model.backward(grad_out)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 128
    iterations: int = 1000
    ema_rate: float = 0.999
    seed: int = 0
    weighting: str = "likelihood"

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.weighting not in ("likelihood", "identity"):
            raise ContractError(f"unknown weighting {self.weighting!r}")
        if not self.lr > 0 or self.batch_size < 1 or self.iterations < 0:
            raise ContractError("lr and batch_size must be positive, iterations >= 0")
        if not 0 < self.ema_rate < 1:
            raise ContractError("ema_rate must lie in (0, 1)")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ContractError("betas must lie in [0, 1)")
        self.betas = (float(b1), float(b2))


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        c1 = 1.0 - self.b1 ** self.k
        c2 = 1.0 - self.b2 ** self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Sgd:
    def __init__(self, params, lr, betas=None):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


@dataclass
class TrainResult:
    model: Mlp
    ema: Mlp
    losses: np.ndarray = field(repr=False)


Objective = Callable[[Mlp, np.random.Generator], "tuple[float, list[np.ndarray]]"]


def fit(model: Mlp, objective: Objective, config: TrainConfig) -> TrainResult:
    """Run ``config.iterations`` optimiser steps on ``objective``.

    ``objective(model, rng)`` returns ``(loss, grads)`` for one minibatch.
    The model is trained in place; an EMA copy is maintained alongside.
    """
    (rng,) = split_streams(config.seed, 1)
    opt = (Adam if config.optimizer == "adam" else Sgd)(model.params, config.lr, config.betas)
    ema = model.copy()
    losses = np.empty(config.iterations)
    rate = config.ema_rate
    for it in range(config.iterations):
        # overflow is caught by the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = objective(model, rng)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise NumericalError("training diverged", it)
        opt.step(model.params, grads)
        for e, p in zip(ema.params, model.params):
            e *= rate
            e += (1.0 - rate) * p
        losses[it] = loss
    return TrainResult(model, ema, losses)


# ---------------------------------------------------------------------------
# denoising score matching
# ---------------------------------------------------------------------------

def weighted_dsm(model, x_t, target, t, weights, cond=None, need_grad=True):
    """``1/2 mean_b sum_d weights * (target - model(x_t))^2`` and its gradients.

    ``weights`` holds the diagonal of the weighting matrix per sample.
    Gradients are returned only for models with a ``forward``/``backward``
    pair and when ``need_grad`` is set; otherwise ``None``.
    """
    trainable = need_grad and hasattr(model, "backward")
    out = model.forward(x_t, t, cond) if trainable else model(x_t, t, cond)
    v = target - out
    per_sample = 0.5 * (weights * v ** 2).sum(axis=-1)
    loss = float(per_sample.mean())
    grads = model.backward(-(weights * v) / x_t.shape[0]) if trainable else None
    return loss, grads


def kernel_score(z, s) -> np.ndarray:
    """Score of the perturbation kernel, ``-(x_t - m x0)/s^2 = -z/s``."""
    if np.any(s < KERNEL_STD_FLOOR):
        raise NumericalError(f"kernel std below {KERNEL_STD_FLOOR}; t too close to eps")
    return -z / s


def weighting_diagonal(sde: NonUniformSde, t, kind, batch: int) -> np.ndarray:
    """Diagonal of ``Lambda(t)``: ``G G^T`` ("likelihood"), ones, or a callable."""
    if callable(kind):
        w = np.asarray(kind(t), dtype=float)
    elif kind == "likelihood":
        w = sde.diffusion(t) ** 2
    elif kind == "identity":
        w = np.ones(np.shape(t) + (sde.dim,))
    else:
        raise ContractError(f"unknown weighting {kind!r}")
    return np.broadcast_to(w, (batch, sde.dim))


def sample_times(rng, n, t_lo, t_hi) -> np.ndarray:
    return t_lo + (t_hi - t_lo) * rng.random(n)


def dsm_loss(model, sde: SdeSpec | NonUniformSde, x0, weighting, rng: np.random.Generator,
             cond=None, t_range: tuple[float, float] | None = None, need_grad: bool = True):
    """Non-uniform DSM objective ``1/2 E[v^T Lambda(t) v]`` on one minibatch.

    ``t`` is uniform on ``t_range`` (default ``[eps, latest stop time]``),
    ``x_t`` comes from the exact kernels and ``v`` is the kernel score minus
    the model score.  Returns ``(loss, grads)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    nsde = as_nonuniform(sde, x0.shape[-1])
    lo, hi = t_range if t_range is not None else (
        nsde.epsilon, max(s.stop_time for s in nsde.specs))
    t = sample_times(rng, x0.shape[0], lo, hi)
    m, s = nsde.kernel(t)
    z = rng.standard_normal(x0.shape)
    x_t = m * x0 + s * z
    lam = weighting_diagonal(nsde, t, weighting, x0.shape[0])
    return weighted_dsm(model, x_t, kernel_score(z, s), t, lam, cond, need_grad)


def scalar_dsm_loss(model, sde: SdeSpec, x0, lam_fn, rng: np.random.Generator, cond=None,
                    need_grad: bool = True):
    """Uniform-diffusion objective ``1/2 E[lambda(t) ||kernel score - s||^2]``.

    Draws from ``rng`` in the same order as :func:`dsm_loss`.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    t = sample_times(rng, x0.shape[0], sde.epsilon, sde.stop_time)
    m, s = sde.kernel(t)
    m, s = m[:, None], s[:, None]
    z = rng.standard_normal(x0.shape)
    x_t = m * x0 + s * z
    lam = np.asarray(lam_fn(t), dtype=float)[:, None]
    return weighted_dsm(model, x_t, kernel_score(z, s), t, lam, cond, need_grad)


def likelihood_weight(sde: SdeSpec):
    """``lambda(t) = g(t)^2``."""
    return lambda t: sde.diffusion(t) ** 2


def train(model: Mlp, sde: SdeSpec | NonUniformSde, dataset, config: TrainConfig) -> TrainResult:
    """Likelihood-weighted (or identity-weighted) DSM training with EMA.

    ``dataset`` is a callable ``(n, rng) -> (n, dim)`` batch or an object
    with such a ``sample`` method.
    """
    draw = dataset.sample if hasattr(dataset, "sample") else dataset
    nsde = as_nonuniform(sde, model.input_dim)

    def objective(net, rng):
        batch = np.asarray(draw(config.batch_size, rng), dtype=float).reshape(config.batch_size, -1)
        return dsm_loss(net, nsde, batch, config.weighting, rng)

    return fit(model, objective, config)
