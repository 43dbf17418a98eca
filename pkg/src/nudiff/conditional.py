"""Conditional score estimators: CDE, CDiffE and CMDE.

* CDE keeps the condition ``y`` clean and diffuses only ``x``; the network
  sees ``(x_t, y, t)``.
* CDiffE diffuses ``z = (x, y)`` with one SDE and reads the conditional
  score off the first ``n_x`` entries of the joint score.
* CMDE diffuses ``y`` with the same drift but a smaller diffusion
  coefficient, ``g_y = c g_x``.  ``c = 1`` is CDiffE and ``c -> 0``
  approaches CDE.  Its likelihood weighting is
  ``diag(g_x^2, ..., g_x^2, g_y^2, ..., g_y^2)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr

from .errors import ContractError
from .score_models import (
    AnalyticGaussian,
    Mlp,
    TrainConfig,
    TrainResult,
    dsm_loss,
    fit,
    kernel_score,
    sample_times,
    scalar_dsm_loss,
    weighted_dsm,
)
from .sde import Family, NonUniformSde, SdeSpec, TimeGrid, integrate_reverse, sample_prior
from .synthdata import JointGaussian


class Estimator(str, enum.Enum):
    CDE = "cde"
    CDIFFE = "cdiffe"
    CMDE = "cmde"


@dataclass(frozen=True)
class CondEstimatorSpec:
    kind: Estimator
    n_x: int
    n_y: int
    sde_x: SdeSpec
    sde_y: SdeSpec | None = None
    weighting: str = "likelihood"

    def __post_init__(self):
        object.__setattr__(self, "kind", Estimator(self.kind))
        if self.n_x < 1 or self.n_y < 1:
            raise ContractError("n_x and n_y must be positive")
        if self.weighting not in ("likelihood", "identity"):
            raise ContractError(f"unknown weighting {self.weighting!r}")
        if self.kind is Estimator.CDE and self.sde_y is not None:
            raise ContractError("CDE keeps y clean; sde_y must be None")
        if self.kind is Estimator.CDIFFE and self.sde_y != self.sde_x:
            raise ContractError("CDiffE diffuses y with the SDE of x")
        if self.kind is Estimator.CMDE and self.sde_y is None:
            raise ContractError("CMDE needs an SDE for y")

    @property
    def joint_sde(self) -> NonUniformSde:
        if self.sde_y is None:
            raise ContractError("CDE has no joint SDE")
        return NonUniformSde.from_blocks([(self.n_x, self.sde_x), (self.n_y, self.sde_y)])


def condition_noise_scale(sde_x: SdeSpec, sigma_y_max: float) -> float:
    """Ratio ``g_y/g_x`` giving a condition SDE with maximal noise ``sigma_y_max``.

    For VE this is relative to ``sigma_max``; for VP families relative to
    the unit stationary std.
    """
    if not sigma_y_max > 0:
        raise ContractError("sigma_y_max must be positive")
    ref = sde_x.sigma_max if sde_x.family is Family.VE else 1.0
    return sigma_y_max / ref


def make_estimator(kind, n_x: int, n_y: int, sde_x: SdeSpec, sigma_y_max: float = 1.0,
                   weighting: str = "likelihood") -> CondEstimatorSpec:
    kind = Estimator(kind)
    if kind is Estimator.CDE:
        sde_y = None
    elif kind is Estimator.CDIFFE:
        sde_y = sde_x
    else:
        scale = condition_noise_scale(sde_x, sigma_y_max) * sde_x.noise_scale
        sde_y = replace(sde_x, noise_scale=scale)
    return CondEstimatorSpec(kind, n_x, n_y, sde_x, sde_y, weighting)


def likelihood_weighting(spec: CondEstimatorSpec, t) -> np.ndarray:
    """Diagonal of the CMDE likelihood weighting matrix at ``t``."""
    return spec.joint_sde.diffusion(t) ** 2


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _paired(x0, y):
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x0.shape[0] != y.shape[0]:
        raise ContractError(f"unpaired batch: {x0.shape[0]} targets, {y.shape[0]} conditions")
    return x0, y


def cde_loss(model, sde_x: SdeSpec, x0, y, rng: np.random.Generator, weighting="likelihood",
             need_grad: bool = True):
    """``1/2 E[lambda(t) ||grad log p(x_t|x_0) - s(x_t, y, t)||^2]`` with clean ``y``."""
    x0, y = _paired(x0, y)
    t = sample_times(rng, x0.shape[0], sde_x.epsilon, sde_x.stop_time)
    m, s = sde_x.kernel(t)
    m, s = m[:, None], s[:, None]
    z = rng.standard_normal(x0.shape)
    x_t = m * x0 + s * z
    if callable(weighting):
        lam = np.asarray(weighting(t), dtype=float)[:, None]
    elif weighting == "likelihood":
        lam = sde_x.diffusion(t)[:, None] ** 2
    elif weighting == "identity":
        lam = np.ones_like(s)
    else:
        raise ContractError(f"unknown weighting {weighting!r}")
    return weighted_dsm(model, x_t, kernel_score(z, s), t, lam, y, need_grad)


def joint_dsm_loss(model, spec: CondEstimatorSpec, x0, y0, rng: np.random.Generator,
                   need_grad: bool = True):
    """Diffusive objective on ``z = (x, y)`` weighted by ``spec.weighting``."""
    if spec.kind is Estimator.CDE:
        raise ContractError("joint_dsm_loss applies to CDiffE and CMDE only")
    x0, y0 = _paired(x0, y0)
    z0 = np.concatenate([x0, y0], axis=1)
    return dsm_loss(model, spec.joint_sde, z0, spec.weighting, rng, need_grad=need_grad)


def cdiffe_scalar_loss(model, sde: SdeSpec, x0, y0, rng: np.random.Generator,
                       need_grad: bool = True):
    """CDiffE objective with the scalar likelihood weight ``g(t)^2``."""
    x0, y0 = _paired(x0, y0)
    z0 = np.concatenate([x0, y0], axis=1)
    return scalar_dsm_loss(model, sde, z0, lambda t: sde.diffusion(t) ** 2, rng,
                           need_grad=need_grad)


def extract_conditional_score(joint_score, n_x: int) -> np.ndarray:
    """First ``n_x`` entries of a joint score: ``grad_x log p(x_t, y_t) = grad_x log p(x_t | y_t)``."""
    joint_score = np.asarray(joint_score)
    if not 1 <= n_x <= joint_score.shape[-1]:
        raise ContractError(f"n_x={n_x} incompatible with joint length {joint_score.shape[-1]}")
    return joint_score[..., :n_x]


# ---------------------------------------------------------------------------
# Gaussian oracles
# ---------------------------------------------------------------------------

class AnalyticConditionalScore:
    """Exact ``grad log p(x_t | y)`` for jointly Gaussian ``(x, y)`` (CDE target)."""

    def __init__(self, joint: JointGaussian, sde_x: SdeSpec):
        self.joint = joint
        self.sde_x = sde_x
        self.input_dim = joint.n_x
        self.cond_dim = joint.n_y

    def __call__(self, x, t, cond=None):
        if cond is None:
            raise ContractError("conditional score needs y")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.broadcast_to(np.atleast_2d(np.asarray(cond, dtype=float)), (x.shape[0], self.cond_dim))
        mu, cov = self.joint.conditional(y)
        m, s = self.sde_x.kernel(t)
        m = np.broadcast_to(np.asarray(m, dtype=float), (x.shape[0],))[:, None]
        s = np.broadcast_to(np.asarray(s, dtype=float), (x.shape[0],))[:, None]
        cov_t = (m ** 2)[..., None] * cov + (s ** 2)[..., None] * np.eye(self.input_dim)
        return -np.linalg.solve(cov_t, (x - m * mu)[..., None])[..., 0]


def analytic_joint_score(joint: JointGaussian, spec: CondEstimatorSpec) -> AnalyticGaussian:
    """Exact joint score of the diffused ``z_t`` (CDiffE/CMDE target)."""
    return AnalyticGaussian(joint.mean, joint.cov, spec.joint_sde)


class ConditionalFromJoint:
    """Wrap a joint score model as ``(x_t, y_t, t) -> grad_x log p(x_t | y_t)``."""

    def __init__(self, joint_model, n_x: int):
        self.joint_model = joint_model
        self.n_x = n_x

    def __call__(self, x, t, cond=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.broadcast_to(np.atleast_2d(np.asarray(cond, dtype=float)), (x.shape[0], np.shape(cond)[-1]))
        return extract_conditional_score(self.joint_model(np.concatenate([x, y], axis=1), t), self.n_x)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def conditional_score_fn(spec: CondEstimatorSpec, model, y, rng: np.random.Generator):
    """Score of ``x_t`` used by the sampler.

    CDE feeds clean ``y``.  CDiffE/CMDE draw a fresh ``y_t ~ p(y_t | y)``
    at every call and keep the first ``n_x`` entries of the joint score.
    """
    y = np.asarray(y, dtype=float)
    if spec.kind is Estimator.CDE:
        return lambda x, t: model(x, t, y)
    sde_y = spec.sde_y
    view = model if isinstance(model, ConditionalFromJoint) else ConditionalFromJoint(model, spec.n_x)

    def score(x, t):
        m, s = sde_y.kernel(t)
        y_t = m * y + s * rng.standard_normal(y.shape)
        return view(x, t, y_t)

    return score


def conditional_sample(spec: CondEstimatorSpec, model, y, grid: TimeGrid,
                       rng: np.random.Generator, n_chains: int | None = None) -> np.ndarray:
    """Draw ``x ~ p(x | y)`` by integrating the conditional reverse SDE.

    ``y`` is ``(n_y,)`` (shared by ``n_chains`` chains) or ``(B, n_y)``.
    Only ``x`` is integrated; ``y`` is never evolved.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ContractError("condition must be finite")
    if y.ndim == 1:
        y = np.broadcast_to(y, (n_chains or 1, y.size))
    if y.shape[-1] != spec.n_y:
        raise ContractError(f"condition has {y.shape[-1]} entries, expected {spec.n_y}")
    y = np.ascontiguousarray(y)
    sde = NonUniformSde.uniform(spec.sde_x, spec.n_x)
    x = sample_prior(sde, y.shape[0], rng)
    return integrate_reverse(sde, conditional_score_fn(spec, model, y, rng), x, grid, rng)


# ---------------------------------------------------------------------------
# approximation error and blurring lemma
# ---------------------------------------------------------------------------

def _x_given_y_t(joint: JointGaussian, spec: CondEstimatorSpec, t, y_t):
    """Mean rows and covariance of ``x_t | y_t`` (both diffused)."""
    mx, my, sxx, sxy, syy = joint.blocks
    mx_, sx_ = spec.sde_x.kernel(t)
    my_, sy_ = spec.sde_y.kernel(t)
    cxx = mx_ ** 2 * sxx + sx_ ** 2 * np.eye(len(mx))
    cxy = mx_ * my_ * sxy
    cyy = my_ ** 2 * syy + sy_ ** 2 * np.eye(len(my))
    gain = np.linalg.solve(cyy, cxy.T).T
    return mx_ * mx + (y_t - my_ * my) @ gain.T, cxx - gain @ cxy.T


def cmde_approx_error(spec: CondEstimatorSpec, joint, t: float, y, n_mc: int,
                      rng: np.random.Generator, x_grid=None) -> float:
    """Monte Carlo ``E_{y_t ~ p(y_t|y)} mean_grid ||grad log p(x_t|y_t) - grad log p(x_t|y)||^2``.

    The ``x_t`` grid defaults to 21 points (per axis direction) spanning
    two standard deviations of ``p(x_t | y)``.  Gaussian joints only.
    """
    if not isinstance(joint, JointGaussian):
        raise ContractError("the approximation-error oracle needs a JointGaussian")
    if joint.n_x != spec.n_x or joint.n_y != spec.n_y:
        raise ContractError("joint and estimator dimensions differ")
    if spec.kind is Estimator.CDE:
        return 0.0
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu_y, cov_y = joint.conditional(y[None])
    m, s = spec.sde_x.kernel(t)
    mean_t = m * mu_y[0]
    cov_t = m ** 2 * cov_y + s ** 2 * np.eye(spec.n_x)
    if x_grid is None:
        sd = np.sqrt(np.diag(cov_t))
        u = np.linspace(-2.0, 2.0, 21)
        x_grid = mean_t + u[:, None] * sd
    x_grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    target = -np.linalg.solve(cov_t, (x_grid - mean_t).T).T

    my_, sy_ = spec.sde_y.kernel(t)
    y_t = my_ * y + sy_ * rng.standard_normal((n_mc, y.size))
    mu_c, cov_c = _x_given_y_t(joint, spec, t, y_t)
    prec_c = np.linalg.inv(cov_c)
    diff = x_grid[None, :, :] - mu_c[:, None, :]
    est = -diff @ prec_c.T
    return float(np.mean(np.sum((est - target[None]) ** 2, axis=-1)))


def _normal_pdf(x, mean, std):
    return np.exp(-0.5 * ((x - mean) / std) ** 2) / (std * math.sqrt(2 * math.pi))


def blurring_identity_check(table, x_support, y_support, sde_y: SdeSpec, t: float, x_t: float,
                            sde_x: SdeSpec | None = None, grid=None) -> float:
    """Max gap between two routes to ``p(y_t | x_t)`` for a discrete joint.

    Route one marginalises the joint density ``p(x_t, y_t)`` and normalises
    by quadrature over ``y_t``.  Route two forms the discrete law
    ``p(y | x_t)`` by Bayes and convolves its scaled atoms with the
    Gaussian kernel of width ``s_y(t)``.  ``grid`` defaults to 101 points.
    """
    sde_x = sde_x or sde_y
    P = np.asarray(table, dtype=float)
    xs = np.asarray(x_support, dtype=float)
    ys = np.asarray(y_support, dtype=float)
    if P.shape != (xs.size, ys.size) or np.any(P < 0) or not math.isclose(P.sum(), 1.0, rel_tol=1e-12):
        raise ContractError("table must be a normalised |x| by |y| probability array")
    mx, sx = (float(v) for v in sde_x.kernel(t))
    my, sy = (float(v) for v in sde_y.kernel(t))
    if grid is None:
        grid = np.linspace(my * ys.min() - 4 * sy, my * ys.max() + 4 * sy, 101)
    grid = np.asarray(grid, dtype=float)

    lik_x = _normal_pdf(x_t, mx * xs, sx)

    def joint_density(yt):
        return float(np.sum(P * lik_x[:, None] * _normal_pdf(yt, my * ys[None, :], sy)))

    lo, hi = my * ys.min() - 12 * sy, my * ys.max() + 12 * sy
    pts = list(my * ys)
    norm, _ = quad(joint_density, lo, hi, points=pts, limit=200, epsabs=1e-14, epsrel=1e-12)
    direct = np.array([joint_density(v) for v in grid]) / norm

    post_y = (P * lik_x[:, None]).sum(axis=0)
    post_y = post_y / post_y.sum()
    blurred = np.sum(post_y[None, :] * _normal_pdf(grid[:, None], my * ys[None, :], sy), axis=1)
    return float(np.max(np.abs(direct - blurred)))


# ---------------------------------------------------------------------------
# discrete toy and tabulated CDE minimiser
# ---------------------------------------------------------------------------

@dataclass
class DiscreteJoint:
    """Finite joint law of ``(x, y)`` given as a probability table."""

    x_support: np.ndarray
    y_support: np.ndarray
    table: np.ndarray

    def __post_init__(self):
        self.x_support = np.asarray(self.x_support, dtype=float)
        self.y_support = np.asarray(self.y_support, dtype=float)
        self.table = np.asarray(self.table, dtype=float)
        if self.table.shape != (self.x_support.size, self.y_support.size):
            raise ContractError("table shape must be |x| by |y|")
        if np.any(self.table < 0) or not math.isclose(self.table.sum(), 1.0, rel_tol=1e-12):
            raise ContractError("table must be a probability array")

    @classmethod
    def copy_toy(cls) -> DiscreteJoint:
        """``x`` uniform on ``{-1, +1}`` and ``y = x``."""
        return cls([-1.0, 1.0], [-1.0, 1.0], [[0.5, 0.0], [0.0, 0.5]])

    @classmethod
    def flip_toy(cls, flip: float = 0.2) -> DiscreteJoint:
        """``x`` uniform on ``{-1, +1}``; ``y = x`` except with probability ``flip``."""
        a, b = 0.5 * (1 - flip), 0.5 * flip
        return cls([-1.0, 1.0], [-1.0, 1.0], [[a, b], [b, a]])

    def sample(self, n, rng):
        flat = rng.choice(self.table.size, size=n, p=self.table.ravel())
        i, j = np.unravel_index(flat, self.table.shape)
        return self.x_support[i], j

    def posterior_x(self, j) -> np.ndarray:
        col = self.table[:, j]
        return col / col.sum()


@dataclass
class TabulatedFit:
    edges: np.ndarray
    times: tuple[float, ...]
    table: np.ndarray       # (n_times, n_y, n_bins), nan where a bin is empty
    oracle: np.ndarray      # bin-averaged grad log p(x_t | y)
    mass: np.ndarray        # P(bin | y)
    sup_error: float


def cde_tabulated_minimizer(toy: DiscreteJoint, sde_x: SdeSpec, times, n_samples: int,
                            rng: np.random.Generator, edges=None,
                            min_mass: float = 5e-3) -> TabulatedFit:
    """Minimise the CDE objective over piecewise-constant score tables.

    At each fixed ``t`` the least-squares minimiser over functions constant
    on ``x_t``-bins (per ``y``) is the bin mean of the kernel score.  The
    oracle is the exact bin average of ``grad log p(x_t | y)``, which for a
    Gaussian mixture is ``(p(b_hi|y) - p(b_lo|y)) / P(bin|y)``.  The sup
    error is taken over bins holding at least ``min_mass`` probability.
    """
    edges = np.linspace(-4.0, 4.0, 81) if edges is None else np.asarray(edges, dtype=float)
    nb = edges.size - 1
    ny = toy.y_support.size
    table = np.full((len(times), ny, nb), np.nan)
    oracle = np.empty_like(table)
    mass = np.empty_like(table)
    for k, t in enumerate(times):
        m, s = (float(v) for v in sde_x.kernel(t))
        x0, j = toy.sample(n_samples, rng)
        z = rng.standard_normal(n_samples)
        x_t = m * x0 + s * z
        target = kernel_score(z, s)
        b = np.searchsorted(edges, x_t, side="right") - 1
        inside = (b >= 0) & (b < nb)
        for jj in range(ny):
            sel = inside & (j == jj)
            cnt = np.bincount(b[sel], minlength=nb)
            tot = np.bincount(b[sel], weights=target[sel], minlength=nb)
            with np.errstate(invalid="ignore", divide="ignore"):
                table[k, jj] = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
            w = toy.posterior_x(jj)
            dens = (w[None, :] * _normal_pdf(edges[:, None], m * toy.x_support[None, :], s)).sum(1)
            cdf = (w[None, :] * ndtr((edges[:, None] - m * toy.x_support[None, :]) / s)).sum(1)
            pm = np.diff(cdf)
            mass[k, jj] = pm
            with np.errstate(invalid="ignore", divide="ignore"):
                oracle[k, jj] = np.diff(dens) / pm
    bulk = mass >= min_mass
    err = np.abs(table - oracle)[bulk]
    sup = float(np.max(err)) if err.size and np.all(np.isfinite(err)) else math.inf
    return TabulatedFit(edges, tuple(times), table, oracle, mass, sup)


# ---------------------------------------------------------------------------
# training helpers
# ---------------------------------------------------------------------------

def train_cde(model: Mlp, sde_x: SdeSpec, data, config: TrainConfig) -> TrainResult:
    def objective(net, rng):
        x0, y = data.sample(config.batch_size, rng)
        return cde_loss(net, sde_x, x0, y, rng, config.weighting)

    return fit(model, objective, config)


def train_joint(model: Mlp, spec: CondEstimatorSpec, data, config: TrainConfig) -> TrainResult:
    spec = CondEstimatorSpec(spec.kind, spec.n_x, spec.n_y, spec.sde_x, spec.sde_y, config.weighting)

    def objective(net, rng):
        x0, y0 = data.sample(config.batch_size, rng)
        return joint_dsm_loss(net, spec, x0, y0, rng)

    return fit(model, objective, config)


def make_conditional_mlp(spec: CondEstimatorSpec, hidden=(64, 64), activation="silu",
                         rng=None) -> Mlp:
    """CDE nets take ``y`` as a condition input; diffusive nets score ``z``."""
    if spec.kind is Estimator.CDE:
        return Mlp(spec.n_x, hidden, cond_dim=spec.n_y, activation=activation, rng=rng)
    return Mlp(spec.n_x + spec.n_y, hidden, activation=activation, rng=rng)


def as_conditional_model(spec: CondEstimatorSpec, model):
    """Uniform ``(x_t, y_or_y_t, t) -> score of x_t`` view of a trained model."""
    return model if spec.kind is Estimator.CDE else ConditionalFromJoint(model, spec.n_x)
