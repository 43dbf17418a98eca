"""Forward SDE families, perturbation kernels and reverse-time samplers.

Three linear SDE families are supported, each with a closed-form Gaussian
transition ``p(x_t | x_0) = N(m(t) x_0, s(t)^2 I)``:

* ``VE``: zero drift, ``sigma(t) = sigma_min (sigma_max/sigma_min)^(t/T)``
  and ``g(t) = sigma(t) sqrt(2 log(sigma_max/sigma_min) / T)``.  The exact
  kernel variance, measured from the start time ``eps``, is
  ``sigma(t)^2 - sigma(eps)^2``; ``ve_kernel="sigma"`` selects the common
  ``sigma(t)^2`` approximation instead.
* ``VP_LINEAR``: ``beta(t) = beta_min + (beta_max - beta_min) t/T``,
  ``f = -beta/2 x``, ``g = sqrt(beta)``.  ``m(t) = exp(-int_0^t beta / 2)``,
  so ``s(eps)^2 ~ beta_min eps`` is the small-time residual.
* ``VP_LOG_SNR``: variance preserving with ``log SNR`` linear in ``t`` from
  ``log snr_max`` at ``eps`` to ``log snr_min`` at ``terminal_time``.  With
  ``m^2 = sigmoid(log SNR)`` the SDE has ``beta(t) = |d log SNR/dt| s(t)^2``.
  The small-time residual is ``s(eps)^2 = 1/(1 + snr_max)``.  Past the
  terminal time the component is frozen: no drift, no noise, kernel held.

``noise_scale`` multiplies ``g`` (and therefore ``s``) while leaving the
drift untouched; it is how slower-diffusing condition SDEs are built.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import ContractError, DomainError, NumericalError

ScoreFn = Callable[[np.ndarray, "float | np.ndarray"], np.ndarray]

_TIME_TOL = 1e-12


class Family(str, enum.Enum):
    VE = "ve"
    VP_LINEAR = "vp_linear"
    VP_LOG_SNR = "vp_log_snr"


@dataclass(frozen=True)
class SdeSpec:
    """One forward SDE family with its parameters.

    Use the :meth:`ve`, :meth:`vp_linear` and :meth:`vp_log_snr`
    constructors; parameters belonging to other families are ignored.
    """

    family: Family
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    snr_max: float = 1e4
    snr_min: float = 1e-2
    terminal_time: float | None = None
    horizon: float = 1.0
    epsilon: float = 1e-5
    noise_scale: float = 1.0
    ve_kernel: str = "exact"

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not self.horizon > 0:
            raise ContractError("horizon must be positive")
        if not 0 < self.epsilon < self.horizon:
            raise ContractError(f"epsilon must lie in (0, horizon), got {self.epsilon}")
        if not self.noise_scale > 0:
            raise ContractError("noise_scale must be positive")
        fam = self.family
        if fam is Family.VE:
            if not 0 < self.sigma_min < self.sigma_max:
                raise ContractError("VE requires 0 < sigma_min < sigma_max")
            if self.ve_kernel not in ("exact", "sigma"):
                raise ContractError("ve_kernel must be 'exact' or 'sigma'")
        elif fam is Family.VP_LINEAR:
            if not 0 < self.beta_min < self.beta_max:
                raise ContractError("VP_LINEAR requires 0 < beta_min < beta_max")
        else:
            if not 0 < self.snr_min < self.snr_max:
                raise ContractError("VP_LOG_SNR requires 0 < snr_min < snr_max")
            tc = self.horizon if self.terminal_time is None else self.terminal_time
            if not self.epsilon < tc <= self.horizon + _TIME_TOL:
                raise ContractError(
                    f"terminal_time must lie in (epsilon, horizon], got {tc}")
            object.__setattr__(self, "terminal_time", float(tc))

    # -- constructors -----------------------------------------------------
    @classmethod
    def ve(cls, sigma_min=0.01, sigma_max=50.0, *, horizon=1.0, epsilon=1e-5, **kw) -> SdeSpec:
        return cls(Family.VE, sigma_min=sigma_min, sigma_max=sigma_max,
                   horizon=horizon, epsilon=epsilon, **kw)

    @classmethod
    def vp_linear(cls, beta_min=0.1, beta_max=20.0, *, horizon=1.0, epsilon=1e-5, **kw) -> SdeSpec:
        return cls(Family.VP_LINEAR, beta_min=beta_min, beta_max=beta_max,
                   horizon=horizon, epsilon=epsilon, **kw)

    @classmethod
    def vp_log_snr(cls, snr_max=1e4, snr_min=1e-2, terminal_time=None, *, horizon=1.0,
                   epsilon=1e-5, **kw) -> SdeSpec:
        return cls(Family.VP_LOG_SNR, snr_max=snr_max, snr_min=snr_min,
                   terminal_time=terminal_time, horizon=horizon, epsilon=epsilon, **kw)

    # -- time domain --------------------------------------------------------
    @property
    def stop_time(self) -> float:
        """Time after which the component no longer diffuses."""
        if self.family is Family.VP_LOG_SNR:
            return self.terminal_time
        return self.horizon

    def check_time(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(~np.isfinite(t)) or np.any(t < self.epsilon - _TIME_TOL) \
                or np.any(t > self.horizon + _TIME_TOL):
            bad = t[(t < self.epsilon - _TIME_TOL) | (t > self.horizon + _TIME_TOL) | ~np.isfinite(t)]
            raise DomainError(
                f"time {bad.ravel()[0]!r} outside [{self.epsilon}, {self.horizon}] "
                f"for {self.family.value}")
        return t

    # -- coefficients -------------------------------------------------------
    @property
    def log_snr_slope(self) -> float:
        """d log SNR / dt on the diffusing range (VP_LOG_SNR only)."""
        if self.family is not Family.VP_LOG_SNR:
            raise ContractError("log-SNR slope is defined for VP_LOG_SNR only")
        return (math.log(self.snr_min) - math.log(self.snr_max)) / (self.terminal_time - self.epsilon)

    def _ve_sigma(self, t):
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** (t / self.horizon)

    def _vp_integral(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t ** 2 / self.horizon

    def _log_snr_raw(self, t):
        tau = np.clip(t, self.epsilon, self.terminal_time)
        return math.log(self.snr_max) + (tau - self.epsilon) * self.log_snr_slope

    def kernel(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(m(t), s(t))`` of the perturbation kernel."""
        t = self.check_time(t)
        c = self.noise_scale
        if self.family is Family.VE:
            sig = self._ve_sigma(t)
            if self.ve_kernel == "exact":
                var = sig ** 2 - self._ve_sigma(self.epsilon) ** 2
                s = c * np.sqrt(np.maximum(var, 0.0))
            else:
                s = c * sig
            return np.ones_like(t), s
        if self.family is Family.VP_LINEAR:
            b = self._vp_integral(t)
            return np.exp(-0.5 * b), c * np.sqrt(-np.expm1(-b))
        ls = self._log_snr_raw(t)
        return np.sqrt(expit(ls)), c * np.sqrt(expit(-ls))

    def log_snr(self, t) -> np.ndarray:
        """``log(m^2/s^2)``; ``+inf`` where the kernel has zero noise."""
        t = self.check_time(t)
        if self.family is Family.VP_LOG_SNR:
            return self._log_snr_raw(t) - 2.0 * math.log(self.noise_scale)
        m, s = self.kernel(t)
        with np.errstate(divide="ignore"):
            return np.where(s > 0, 2.0 * (np.log(m) - np.log(np.where(s > 0, s, 1.0))), np.inf)

    def snr(self, t) -> np.ndarray:
        return np.exp(self.log_snr(t))

    def beta(self, t) -> np.ndarray:
        """Rate of the VP drift ``f = -beta/2 x`` (zero for VE)."""
        t = self.check_time(t)
        if self.family is Family.VE:
            return np.zeros_like(t)
        if self.family is Family.VP_LINEAR:
            return self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon
        active = t <= self.terminal_time + _TIME_TOL
        return np.where(active, -self.log_snr_slope * expit(-self._log_snr_raw(t)), 0.0)

    def drift_coef(self, t) -> np.ndarray:
        """Linear drift coefficient: ``f(x, t) = drift_coef(t) * x``."""
        return -0.5 * self.beta(t)

    def diffusion(self, t) -> np.ndarray:
        t = self.check_time(t)
        c = self.noise_scale
        if self.family is Family.VE:
            rate = 2.0 * math.log(self.sigma_max / self.sigma_min) / self.horizon
            return c * self._ve_sigma(t) * math.sqrt(rate)
        return c * np.sqrt(self.beta(t))

    @property
    def prior_std(self) -> float:
        """Std of the sampling prior: ``s(T)`` for VE, the stationary std for VP."""
        if self.family is Family.VE:
            return float(self.kernel(self.horizon)[1])
        return float(self.noise_scale)


def perturbation_kernel(sde: SdeSpec, t):
    """Closed-form ``(m(t), s(t))``; raises :class:`DomainError` off-range."""
    m, s = sde.kernel(t)
    if np.ndim(m) == 0:
        return float(m), float(s)
    return m, s


def snr(sde: SdeSpec, t):
    """Signal-to-noise ratio ``m^2/s^2``; ``inf`` where ``s(t) = 0``."""
    out = sde.snr(t)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class NonUniformSde:
    """Block-diagonal SDE: component ``k`` governs ``x[ranges[k]]``.

    ``G(t)`` is diagonal; each entry is the owning component's ``g(t)``.
    """

    components: tuple[tuple[slice, SdeSpec], ...]
    dim: int = field(init=False)

    def __post_init__(self):
        comps = []
        pos = 0
        for rng_, spec in self.components:
            if isinstance(rng_, slice):
                start, stop = rng_.start or 0, rng_.stop
            else:
                start, stop = rng_
            if start != pos or stop is None or stop <= start:
                raise ContractError(
                    f"component ranges must partition the index set contiguously; "
                    f"got [{start}, {stop}) after position {pos}")
            if not isinstance(spec, SdeSpec):
                raise ContractError("components must pair index ranges with SdeSpec")
            comps.append((slice(start, stop), spec))
            pos = stop
        if not comps:
            raise ContractError("at least one component required")
        object.__setattr__(self, "components", tuple(comps))
        object.__setattr__(self, "dim", pos)

    @classmethod
    def uniform(cls, sde: SdeSpec, dim: int) -> NonUniformSde:
        return cls(((slice(0, dim), sde),))

    @classmethod
    def from_blocks(cls, blocks: Sequence[tuple[int, SdeSpec]]) -> NonUniformSde:
        """Build from ``(size, spec)`` pairs laid out consecutively."""
        comps, pos = [], 0
        for size, spec in blocks:
            comps.append((slice(pos, pos + size), spec))
            pos += size
        return cls(tuple(comps))

    @property
    def epsilon(self) -> float:
        return max(spec.epsilon for _, spec in self.components)

    @property
    def horizon(self) -> float:
        return min(spec.horizon for _, spec in self.components)

    @property
    def specs(self) -> list[SdeSpec]:
        return [spec for _, spec in self.components]

    def restrict(self, n: int) -> NonUniformSde:
        """The SDE of the leading ``n`` coordinates (must end on a block edge)."""
        comps = []
        for sl, spec in self.components:
            if sl.start >= n:
                break
            if sl.stop > n:
                raise ContractError(f"prefix length {n} splits a component")
            comps.append((sl, spec))
        return NonUniformSde(tuple(comps))

    def _assemble(self, t, fn) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.empty(t.shape + (self.dim,))
        for sl, spec in self.components:
            out[..., sl] = np.asarray(fn(spec, t))[..., None]
        return out

    def kernel(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate ``(m, s)`` with shape ``t.shape + (dim,)``."""
        m = self._assemble(t, lambda sp, tt: sp.kernel(tt)[0])
        s = self._assemble(t, lambda sp, tt: sp.kernel(tt)[1])
        return m, s

    def diffusion(self, t) -> np.ndarray:
        """Diagonal of ``G(t)``."""
        return self._assemble(t, lambda sp, tt: sp.diffusion(tt))

    def drift_coef(self, t) -> np.ndarray:
        return self._assemble(t, lambda sp, tt: sp.drift_coef(tt))

    def active(self, t) -> np.ndarray:
        return self._assemble(t, lambda sp, tt: np.asarray(tt) <= sp.stop_time + _TIME_TOL)

    def prior_std(self) -> np.ndarray:
        out = np.empty(self.dim)
        for sl, spec in self.components:
            out[sl] = spec.prior_std
        return out


def as_nonuniform(sde: SdeSpec | NonUniformSde, dim: int) -> NonUniformSde:
    if isinstance(sde, NonUniformSde):
        if sde.dim != dim:
            raise ContractError(f"state has dimension {dim}, SDE covers {sde.dim}")
        return sde
    return NonUniformSde.uniform(sde, dim)


def diffuse(sde: SdeSpec | NonUniformSde, x0, t, rng: np.random.Generator,
            return_noise: bool = False):
    """Draw ``x_t ~ p(x_t | x_0)`` exactly from the per-component kernels.

    ``x0`` has shape ``(..., dim)``; ``t`` is a scalar or broadcasts against
    the leading axes.  With ``return_noise`` the standard normal draw ``z``
    is returned too (``x_t = m x0 + s z``).
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ContractError("x0 must be finite")
    nsde = as_nonuniform(sde, x0.shape[-1])
    m, s = nsde.kernel(t)
    z = rng.standard_normal(x0.shape)
    xt = m * x0 + s * z
    return (xt, z) if return_noise else xt


def sample_prior(sde: SdeSpec | NonUniformSde, n: int, rng: np.random.Generator,
                 dim: int | None = None) -> np.ndarray:
    """``n`` draws from the sampling prior, shape ``(n, dim)``."""
    if isinstance(sde, SdeSpec):
        if dim is None:
            raise ContractError("dim required for a scalar SdeSpec")
        sde = NonUniformSde.uniform(sde, dim)
    return rng.standard_normal((n, sde.dim)) * sde.prior_std()


def _check_finite(arr: np.ndarray, what: str, step: int | None = None):
    if not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.isfinite(np.asarray(arr)))[0][0]) if np.ndim(arr) else 0
        raise NumericalError(f"non-finite {what} (first bad row {bad})", step)


def reverse_drift(sde: SdeSpec | NonUniformSde, score: ScoreFn, x, t) -> np.ndarray:
    """``f(x, t) - G(t) G(t)^T score(x, t)``."""
    x = np.asarray(x, dtype=float)
    nsde = as_nonuniform(sde, x.shape[-1])
    sc = np.asarray(score(x, t), dtype=float)
    _check_finite(sc, f"score at t={float(np.max(t)):.6g}")
    g = nsde.diffusion(t)
    return nsde.drift_coef(t) * x - g ** 2 * sc


class Scheme(str, enum.Enum):
    EULER_MARUYAMA = "euler_maruyama"
    PROBABILITY_FLOW = "probability_flow"


@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing integration times with the stepping scheme."""

    points: tuple[float, ...]
    scheme: Scheme = Scheme.EULER_MARUYAMA

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        if len(pts) < 2:
            raise ContractError("a time grid needs at least one step")
        if any(b >= a for a, b in zip(pts, pts[1:])):
            raise ContractError("time grid must be strictly decreasing")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @classmethod
    def linear(cls, t_start: float, t_end: float, n_steps: int,
               scheme: Scheme | str = Scheme.EULER_MARUYAMA) -> TimeGrid:
        if n_steps < 1:
            raise ContractError("n_steps must be >= 1")
        return cls(tuple(np.linspace(t_start, t_end, n_steps + 1)), Scheme(scheme))

    @property
    def n_steps(self) -> int:
        return len(self.points) - 1

    def as_dict(self) -> dict:
        return {"t_start": self.points[0], "t_end": self.points[-1],
                "n_steps": self.n_steps, "scheme": self.scheme.value}


def integrate_reverse(sde: SdeSpec | NonUniformSde, score: ScoreFn, x_start, grid: TimeGrid,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Integrate the reverse-time dynamics down ``grid``.

    Euler-Maruyama: ``x += (f - G G^T score) dt + G sqrt(|dt|) xi`` with
    ``dt < 0``.  Probability flow: ``x += (f - G G^T score / 2) dt``.
    Coefficients are evaluated at the left (later) end of each step.
    """
    x = np.array(x_start, dtype=float)
    _check_finite(x, "initial state")
    nsde = as_nonuniform(sde, x.shape[-1])
    for spec in nsde.specs:
        spec.check_time(grid.points[0])
        spec.check_time(grid.points[-1])
    stochastic = grid.scheme is Scheme.EULER_MARUYAMA
    if stochastic and rng is None:
        raise ContractError("Euler-Maruyama needs a random stream")
    pts = grid.points
    for k in range(grid.n_steps):
        t, dt = pts[k], pts[k + 1] - pts[k]
        g = nsde.diffusion(t)
        sc = np.asarray(score(x, t), dtype=float)
        if not np.all(np.isfinite(sc)):
            raise NumericalError(f"non-finite score at t={t:.6g}", k)
        if stochastic:
            x = x + (nsde.drift_coef(t) * x - g ** 2 * sc) * dt \
                + g * math.sqrt(-dt) * rng.standard_normal(x.shape)
        else:
            x = x + (nsde.drift_coef(t) * x - 0.5 * g ** 2 * sc) * dt
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"state blew up at t={pts[k + 1]:.6g}", k)
    return x


def tweedie_denoise(sde: SdeSpec | NonUniformSde, score: ScoreFn, x, t,
                    floor: float = 1e-8) -> np.ndarray:
    """Posterior-mean estimate ``E[x_0 | x_t] = (x + s^2 score) / m``."""
    x = np.asarray(x, dtype=float)
    nsde = as_nonuniform(sde, x.shape[-1])
    m, s = nsde.kernel(t)
    if np.any(m <= floor):
        raise NumericalError(f"mean scale m(t) below {floor} at t={t}")
    return (x + s ** 2 * np.asarray(score(x, t), dtype=float)) / m


def simulate_forward(sde: SdeSpec | NonUniformSde, x0, times: Sequence[float],
                     dt: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Fine-step Euler-Maruyama forward simulation (a kernel oracle).

    The state starts at ``eps`` drawn from the kernel there (exact: that
    law is the family's small-time residual) and is stepped forward with
    step at most ``dt``.  Returns the states at each of ``times``.
    """
    x0 = np.asarray(x0, dtype=float)
    nsde = as_nonuniform(sde, x0.shape[-1])
    t = nsde.epsilon
    x = diffuse(nsde, x0, t, rng)
    out = []
    for target in times:
        if target < t:
            raise ContractError("report times must be increasing and >= eps")
        n = max(1, math.ceil((target - t) / dt - 1e-9)) if target > t else 0
        h = (target - t) / n if n else 0.0
        for i in range(n):
            ti = t + i * h
            x = x + nsde.drift_coef(ti) * x * h + nsde.diffusion(ti) * math.sqrt(h) \
                * rng.standard_normal(x.shape)
        t = target
        out.append(x.copy())
    return out


def with_noise_scale(sde: SdeSpec, scale: float) -> SdeSpec:
    return replace(sde, noise_scale=scale)
