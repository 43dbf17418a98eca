"""Synthetic datasets and forward operators for desk-scale experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .streams import as_generator


def _check_psd(cov, name="covariance"):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise ContractError(f"{name} must be a symmetric square matrix")
    if np.min(np.linalg.eigvalsh(cov)) < -1e-12:
        raise ContractError(f"{name} must be positive semidefinite")
    return cov


def _mvn(rng, mean, cov, n):
    # eigh tolerates singular covariances
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    return mean + rng.standard_normal((n, mean.size)) @ root.T


@dataclass
class Gaussian:
    """Plain multivariate normal ``N(mean, cov)``."""

    mean: np.ndarray
    cov: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = _check_psd(self.cov)
        if self.cov.shape[0] != self.mean.size:
            raise ContractError("mean and covariance sizes differ")

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, n, rng=None):
        return _mvn(as_generator(rng if rng is not None else self.seed), self.mean, self.cov, n)


@dataclass
class Gmm2d:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        self.covs = np.asarray(self.covs, dtype=float).reshape(-1, 2, 2)
        if not (len(self.weights) == len(self.means) == len(self.covs)):
            raise ContractError("one mean and covariance per mixture weight")
        if np.any(self.weights <= 0) or not math.isclose(self.weights.sum(), 1.0, rel_tol=1e-9):
            raise ContractError("mixture weights must be positive and sum to 1")
        for c in self.covs:
            _check_psd(c)

    @classmethod
    def symmetric(cls, separation=2.0, std=0.5, seed=0) -> Gmm2d:
        """Two equally weighted modes at ``(+-separation, 0)``."""
        return cls([0.5, 0.5], [[-separation, 0.0], [separation, 0.0]],
                   [np.eye(2) * std ** 2] * 2, seed)

    dim = 2

    def sample(self, n, rng=None):
        rng = as_generator(rng if rng is not None else self.seed)
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.empty((n, 2))
        for k in range(len(self.weights)):
            idx = comp == k
            out[idx] = _mvn(rng, self.means[k], self.covs[k], int(idx.sum()))
        return out


@dataclass
class JointGaussian:
    """Jointly Gaussian target/condition pair ``z = (x, y)``; ``x = z[:n_x]``."""

    mean: np.ndarray
    cov: np.ndarray
    n_x: int
    seed: int = 0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = _check_psd(self.cov)
        if self.cov.shape[0] != self.mean.size or not 0 < self.n_x < self.mean.size:
            raise ContractError("inconsistent JointGaussian dimensions")

    @classmethod
    def standardized(cls, rho: float, seed: int = 0) -> JointGaussian:
        """1D x and y, unit variances, correlation ``rho``."""
        return cls(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]), 1, seed)

    @property
    def n_y(self) -> int:
        return self.mean.size - self.n_x

    @property
    def blocks(self):
        nx = self.n_x
        c = self.cov
        return (self.mean[:nx], self.mean[nx:], c[:nx, :nx], c[:nx, nx:], c[nx:, nx:])

    def conditional(self, y):
        """Mean (per row of ``y``) and covariance of ``x | y``."""
        mx, my, sxx, sxy, syy = self.blocks
        y = np.atleast_2d(np.asarray(y, dtype=float))
        gain = np.linalg.solve(syy, sxy.T).T
        return mx + (y - my) @ gain.T, sxx - gain @ sxy.T

    def sample(self, n, rng=None):
        z = _mvn(as_generator(rng if rng is not None else self.seed), self.mean, self.cov, n)
        return z[:, : self.n_x], z[:, self.n_x:]


@dataclass
class ToyImages:
    """Random single-channel images in ``[0, 1]``: checkerboard, blob or gradient."""

    pattern: str = "blob"
    size: int = 8
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in ("checkerboard", "blob", "gradient"):
            raise ContractError(f"unknown pattern {self.pattern!r}")
        if self.size < 2:
            raise ContractError("size must be >= 2")

    @property
    def dim(self) -> int:
        return self.size * self.size

    def sample(self, n, rng=None):
        rng = as_generator(rng if rng is not None else self.seed)
        k = self.size
        yy, xx = np.meshgrid(np.arange(k) + 0.5, np.arange(k) + 0.5, indexing="ij")
        yy, xx = yy[None] / k, xx[None] / k
        if self.pattern == "checkerboard":
            cell = np.maximum(rng.choice([1, 2, 4], size=(n, 1, 1)) * k // 8, 1)
            phase = rng.integers(0, 2, size=(n, 1, 1))
            iy = (yy * k).astype(int) // cell
            ix = (xx * k).astype(int) // cell
            img = ((iy + ix + phase) % 2).astype(float)
            img = 0.2 + 0.6 * img
        elif self.pattern == "blob":
            cy, cx = rng.uniform(0.25, 0.75, size=(2, n, 1, 1))
            r = rng.uniform(0.1, 0.3, size=(n, 1, 1))
            img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r ** 2))
        else:
            ang = rng.uniform(0, 2 * math.pi, size=(n, 1, 1))
            img = 0.5 + 0.5 * ((yy - 0.5) * np.sin(ang) + (xx - 0.5) * np.cos(ang)) * math.sqrt(2)
        img = img + self.noise * rng.standard_normal(img.shape)
        return np.clip(img, 0.0, 1.0)


@dataclass
class GaussianImages:
    """Gaussian image law: smooth gradient mean, squared-exponential pixel covariance.

    Every Haar coefficient group of this law has a closed-form score, which
    makes it the oracle target for the multiscale sampler.
    """

    size: int = 8
    lengthscale: float = 2.0
    amplitude: float = 0.5
    jitter: float = 1e-2
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.size * self.size

    @property
    def mean(self) -> np.ndarray:
        k = self.size
        yy, xx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        return (0.5 + 0.25 * (yy - xx) / max(k - 1, 1)).ravel()

    @property
    def cov(self) -> np.ndarray:
        k = self.size
        yy, xx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(float)
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        return self.amplitude ** 2 * np.exp(-0.5 * d2 / self.lengthscale ** 2) + self.jitter * np.eye(k * k)

    def sample(self, n, rng=None):
        rng = as_generator(rng if rng is not None else self.seed)
        return _mvn(rng, self.mean, self.cov, n).reshape(n, self.size, self.size)


Dataset = Gaussian | Gmm2d | JointGaussian | ToyImages | GaussianImages


def sample_dataset(d, n: int, rng=None):
    """``n`` i.i.d. draws; uses the dataset's own seed when ``rng`` is None."""
    if n < 1:
        raise ContractError("n must be >= 1")
    return d.sample(n, rng)


# ---------------------------------------------------------------------------
# forward operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mask:
    """Zero a square covering a quarter of the image.

    ``top``/``left`` fix the region; when unset, :func:`apply_operator` draws
    them uniformly from the given stream.
    """

    top: int | None = None
    left: int | None = None

    def side(self, shape) -> tuple[int, int]:
        h, w = shape[-2:]
        return max(1, round(h / 2)), max(1, round(w / 2))

    def fix(self, shape, rng) -> Mask:
        sh, sw = self.side(shape)
        h, w = shape[-2:]
        return replace(self, top=int(rng.integers(0, h - sh + 1)), left=int(rng.integers(0, w - sw + 1)))

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class Downsample:
    """Average pooling by ``factor`` (stand-in for bicubic downscaling)."""

    factor: int = 2

    def output_shape(self, shape):
        h, w = shape[-2:]
        return tuple(shape[:-2]) + (h // self.factor, w // self.factor)


@dataclass(frozen=True)
class EdgeMagnitude:
    """Finite-difference gradient magnitude (stand-in for a learned edge detector)."""

    def output_shape(self, shape):
        return tuple(shape)


ForwardOperator = Mask | Downsample | EdgeMagnitude


def apply_operator(op, x, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``op`` over the last two axes of ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        raise ContractError("operators act on images (at least two axes)")
    if isinstance(op, Mask):
        if op.top is None or op.left is None:
            if rng is None:
                raise ContractError("an unplaced mask needs a random stream")
            op = op.fix(x.shape, rng)
        sh, sw = op.side(x.shape)
        if op.top + sh > x.shape[-2] or op.left + sw > x.shape[-1]:
            raise ContractError("mask region falls outside the image")
        y = x.copy()
        y[..., op.top:op.top + sh, op.left:op.left + sw] = 0.0
        return y
    if isinstance(op, Downsample):
        f = op.factor
        h, w = x.shape[-2:]
        if f < 1 or h % f or w % f:
            raise ContractError(f"downsample factor {f} must divide the image shape {h}x{w}")
        return x.reshape(x.shape[:-2] + (h // f, f, w // f, f)).mean(axis=(-3, -1))
    if isinstance(op, EdgeMagnitude):
        gy = np.zeros_like(x)
        gx = np.zeros_like(x)
        gy[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
        gx[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
        return np.sqrt(gx ** 2 + gy ** 2)
    raise ContractError(f"unknown operator {op!r}")
