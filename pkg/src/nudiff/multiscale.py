"""Multiscale (cascaded) diffusion over Haar coefficient groups.

Groups are ordered ``a_n, d_n, ..., d_1``.  ``a_n`` diffuses over
``[eps, 1]`` and ``d_i`` stops at ``i/(n+1)``; every group follows a
variance-preserving SDE whose log-SNR falls linearly from ``snr_max`` at
``eps`` to ``snr_min`` at its own stop time.  On range
``[(i-1)/(n+1), i/(n+1)]`` the diffusing state is the prefix
``c_i = [a_n, d_n, ..., d_i]`` and is modelled by its own score network
``s_i``; ``s_{n+1}`` models ``a_n`` alone on ``[n/(n+1), 1]``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .score_models import AnalyticGaussian, Mlp, TrainConfig, TrainResult, dsm_loss, fit
from .sde import NonUniformSde, Scheme, SdeSpec, TimeGrid, integrate_reverse, tweedie_denoise
from .wavelet import PyramidLayout, coefficients_to_image, haar_matrix, image_to_coefficients


@dataclass(frozen=True)
class ScaleSchedule:
    n_levels: int
    epsilon: float = 1e-5

    def __post_init__(self):
        n = self.n_levels
        if n < 0:
            raise ContractError("n_levels must be >= 0")
        if not 0 < self.epsilon < 1.0 / (n + 1):
            raise ContractError(f"epsilon must lie in (0, 1/(n+1)) = (0, {1.0 / (n + 1):.6g})")

    @property
    def group_names(self) -> tuple[str, ...]:
        n = self.n_levels
        return (f"a_{n}",) + tuple(f"d_{i}" for i in range(n, 0, -1))

    @property
    def terminal_times(self) -> tuple[float, ...]:
        """Stop time per group, aligned with :attr:`group_names`."""
        n = self.n_levels
        return (1.0,) + tuple(i / (n + 1) for i in range(n, 0, -1))

    @property
    def n_ranges(self) -> int:
        return self.n_levels + 1

    def range(self, i: int) -> tuple[float, float]:
        """Time range of scale model ``s_i`` (``1 <= i <= n+1``)."""
        self._check_index(i)
        n = self.n_levels
        lo = self.epsilon if i == 1 else (i - 1) / (n + 1)
        return lo, i / (n + 1)

    @property
    def ranges(self) -> list[tuple[float, float]]:
        return [self.range(i) for i in range(1, self.n_ranges + 1)]

    def scale_groups(self, i: int) -> tuple[str, ...]:
        """Groups in ``c_i``: ``[a_n, d_n, ..., d_i]`` (``a_n`` alone for ``i = n+1``)."""
        self._check_index(i)
        return self.group_names[: self.n_levels - i + 2]

    def active_groups(self, t: float) -> tuple[str, ...]:
        if not self.epsilon <= t <= 1.0:
            raise ContractError(f"t={t} outside [eps, 1]")
        return tuple(g for g, T in zip(self.group_names, self.terminal_times) if t <= T)

    def _check_index(self, i):
        if not 1 <= i <= self.n_ranges:
            raise ContractError(f"scale index {i} outside 1..{self.n_ranges}")


def build_schedule(n_levels: int, epsilon: float = 1e-5) -> ScaleSchedule:
    return ScaleSchedule(n_levels, epsilon)


def design_group_sdes(schedule: ScaleSchedule, snr_max: float, snr_min: float,
                      layout: PyramidLayout) -> NonUniformSde:
    """One log-linear-SNR VP SDE per group, hitting ``snr_min`` at the group's stop time."""
    if not snr_max > snr_min > 0:
        raise ContractError("need snr_max > snr_min > 0")
    if layout.levels != schedule.n_levels:
        raise ContractError("layout and schedule disagree on the number of levels")
    blocks = []
    for size, T in zip(layout.group_sizes, schedule.terminal_times):
        blocks.append((size, SdeSpec.vp_log_snr(snr_max, snr_min, T, epsilon=schedule.epsilon)))
    return NonUniformSde.from_blocks(blocks)


@dataclass
class MultiscaleModel:
    schedule: ScaleSchedule
    layout: PyramidLayout
    sde: NonUniformSde
    scale_models: list = field(default_factory=list)

    def __post_init__(self):
        if self.layout.levels != self.schedule.n_levels or self.sde.dim != self.layout.size:
            raise ContractError("schedule, layout and SDE are inconsistent")
        if self.scale_models and len(self.scale_models) != self.schedule.n_ranges:
            raise ContractError(f"need {self.schedule.n_ranges} scale models, "
                                f"got {len(self.scale_models)}")
        for i, mdl in enumerate(self.scale_models, start=1):
            dim = getattr(mdl, "input_dim", None)
            if mdl is not None and dim is not None and dim != self.scale_dim(i):
                raise ContractError(f"scale model {i} expects {dim} inputs, c_{i} has "
                                    f"{self.scale_dim(i)}")

    def scale_dim(self, i: int) -> int:
        k = len(self.schedule.scale_groups(i))
        return self.layout.slices[k - 1].stop

    def scale_sde(self, i: int) -> NonUniformSde:
        return self.sde.restrict(self.scale_dim(i))

    def model(self, i: int):
        if len(self.scale_models) < i or self.scale_models[i - 1] is None:
            raise ContractError(f"missing scale model s_{i}")
        return self.scale_models[i - 1]


def make_multiscale(image_shape, n_levels: int, snr_max: float, snr_min: float,
                    epsilon: float = 1e-5, scale_models=None) -> MultiscaleModel:
    schedule = build_schedule(n_levels, epsilon)
    layout = PyramidLayout.for_shape(image_shape, n_levels)
    sde = design_group_sdes(schedule, snr_max, snr_min, layout)
    return MultiscaleModel(schedule, layout, sde, list(scale_models or []))


def scale_mlps(model: MultiscaleModel, width_factor: float = 2.0, min_width: int = 32,
               depth: int = 2, activation: str = "silu", rng=None) -> list[Mlp]:
    """Fresh MLPs, hidden width proportional to each scale's input size."""
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for i in range(1, model.schedule.n_ranges + 1):
        d = model.scale_dim(i)
        width = max(min_width, int(round(width_factor * d)))
        out.append(Mlp(d, (width,) * depth, activation=activation, rng=rng))
    return out


def gaussian_scale_models(model: MultiscaleModel, image_mean, image_cov) -> list[AnalyticGaussian]:
    """Exact per-scale scores for a Gaussian image law.

    The Haar transform is orthogonal, so coefficients are Gaussian with mean
    ``H mu`` and covariance ``H Sigma H^T``; ``c_i`` is a marginal prefix.
    """
    H = haar_matrix(model.layout)
    mu = H @ np.asarray(image_mean, dtype=float).ravel()
    cov = H @ np.asarray(image_cov, dtype=float) @ H.T
    cov = 0.5 * (cov + cov.T)
    out = []
    for i in range(1, model.schedule.n_ranges + 1):
        d = model.scale_dim(i)
        out.append(AnalyticGaussian(mu[:d], cov[:d, :d], model.scale_sde(i)))
    return out


def multiscale_dsm_loss(model: MultiscaleModel, scale_index: int, images,
                        rng: np.random.Generator, weighting="likelihood", need_grad: bool = True):
    """DSM objective of ``s_i`` on its time range, restricted to ``c_i``.

    Default weighting is ``G(t) G(t)^T`` of the groups in ``c_i``.
    """
    i = scale_index
    lo, hi = model.schedule.range(i)
    coeffs = image_to_coefficients(images, model.layout)
    coeffs = coeffs.reshape(-1, model.layout.size)[:, : model.scale_dim(i)]
    return dsm_loss(model.model(i), model.scale_sde(i), coeffs, weighting, rng,
                    t_range=(lo, hi), need_grad=need_grad)


def _steps_list(steps_per_range, n_ranges) -> list[int]:
    if np.ndim(steps_per_range) == 0:
        steps = [int(steps_per_range)] * n_ranges
    else:
        steps = [int(s) for s in steps_per_range]
    if len(steps) != n_ranges or min(steps) < 1:
        raise ContractError(f"need {n_ranges} positive step counts")
    return steps


def multiscale_sample(model: MultiscaleModel, steps_per_range, rng: np.random.Generator,
                      n_samples: int = 1, scheme: Scheme | str = Scheme.EULER_MARUYAMA,
                      tweedie: bool = False) -> np.ndarray:
    """Cascaded sampling: coarse coefficients first, one detail group per range.

    ``steps_per_range`` is an int or one count per range, listed for
    ``s_1 .. s_{n+1}``.  Returns images shaped ``(n_samples, *image_shape)``.
    """
    sched = model.schedule
    steps = _steps_list(steps_per_range, sched.n_ranges)
    for i in range(1, sched.n_ranges + 1):
        model.model(i)
    x = rng.standard_normal((n_samples, model.scale_dim(sched.n_ranges)))
    for i in range(sched.n_ranges, 0, -1):
        lo, hi = sched.range(i)
        grid = TimeGrid.linear(hi, lo, steps[i - 1], scheme)
        x = integrate_reverse(model.scale_sde(i), model.model(i), x, grid, rng)
        if i > 1:
            new = model.scale_dim(i - 1) - x.shape[1]
            x = np.concatenate([x, rng.standard_normal((n_samples, new))], axis=1)
    if tweedie:
        x = tweedie_denoise(model.scale_sde(1), model.model(1), x, sched.epsilon)
    return coefficients_to_image(x, model.layout)


def uniform_sample(score, sde: NonUniformSde, layout: PyramidLayout, n_steps: int,
                   rng: np.random.Generator, n_samples: int = 1,
                   scheme: Scheme | str = Scheme.EULER_MARUYAMA) -> np.ndarray:
    """Baseline: every coefficient diffuses over ``[eps, 1]`` with one score model."""
    x = rng.standard_normal((n_samples, sde.dim)) * sde.prior_std()
    grid = TimeGrid.linear(sde.horizon, sde.epsilon, n_steps, scheme)
    return coefficients_to_image(integrate_reverse(sde, score, x, grid, rng), layout)


@dataclass
class CostProfile:
    per_range: list[dict]
    total: int
    uniform_total: int

    @property
    def ratio(self) -> float:
        return self.uniform_total / self.total

    def rows(self) -> list[dict]:
        return [*self.per_range, {"range": "total", "t_lo": "", "t_hi": "", "input_dim": "",
                                  "steps": sum(r["steps"] for r in self.per_range),
                                  "elements": self.total}]

    def as_dict(self) -> dict:
        return {"per_range": self.per_range, "total": self.total,
                "uniform_total": self.uniform_total, "ratio": self.ratio}


def cost_profile(model: MultiscaleModel | ScaleSchedule, steps_per_range,
                 layout: PyramidLayout | None = None) -> CostProfile:
    """Score-input element counts per range versus a uniform model.

    The baseline runs the same total number of steps on the full state.
    """
    if isinstance(model, MultiscaleModel):
        sched, layout = model.schedule, model.layout
    else:
        sched = model
        if layout is None:
            raise ContractError("layout required with a bare schedule")
    steps = _steps_list(steps_per_range, sched.n_ranges)
    rows, total = [], 0
    for i in range(1, sched.n_ranges + 1):
        k = len(sched.scale_groups(i))
        dim = layout.slices[k - 1].stop
        lo, hi = sched.range(i)
        rows.append({"range": i, "t_lo": lo, "t_hi": hi, "input_dim": dim,
                     "steps": steps[i - 1], "elements": dim * steps[i - 1]})
        total += dim * steps[i - 1]
    return CostProfile(rows, total, sum(steps) * layout.size)


def train_multiscale(model: MultiscaleModel, dataset, config: TrainConfig,
                     scales: Sequence[int] | None = None) -> list[TrainResult]:
    """Train each scale network independently on its own range.

    Scale ``i`` uses the ``i``-th child stream of ``config.seed``.
    """
    draw = dataset.sample if hasattr(dataset, "sample") else dataset
    seeds = np.random.SeedSequence(config.seed).spawn(model.schedule.n_ranges)
    results = []
    for i in scales or range(1, model.schedule.n_ranges + 1):
        def objective(net, rng, i=i):
            images = draw(config.batch_size, rng)
            return multiscale_dsm_loss(model, i, images, rng, config.weighting)
        results.append(fit(model.model(i), objective, replace(config, seed=seeds[i - 1])))
    return results
