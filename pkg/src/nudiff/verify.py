"""Oracle and invariant suites behind ``nudiff verify``.

Each suite returns a :class:`Verdict` holding named checks with the
measured value, the threshold and the outcome.  Suites are deterministic:
all randomness comes from fixed seeds.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from .conditional import (
    AnalyticConditionalScore,
    ConditionalFromJoint,
    DiscreteJoint,
    analytic_joint_score,
    as_conditional_model,
    blurring_identity_check,
    cde_tabulated_minimizer,
    cdiffe_scalar_loss,
    cmde_approx_error,
    conditional_sample,
    joint_dsm_loss,
    make_conditional_mlp,
    make_estimator,
    train_cde,
    train_joint,
)
from .metrics import kl_bound_check, sliced_wasserstein
from .multiscale import cost_profile, gaussian_scale_models, make_multiscale, multiscale_sample, uniform_sample
from .score_models import AnalyticGaussian, Mlp, PerturbedScore, TrainConfig
from .sde import NonUniformSde, SdeSpec, TimeGrid, integrate_reverse, sample_prior, simulate_forward
from .synthdata import GaussianImages, JointGaussian
from .wavelet import haar_decompose, haar_matrix, haar_reconstruct, pyramid_flatten


@dataclass
class Check:
    name: str
    value: float
    threshold: float | str
    passed: bool


@dataclass
class Verdict:
    suite: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def add(self, name, value, threshold, passed):
        self.checks.append(Check(name, float(value), threshold, bool(passed)))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        for c in d["checks"]:
            if not math.isfinite(c["value"]):
                c["value"] = str(c["value"])
        return d

    def summary(self) -> str:
        failed = [c.name for c in self.checks if not c.passed]
        state = "PASS" if self.passed else "FAIL"
        tail = f" failed: {', '.join(failed)}" if failed else ""
        return f"{state} {self.suite} ({len(self.checks)} checks, {self.seconds:.1f} s){tail}"


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def suite_haar(v: Verdict):
    rng = np.random.default_rng(0)
    worst_rec = worst_energy = 0.0
    for n in (1, 2, 3):
        for _ in range(100):
            img = rng.standard_normal((16, 16))
            pyr = haar_decompose(img, n)
            worst_rec = max(worst_rec, float(np.max(np.abs(haar_reconstruct(pyr) - img))))
            vec, _ = pyramid_flatten(pyr)
            e = float(np.sum(img ** 2))
            worst_energy = max(worst_energy, abs(float(np.sum(vec ** 2)) - e) / e)
    v.add("max reconstruction error", worst_rec, 1e-10, worst_rec < 1e-10)
    v.add("max relative energy gap", worst_energy, 1e-10, worst_energy < 1e-10)


KERNEL_FAMILIES = (
    SdeSpec.ve(0.01, 50.0),
    SdeSpec.vp_linear(0.1, 20.0),
    SdeSpec.vp_log_snr(1e4, 1e-2),
)
KERNEL_TIMES = (0.1, 0.3, 0.5, 0.7, 0.9)


def suite_kernel(v: Verdict, n_paths: int = 100_000, dt: float = 1e-4):
    # fine-step Euler from a fixed x0; z-scores of mean and std against (m x0, s)
    x0 = np.full((n_paths, 1), 1.0)
    for k, sde in enumerate(KERNEL_FAMILIES):
        rng = np.random.default_rng(100 + k)
        states = simulate_forward(sde, x0, KERNEL_TIMES, dt, rng)
        for t, x in zip(KERNEL_TIMES, states):
            m, s = (float(a) for a in sde.kernel(t))
            x = x[:, 0]
            z_mean = abs(x.mean() - m) / (s / math.sqrt(n_paths))
            z_std = abs(x.std(ddof=1) - s) / (s / math.sqrt(2 * (n_paths - 1)))
            tag = f"{sde_label(sde)} t={t}"
            v.add(f"{tag} mean z-score", z_mean, 3.0, z_mean < 3.0)
            v.add(f"{tag} std z-score", z_std, 3.0, z_std < 3.0)


def suite_gradcheck(v: Verdict, h: float = 1e-5):
    rng = np.random.default_rng(0)
    net = Mlp(3, (12, 10), cond_dim=2, activation="tanh", rng=rng)
    for p in net.params[1::2]:
        p += 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((6, 3))
    t = rng.uniform(0.05, 1.0, 6)
    c = rng.standard_normal((6, 2))
    w = rng.standard_normal((6, 3))

    def loss():
        return float(np.sum(w * net(x, t, c)))

    net.forward(x, t, c)
    grads = net.backward(w)
    worst = 0.0
    for p, g in zip(net.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-8))
    v.add(f"max relative gradient error ({net.n_params} params, 3 layers)", worst, 1e-6, worst < 1e-6)


SAMPLER_TARGETS = (
    ("1D", [0.5], [[0.01]]),
    ("2D", [0.5, -0.3], [[0.01, 0.006], [0.006, 0.0225]]),
)


def _moment_errors(x, mean, cov):
    sd = np.sqrt(np.diag(cov))
    mean_err = np.abs(x.mean(0) - mean) / np.maximum(np.abs(mean), sd)
    std_err = np.abs(x.std(0) / sd - 1.0)
    standardized = max(float(np.max(np.abs(x.mean(0) - mean) / sd)), float(np.max(std_err)))
    return float(np.max(mean_err)), float(np.max(std_err)), standardized


def suite_sampler(v: Verdict, n_chains: int = 10_000):
    sde = SdeSpec.vp_linear(0.1, 20.0)
    for label, mean, cov in SAMPLER_TARGETS:
        mean, cov = np.asarray(mean), np.asarray(cov)
        d = mean.size
        score = AnalyticGaussian(mean, cov, sde)
        nsde = NonUniformSde.uniform(sde, d)
        m, s = (float(a) for a in sde.kernel(sde.epsilon))
        mean_e, cov_e = m * mean, m * m * cov + s * s * np.eye(d)
        errs = {}
        for n_steps in (64, 128, 256):
            rng = np.random.default_rng(7)
            x = integrate_reverse(nsde, score, sample_prior(nsde, n_chains, rng),
                                  TimeGrid.linear(sde.stop_time, sde.epsilon, n_steps), rng)
            errs[n_steps] = _moment_errors(x, mean_e, cov_e)
        mean_err, std_err, _ = errs[256]
        v.add(f"{label} mean relative error at 256 steps", mean_err, 0.05, mean_err < 0.05)
        v.add(f"{label} std relative error at 256 steps", std_err, 0.05, std_err < 0.05)
        e64, e128, e256 = (errs[n][2] for n in (64, 128, 256))
        v.add(f"{label} moment error 128 -> 64 steps worsens", e64 - e128, "> 0", e64 > e128)
        v.add(f"{label} moment error 256 -> 128 steps worsens", e128 - e256, "> 0", e128 > e256)


def sde_label(sde: SdeSpec) -> str:
    fam = sde.family.value
    if fam == "ve":
        return f"ve({sde.sigma_min:g},{sde.sigma_max:g})"
    if fam == "vp_linear":
        return f"vp_linear({sde.beta_min:g},{sde.beta_max:g})"
    return f"vp_log_snr({sde.snr_max:g},{sde.snr_min:g})"


KL_SDES = (
    SdeSpec.vp_linear(0.1, 20.0),
    SdeSpec.ve(0.01, 5.0),
    SdeSpec.ve(0.01, 50.0),
    SdeSpec.vp_log_snr(1e4, 1e-2),
)
KL_PERTURBATIONS = (0.0, 0.05, -0.05, 0.1, -0.1, 0.2, -0.2)


def suite_kl(v: Verdict, target=(0.5, 0.64), n_mc: int = 200_000):
    for sde in KL_SDES:
        base = AnalyticGaussian([target[0]], [[target[1]]], sde)
        for delta in KL_PERTURBATIONS:
            r = kl_bound_check(target, PerturbedScore(base, delta), sde, n_mc, np.random.default_rng(0))
            tag = f"{sde_label(sde)} delta={delta:+.2f}"
            v.add(f"{tag} lhs - rhs", r.lhs - r.rhs, "<= 1e-3", r.lhs <= r.rhs + 1e-3)


def cde_toy_times(sde: SdeSpec, stds=(0.5, 1.0, 2.0)) -> list[float]:
    """Times at which a VE kernel has the given standard deviations."""
    s_eps = sde.sigma_min * (sde.sigma_max / sde.sigma_min) ** sde.epsilon
    return [math.log(math.sqrt(s * s + s_eps ** 2) / sde.sigma_min)
            / math.log(sde.sigma_max / sde.sigma_min) for s in stds]


def suite_cde(v: Verdict):
    sde = SdeSpec.ve(0.01, 10.0)
    toy = DiscreteJoint.copy_toy()
    times = cde_toy_times(sde)
    small = cde_tabulated_minimizer(toy, sde, times, 10 ** 4, np.random.default_rng(1)).sup_error
    large = cde_tabulated_minimizer(toy, sde, times, 10 ** 6, np.random.default_rng(1)).sup_error
    v.add("sup error at 1e4 samples", small, "reference", True)
    v.add("sup error at 1e6 below 1e4", large - small, "< 0", large < small)
    v.add("sup error at 1e6 samples", large, 1e-2, large < 1e-2)


def suite_cmde(v: Verdict):
    sde = SdeSpec.ve(0.01, 10.0)
    joint = JointGaussian.standardized(0.8)
    x0, y0 = joint.sample(512, np.random.default_rng(3))
    net = Mlp(2, (16, 16), rng=np.random.default_rng(4))
    matched = make_estimator("cmde", 1, 1, sde, sigma_y_max=sde.sigma_max)
    a, _ = joint_dsm_loss(net, matched, x0, y0, np.random.default_rng(5), need_grad=False)
    b, _ = cdiffe_scalar_loss(net, sde, x0, y0, np.random.default_rng(5), need_grad=False)
    v.add("|CMDE(sigma_y = sigma_x) - CDiffE| loss", abs(a - b), 1e-12, abs(a - b) <= 1e-12)

    errs = []
    for sy in (0.01, 0.1, 0.5, 1.0):
        spec = make_estimator("cmde", 1, 1, sde, sigma_y_max=sy)
        errs.append(cmde_approx_error(spec, joint, 0.5, [1.0], 100_000, np.random.default_rng(6)))
    steps = np.diff(errs)
    v.add("approximation error increasing over sigma_y_max grid", float(np.min(steps)), "> 0",
          bool(np.all(steps > 0)))
    tiny = cmde_approx_error(make_estimator("cmde", 1, 1, sde, sigma_y_max=1e-6), joint, 0.5, [1.0],
                             100_000, np.random.default_rng(6))
    v.add("approximation error at sigma_y_max = 1e-6", tiny, 1e-8, tiny < 1e-8)


def suite_blurring(v: Verdict):
    sde = SdeSpec.ve(0.01, 10.0)
    toy = DiscreteJoint.flip_toy(0.2)
    dev = blurring_identity_check(toy.table, toy.x_support, toy.y_support, sde, 0.5, 0.3)
    v.add("two-point support deviation (101-point grid)", dev, 1e-8, dev < 1e-8)


def suite_multiscale(v: Verdict, n_samples: int = 5000, steps: int = 64, n_proj: int = 200):
    data = GaussianImages(size=8)
    mu, cov = data.mean, data.cov
    ratios = []
    for n in (1, 2, 3):
        model = make_multiscale((8, 8), n, 1e6, 4.3e-5)
        model.scale_models = gaussian_scale_models(model, mu, cov)
        multi = multiscale_sample(model, steps, np.random.default_rng(1), n_samples).reshape(n_samples, -1)
        H = haar_matrix(model.layout)
        usde = NonUniformSde.uniform(SdeSpec.vp_log_snr(1e6, 4.3e-5, 1.0), model.layout.size)
        score = AnalyticGaussian(H @ mu, H @ cov @ H.T, usde)
        total = steps * (n + 1)
        u1 = uniform_sample(score, usde, model.layout, total, np.random.default_rng(2), n_samples)
        u2 = uniform_sample(score, usde, model.layout, total, np.random.default_rng(3), n_samples)
        u1, u2 = u1.reshape(n_samples, -1), u2.reshape(n_samples, -1)
        base = sliced_wasserstein(u1, u2, n_proj, np.random.default_rng(4))
        cross = sliced_wasserstein(multi, u1, n_proj, np.random.default_rng(4))
        v.add(f"n={n} SW(multiscale, uniform) / SW(uniform, uniform)", cross / base, "< 1.5",
              cross < 1.5 * base)
        ratio = cost_profile(model, steps).ratio
        ratios.append(ratio)
        v.add(f"n={n} cost ratio", ratio, "> 1", ratio > 1)
    v.add("cost ratio non-decreasing in n", min(np.diff(ratios)), ">= 0", bool(np.all(np.diff(ratios) >= 0)))


def conditional_score_error(spec, model, joint: JointGaussian, sde: SdeSpec,
                            ys=np.linspace(-2, 2, 9), ts=np.linspace(0.1, 1.0, 10)) -> float:
    """Relative L2 error of a learned conditional score on a bulk grid.

    The grid holds 21 points within two standard deviations of
    ``p(x_t | y)`` for each ``(t, y)``.  Diffusive estimators are compared
    with their own exact target ``grad log p(x_t | y_t)`` at condition
    draws ``y_t ~ p(y_t | y)``; CDE with ``grad log p(x_t | y)``.
    """
    view = as_conditional_model(spec, model)
    if spec.sde_y is None:
        ref = AnalyticConditionalScore(joint, sde)
    else:
        ref = ConditionalFromJoint(analytic_joint_score(joint, spec), spec.n_x)
    rng = np.random.default_rng(11)
    rho = float(joint.cov[0, 1])
    num = den = 0.0
    for t in ts:
        m, s = (float(a) for a in sde.kernel(t))
        for y in ys:
            sd = math.sqrt(m * m * (1 - rho * rho) + s * s)
            x = (m * rho * y + sd * np.linspace(-2, 2, 21))[:, None]
            cond = np.full((21, 1), y)
            if spec.sde_y is not None:
                my, sy = (float(a) for a in spec.sde_y.kernel(t))
                cond = my * y + sy * rng.standard_normal((21, 1))
            a, b = view(x, t, cond), ref(x, t, cond)
            num += float(np.sum((a - b) ** 2))
            den += float(np.sum(b ** 2))
    return math.sqrt(num / den)


TRAINING_CONFIG = TrainConfig(lr=1e-3, iterations=5000, batch_size=128, seed=0)


def suite_training(v: Verdict, config: TrainConfig = TRAINING_CONFIG, n_chains: int = 10_000):
    sde = SdeSpec.vp_linear(0.1, 20.0)
    rho = 0.8
    joint = JointGaussian.standardized(rho)
    for kind in ("cde", "cmde"):
        spec = make_estimator(kind, 1, 1, sde, sigma_y_max=0.1)
        net = make_conditional_mlp(spec, hidden=(64, 64), rng=np.random.default_rng(0))
        fit = train_cde(net, sde, joint, config) if kind == "cde" else train_joint(net, spec, joint, config)
        err = conditional_score_error(spec, fit.ema, joint, sde)
        v.add(f"{kind} score relative L2 error", err, 0.10, err < 0.10)
        rng = np.random.default_rng(7)
        grid = TimeGrid.linear(sde.stop_time, sde.epsilon, 256)
        for y in (-1.5, 1.5):
            x = conditional_sample(spec, as_conditional_model(spec, fit.ema), np.array([y]), grid, rng, n_chains)
            bias = abs(float(x.mean()) - rho * y) / abs(rho * y)
            v.add(f"{kind} posterior-mean bias at y={y}", bias, 0.05, bias < 0.05)


SUITES: dict[str, Callable[[Verdict], None]] = {
    "haar": suite_haar,
    "kernel": suite_kernel,
    "gradcheck": suite_gradcheck,
    "sampler": suite_sampler,
    "kl": suite_kl,
    "cde": suite_cde,
    "cmde": suite_cmde,
    "blurring": suite_blurring,
    "multiscale": suite_multiscale,
    "training": suite_training,
}


def run_suite(name: str) -> Verdict:
    if name not in SUITES:
        raise KeyError(name)
    v = Verdict(name)
    start = time.perf_counter()
    SUITES[name](v)
    v.seconds = time.perf_counter() - start
    return v
