"""Build library objects from a validated :class:`~nudiff.config.ExperimentConfig`."""

from __future__ import annotations

import numpy as np

from .conditional import CondEstimatorSpec, make_estimator
from .config import ConfigError, ExperimentConfig
from .errors import ContractError
from .multiscale import MultiscaleModel, make_multiscale, scale_mlps
from .score_models import Mlp, TrainConfig
from .sde import SdeSpec
from .synthdata import (
    Downsample,
    EdgeMagnitude,
    Gaussian,
    GaussianImages,
    Gmm2d,
    JointGaussian,
    Mask,
    ToyImages,
    apply_operator,
)

# child streams of the run seed
STREAM_INIT, STREAM_TRAIN, STREAM_SAMPLE, STREAM_EVAL, STREAM_OBSERVE = range(5)


def streams(seed: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(5)


def train_seed(cfg: ExperimentConfig) -> int:
    return int(streams(cfg.seed)[STREAM_TRAIN].generate_state(1)[0])


def rng_for(cfg: ExperimentConfig, which: int) -> np.random.Generator:
    return np.random.default_rng(streams(cfg.seed)[which])


def _wrap(fn, *args):
    try:
        return fn(*args)
    except ContractError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc


def build_dataset(cfg: ExperimentConfig):
    d = cfg.dataset
    kind = d["kind"]

    def make():
        if kind == "gaussian":
            return Gaussian(d["mean"], d["cov"], cfg.seed)
        if kind == "gmm2d":
            return Gmm2d.symmetric(d["separation"], d["std"], cfg.seed)
        if kind == "joint_gaussian":
            if d["rho"] is not None:
                return JointGaussian.standardized(d["rho"], cfg.seed)
            return JointGaussian(d["mean"], d["cov"], d["n_x"], cfg.seed)
        if kind == "toy_images":
            return ToyImages(d["pattern"], d["size"], d["noise"], cfg.seed)
        return GaussianImages(d["size"], d["lengthscale"], d["amplitude"], d["jitter"], cfg.seed)

    return _wrap(make)


def is_image(dataset) -> bool:
    return isinstance(dataset, (ToyImages, GaussianImages))


def build_sde(cfg: ExperimentConfig) -> SdeSpec:
    s = cfg.sde
    fam = s["family"]

    def make():
        if fam == "ve":
            return SdeSpec.ve(s["sigma_min"], s["sigma_max"], epsilon=s["epsilon"], ve_kernel=s["ve_kernel"])
        if fam == "vp_linear":
            return SdeSpec.vp_linear(s["beta_min"], s["beta_max"], epsilon=s["epsilon"])
        return SdeSpec.vp_log_snr(s["snr_max"], s["snr_min"], s["terminal_time"], epsilon=s["epsilon"])

    return _wrap(make)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return _wrap(lambda: TrainConfig(t["optimizer"], t["lr"], tuple(t["betas"]), t["batch_size"],
                                     t["iterations"], t["ema_rate"],
                                     train_seed(cfg), t["weighting"]))


def build_operator(cfg: ExperimentConfig):
    op = cfg.estimator["operator"]
    if op is None:
        return None
    if op["kind"] == "mask":
        return Mask()
    if op["kind"] == "downsample":
        return Downsample(op.get("factor", 2))
    return EdgeMagnitude()


class ObservedImages:
    """Pairs ``(x, y)`` with ``x`` a flattened image and ``y = A(x)`` flattened."""

    def __init__(self, images, operator):
        self.images = images
        self.operator = operator
        side = images.size
        self.n_x = side * side
        self.n_y = int(np.prod(operator.output_shape((side, side))))

    def sample(self, n, rng):
        x = self.images.sample(n, rng)
        y = apply_operator(self.operator, x, rng)
        return x.reshape(n, -1), y.reshape(n, -1)


def conditional_data(cfg: ExperimentConfig, dataset):
    if isinstance(dataset, JointGaussian):
        return dataset
    return ObservedImages(dataset, build_operator(cfg))


def estimator_spec(cfg: ExperimentConfig, data) -> CondEstimatorSpec:
    e = cfg.estimator
    return _wrap(make_estimator, e["kind"], data.n_x, data.n_y, build_sde(cfg), e["sigma_y_max"],
                 e["weighting"])


def build_multiscale(cfg: ExperimentConfig, dataset, with_models: bool = True) -> MultiscaleModel:
    sc = cfg.schedule
    side = dataset.size
    model = _wrap(make_multiscale, (side, side), sc["n_levels"], sc["snr_max"], sc["snr_min"],
                  cfg.sde["epsilon"])
    if with_models:
        model.scale_models = scale_mlps(model, cfg.model["width_factor"], depth=len(cfg.model["hidden"]),
                                        activation=cfg.model["activation"],
                                        rng=rng_for(cfg, STREAM_INIT))
    return model


def build_mlp(cfg: ExperimentConfig, input_dim: int, cond_dim: int = 0) -> Mlp:
    return Mlp(input_dim, cfg.model["hidden"], cond_dim=cond_dim, activation=cfg.model["activation"],
               rng=rng_for(cfg, STREAM_INIT))


def expected_arch(cfg: ExperimentConfig, model: Mlp) -> dict:
    return {"input_dim": model.input_dim, "hidden": list(model.hidden), "output_dim": model.output_dim,
            "cond_dim": model.cond_dim, "activation": model.activation, "time_dim": model.time_dim}
