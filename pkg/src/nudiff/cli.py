"""Command-line driver: ``nudiff {train,sample,observe,eval,verify}``.

Exit codes: 0 success, 1 verification failure, 2 invalid input
(config, checkpoint, files), 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import experiment as ex
from .conditional import (
    AnalyticConditionalScore,
    Estimator,
    analytic_joint_score,
    as_conditional_model,
    conditional_sample,
    make_conditional_mlp,
    train_cde,
    train_joint,
)
from .config import ConfigError, ExperimentConfig, load_config
from .errors import ContractError, NumericalError
from .io import load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .metrics import EvalReport, consistency_psnr, mean_diversity, psnr, sliced_wasserstein
from .multiscale import cost_profile, gaussian_scale_models, multiscale_sample, train_multiscale
from .score_models import AnalyticGaussian, train
from .sde import NonUniformSde, Scheme, TimeGrid, integrate_reverse, sample_prior, tweedie_denoise
from .synthdata import Gaussian, GaussianImages, JointGaussian, Mask
from .verify import SUITES, run_suite

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path: Path, obj):
    def enc(v):
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        if isinstance(v, dict):
            return {k: enc(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [enc(x) for x in v]
        return v
    path.write_text(json.dumps(enc(obj), indent=2, sort_keys=True) + "\n")


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_sha256": cfg.digest, "seed": cfg.seed, "experiment": cfg.experiment}


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    dataset = ex.build_dataset(cfg)
    tc = ex.train_config(cfg)
    start = time.perf_counter()
    written = []
    if cfg.experiment == "multiscale":
        model = ex.build_multiscale(cfg, dataset)
        results = train_multiscale(model, dataset, tc)
        for i, res in enumerate(results, start=1):
            _write_csv(out / f"loss_scale_{i}.csv", ["iteration", "loss"], enumerate(res.losses))
            save_checkpoint(ckdir / f"scale_{i}.ckpt", res.model, res.ema,
                            {**_stamp(cfg), "scale": i})
            written.append(f"scale_{i}.ckpt")
    elif cfg.experiment == "conditional":
        data = ex.conditional_data(cfg, dataset)
        spec = ex.estimator_spec(cfg, data)
        net = make_conditional_mlp(spec, tuple(cfg.model["hidden"]), cfg.model["activation"],
                                   ex.rng_for(cfg, ex.STREAM_INIT))
        if spec.kind is Estimator.CDE:
            res = train_cde(net, spec.sde_x, data, tc)
        else:
            res = train_joint(net, spec, data, tc)
        _write_csv(out / "loss.csv", ["iteration", "loss"], enumerate(res.losses))
        save_checkpoint(ckdir / "model.ckpt", res.model, res.ema, _stamp(cfg))
        written.append("model.ckpt")
    else:
        sde = ex.build_sde(cfg)
        net = ex.build_mlp(cfg, dataset.dim)
        res = train(net, sde, dataset, tc)
        _write_csv(out / "loss.csv", ["iteration", "loss"], enumerate(res.losses))
        save_checkpoint(ckdir / "model.ckpt", res.model, res.ema, _stamp(cfg))
        written.append("model.ckpt")
    _write_json(out / "train.json", {**_stamp(cfg), "checkpoints": written,
                                     "iterations": tc.iterations,
                                     "seconds": time.perf_counter() - start,
                                     "config": cfg.as_dict()})
    print(f"trained {len(written)} model(s) -> {ckdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def _load_models(cfg, args, expected: list, names: list[str]):
    paths = args.checkpoint or [str(Path(cfg.out) / "checkpoints" / n) for n in names]
    if len(paths) != len(expected):
        raise ConfigError(f"expected {len(expected)} checkpoint(s), got {len(paths)}")
    models = []
    for path, fresh in zip(paths, expected):
        if not Path(path).is_file():
            raise ConfigError(f"checkpoint not found: {path} (run 'train' first or pass --checkpoint)")
        raw, ema, header = load_checkpoint(path)
        if header["arch"] != ex.expected_arch(cfg, fresh):
            raise ConfigError(f"checkpoint/config mismatch in {path}: checkpoint has "
                              f"{header['arch']}, config implies {ex.expected_arch(cfg, fresh)}")
        models.append(ema if (cfg.sampler["use_ema"] and ema is not None) else raw)
    return models


def _grid(cfg, sde_or_t0, t_end, n_steps):
    return TimeGrid.linear(sde_or_t0, t_end, n_steps, Scheme(cfg.sampler["scheme"]))


def cmd_sample(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    n = cfg.sampler["n_samples"] if args.n is None else args.n
    if n < 0:
        raise UsageError("--n must be >= 0")
    dataset = ex.build_dataset(cfg)
    rng = ex.rng_for(cfg, ex.STREAM_SAMPLE)
    meta = {**_stamp(cfg), "n": n, "analytic": bool(args.analytic)}
    sc = cfg.sampler
    start = time.perf_counter()

    if cfg.experiment == "multiscale":
        model = ex.build_multiscale(cfg, dataset)
        if args.analytic:
            if not isinstance(dataset, GaussianImages):
                raise ConfigError("--analytic multiscale sampling needs gaussian_images data")
            model.scale_models = gaussian_scale_models(model, dataset.mean, dataset.cov)
        else:
            names = [f"scale_{i}.ckpt" for i in range(1, model.schedule.n_ranges + 1)]
            model.scale_models = _load_models(cfg, args, model.scale_models, names)
        steps = sc["steps_per_range"]
        shape = (dataset.size, dataset.size)
        samples = (multiscale_sample(model, steps, rng, n, sc["scheme"], sc["tweedie"]) if n
                   else np.zeros((0, *shape)))
        prof = cost_profile(model, steps)
        meta["cost_profile"] = prof.as_dict()
        meta["grid"] = {"ranges": model.schedule.ranges, "steps_per_range": steps,
                        "scheme": sc["scheme"]}
        rows = [[r["range"], r["t_lo"], r["t_hi"], r["input_dim"], r["steps"], r["elements"]]
                for r in prof.rows()]
        _write_csv(out / "cost_profile.csv", ["range", "t_lo", "t_hi", "input_dim", "steps", "elements"], rows)
    elif cfg.experiment == "conditional":
        samples = _sample_conditional(cfg, args, dataset, n, rng, meta)
    else:
        sde = ex.build_sde(cfg)
        dim = dataset.dim
        nsde = NonUniformSde.uniform(sde, dim)
        if args.analytic:
            if not isinstance(dataset, (Gaussian, GaussianImages)):
                raise ConfigError("--analytic uniform sampling needs gaussian or gaussian_images data")
            score = AnalyticGaussian(dataset.mean, dataset.cov, sde)
        else:
            (score,) = _load_models(cfg, args, [ex.build_mlp(cfg, dim)], ["model.ckpt"])
        grid = _grid(cfg, sde.stop_time, sde.epsilon, sc["n_steps"])
        meta["grid"] = grid.as_dict()
        meta["cost_profile"] = {"total": dim * sc["n_steps"], "uniform_total": dim * sc["n_steps"],
                                "ratio": 1.0}
        if n:
            x = integrate_reverse(nsde, score, sample_prior(nsde, n, rng), grid, rng)
            if sc["tweedie"]:
                x = tweedie_denoise(nsde, score, x, sde.epsilon)
        else:
            x = np.zeros((0, dim))
        samples = x.reshape((n, dataset.size, dataset.size)) if ex.is_image(dataset) else x

    elapsed = time.perf_counter() - start
    meta["seconds"] = elapsed
    meta["seconds_per_sample"] = elapsed / n if n else 0.0
    meta["shape"] = list(samples.shape)
    save_tensor(out / "samples.bin", samples, {"config_sha256": cfg.digest, "seed": cfg.seed})
    _write_json(out / "samples.json", meta)
    lead = 2 if cfg.experiment == "conditional" else 1
    flat = samples.reshape(int(np.prod(samples.shape[:lead])), int(np.prod(samples.shape[lead:])))
    rows = []
    if flat.shape[0]:
        rows = [[j, flat[:, j].mean(), flat[:, j].std()] for j in range(flat.shape[1])]
    _write_csv(out / "samples_summary.csv", ["index", "mean", "std"], rows)
    print(f"wrote {n} sample(s) -> {out / 'samples.bin'}")
    return EXIT_OK


def _sample_conditional(cfg, args, dataset, k, rng, meta):
    if not args.condition:
        raise UsageError("conditional sampling requires --condition PATH (see 'observe')")
    cpath = Path(args.condition)
    if not cpath.is_file():
        raise UsageError(f"condition file not found: {cpath}")
    cond = load_tensor(cpath)
    data = ex.conditional_data(cfg, dataset)
    spec = ex.estimator_spec(cfg, data)
    cond = cond.reshape(cond.shape[0], -1) if cond.ndim > 1 else cond[None, :]
    if cond.shape[1] != spec.n_y:
        raise ConfigError(f"condition file holds {cond.shape[1]} entries per row, config implies {spec.n_y}")
    if args.analytic:
        if not isinstance(dataset, JointGaussian):
            raise ConfigError("--analytic conditional sampling needs joint_gaussian data")
        model = (AnalyticConditionalScore(dataset, spec.sde_x) if spec.kind is Estimator.CDE
                 else analytic_joint_score(dataset, spec))
    else:
        fresh = make_conditional_mlp(spec, tuple(cfg.model["hidden"]), cfg.model["activation"])
        (model,) = _load_models(cfg, args, [fresh], ["model.ckpt"])
    view = as_conditional_model(spec, model)
    grid = _grid(cfg, spec.sde_x.stop_time, spec.sde_x.epsilon, cfg.sampler["n_steps"])
    meta["grid"] = grid.as_dict()
    meta["estimator"] = {"kind": spec.kind.value, "sigma_y_max": cfg.estimator["sigma_y_max"]}
    meta["condition_file"] = str(cpath)
    out = np.zeros((cond.shape[0], k, spec.n_x))
    if k:
        for i, y in enumerate(cond):
            out[i] = conditional_sample(spec, view, y, grid, rng, k)
    if ex.is_image(dataset):
        out = out.reshape(cond.shape[0], k, dataset.size, dataset.size)
    return out


# ---------------------------------------------------------------------------
# observe
# ---------------------------------------------------------------------------

def cmd_observe(cfg: ExperimentConfig, args) -> int:
    """Draw held-out ``(x, y)`` pairs for conditional sampling and evaluation."""
    if cfg.experiment != "conditional":
        raise ConfigError("'observe' needs a conditional experiment")
    out = _out_dir(cfg)
    data = ex.conditional_data(cfg, ex.build_dataset(cfg))
    n = 8 if args.n is None else args.n
    if n < 1:
        raise UsageError("--n must be >= 1")
    x, y = data.sample(n, ex.rng_for(cfg, ex.STREAM_OBSERVE))
    save_tensor(out / "truth.bin", x, {"config_sha256": cfg.digest})
    save_tensor(out / "condition.bin", y, {"config_sha256": cfg.digest})
    _write_json(out / "observe.json", {**_stamp(cfg), "n": n})
    print(f"wrote {n} observation(s) -> {out / 'condition.bin'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    spath = Path(args.samples or out / "samples.bin")
    if not spath.is_file():
        raise UsageError(f"samples not found: {spath} (run 'sample' first)")
    samples = load_tensor(spath)
    dataset = ex.build_dataset(cfg)
    rng = ex.rng_for(cfg, ex.STREAM_EVAL)
    ev = cfg.eval
    report = EvalReport()
    extra = {}
    if cfg.experiment == "conditional":
        tpath = Path(args.truth or out / "truth.bin")
        if not tpath.is_file():
            raise UsageError(f"ground truth not found: {tpath} (run 'observe' first)")
        truth = load_tensor(tpath)
        n_obs, k = samples.shape[:2]
        if truth.shape[0] != n_obs:
            raise UsageError("samples and ground truth disagree on the number of observations")
        recon = samples.reshape(n_obs, k, -1)
        truth = truth.reshape(n_obs, -1)
        report.psnr = float(np.mean([psnr(recon[i, j], truth[i]) for i in range(n_obs) for j in range(k)]))
        if k >= 2:
            report.diversity = mean_diversity(recon)
        data = ex.conditional_data(cfg, dataset)
        op = ex.build_operator(cfg)
        cond_path = Path(args.condition or out / "condition.bin")
        if cond_path.is_file():
            y = load_tensor(cond_path).reshape(n_obs, -1)
            if op is not None and ex.is_image(dataset):
                side = dataset.size
                imgs = recon.reshape(n_obs, k, side, side)
                shape_y = op.output_shape((side, side))
                if not isinstance(op, Mask):
                    report.consistency_psnr = float(np.mean(
                        [consistency_psnr(op, imgs[i, j], y[i].reshape(shape_y))
                         for i in range(n_obs) for j in range(k)]))
                else:
                    extra["consistency_note"] = "mask placement is per-draw; consistency not defined"
            ref_x, ref_y = data.sample(max(ev["n_reference"], 2), rng)
            if n_obs >= 2:
                joint_hat = np.concatenate([recon[:, 0], y], axis=1)
                report.swd = sliced_wasserstein(joint_hat, np.concatenate([ref_x, ref_y], axis=1),
                                                ev["n_projections"], rng)
                extra["swd_label"] = "sliced-Wasserstein on concatenated (x_hat, y)"
    else:
        n = samples.shape[0]
        if n >= 2:
            ref = dataset.sample(ev["n_reference"], rng)
            report.swd = sliced_wasserstein(samples.reshape(n, -1), np.asarray(ref).reshape(ev["n_reference"], -1),
                                            ev["n_projections"], rng)
        else:
            extra["swd_note"] = "fewer than two samples; distance not computed"
    rows = [[name, getattr(report, name)] for name in ("psnr", "consistency_psnr", "diversity", "swd")
            if getattr(report, name) is not None]
    _write_csv(out / "metrics.csv", ["metric", "value"], rows)
    payload = json.loads(report.to_json())
    payload.update(_stamp(cfg))
    payload.update(extra)
    _write_json(out / "eval.json", payload)
    for name, value in rows:
        print(f"{name}: {value:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    selected = args.suites or list(SUITES)
    unknown = [s for s in selected if s not in SUITES]
    if unknown:
        print(f"unknown suite(s): {', '.join(unknown)}; available: {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_INPUT
    verdicts = []
    for name in selected:
        v = run_suite(name)
        verdicts.append(v)
        print(v.summary())
    report = {"passed": all(v.passed for v in verdicts), "suites": [v.as_dict() for v in verdicts]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "verify.json", report)
        _write_csv(out / "verify.csv", ["suite", "check", "value", "threshold", "passed"],
                   [[v.suite, c.name, c.value, c.threshold, c.passed] for v in verdicts for c in v.checks])
    else:
        print(json.dumps({"passed": report["passed"],
                          "suites": {v.suite: v.passed for v in verdicts}}, sort_keys=True))
    failed = [v.suite for v in verdicts if not v.passed]
    if failed:
        print(f"failed suites: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nudiff", description="Non-uniform score-based diffusion experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment YAML file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--threads", type=int, help="BLAS/OpenMP thread limit (default: config, 1)")

    common(sub.add_parser("train", help="train the configured score model(s)"))
    sp = sub.add_parser("sample", help="draw samples from trained or analytic models")
    common(sp)
    sp.add_argument("--n", type=int, help="number of samples (per observation when conditional)")
    sp.add_argument("--checkpoint", action="append", help="checkpoint path (repeat per scale, s_1 first)")
    sp.add_argument("--condition", help="tensor file of conditions, one row per observation")
    sp.add_argument("--analytic", action="store_true", help="use the closed-form Gaussian score")
    sp = sub.add_parser("observe", help="draw held-out (x, y) pairs for conditional runs")
    common(sp)
    sp.add_argument("--n", type=int, help="number of observations (default 8)")
    sp = sub.add_parser("eval", help="score samples against the data distribution")
    common(sp)
    sp.add_argument("--samples", help="sample tensor (default OUT/samples.bin)")
    sp.add_argument("--truth", help="ground-truth tensor for conditional runs (default OUT/truth.bin)")
    sp.add_argument("--condition", help="condition tensor (default OUT/condition.bin)")
    sp = sub.add_parser("verify", help="run oracle suites; prints JSON verdicts")
    sp.add_argument("suites", nargs="*", help=f"suite selectors (default all): {', '.join(SUITES)}")
    sp.add_argument("--out", help="directory for verify.json and verify.csv")
    sp.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread limit")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            with threadpool_limits(limits=args.threads):
                return cmd_verify(args)
        cfg = load_config(args.config, overrides={"seed": args.seed, "out": args.out,
                                                  "threads": args.threads})
        commands = {"train": cmd_train, "sample": cmd_sample, "observe": cmd_observe, "eval": cmd_eval}
        with threadpool_limits(limits=cfg.threads):
            return commands[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
