"""Command-line entry point.

Subcommands: generate-data, init, run-em, sample, eval, verify-theory.
Failures exit nonzero with a single machine-parsable line on stderr:
``error: <reason>``.  When --output is absent, the DIFFEM_OUTPUT_ROOT
environment variable supplies the output directory root.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import re
import sys
from dataclasses import replace

import numpy as np

from . import em as em_mod
from . import io as io_mod
from .em import build_model, encode_conditioning, run_em, train_unconditional
from .manifold import generate_manifold_dataset
from .metrics import gaussian_frechet, sinkhorn_divergence
from .oracle import theory_suite
from .rng import RowStreams, stream
from .samplers import sample as draw_samples

OUTPUT_ROOT_ENV = "DIFFEM_OUTPUT_ROOT"

CLEAN_FILE = "clean.dfem"
OBS_FILE = "observations.dfeo"
METRICS_FILE = "metrics.jsonl"


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _output_dir(args) -> str:
    if args.output:
        out = args.output
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if not root:
            raise ValueError(
                f"no --output given and {OUTPUT_ROOT_ENV} is not set"
            )
        out = os.path.join(root, "run")
    os.makedirs(out, exist_ok=True)
    return out


def _load_config(args) -> io_mod.RunConfig:
    if not args.config:
        raise ValueError("--config is required")
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return io_mod.load_config(args.config, overrides)


def _checkpoint_path(out: str, iteration: int) -> str:
    return os.path.join(out, f"checkpoint_{iteration:04d}.dfec")


def _dataset_path(out: str, iteration: int) -> str:
    return os.path.join(out, f"dataset_{iteration:04d}.dfem")


def _latest_checkpoint(out: str):
    paths = glob.glob(os.path.join(out, "checkpoint_*.dfec"))
    best = None
    for p in paths:
        m = re.match(r"checkpoint_(\d+)\.dfec$", os.path.basename(p))
        if m:
            k = int(m.group(1))
            if best is None or k > best[0]:
                best = (k, p)
    return best


def cmd_generate_data(args) -> int:
    config = _load_config(args)
    out = _output_dir(args)
    fp = config.fingerprint()
    n = args.n if args.n is not None else config["data.n"]
    clean, observations, channel = generate_manifold_dataset(
        n, config["data.sigma_y_sq"], config.seed
    )
    io_mod.save_dataset(os.path.join(out, CLEAN_FILE), clean, fp)
    io_mod.save_observations(os.path.join(out, OBS_FILE), observations,
                             channel, fp)
    print(json.dumps({"written": out, "n": n, "d": clean.shape[1]},
                     sort_keys=True))
    return 0


def _load_run_inputs(args, config):
    fp = config.fingerprint()
    if args.observations:
        obs_path = args.observations
    else:
        obs_path = os.path.join(_output_dir(args), OBS_FILE)
    observations, channel = io_mod.load_observations(obs_path, fp)
    return observations, channel, fp


def _metric_fn(config, out, clean):
    if clean is None:
        return None
    sub = min(len(clean), 2048)

    def metric_fn(k, dataset):
        a = dataset[:sub]
        b = clean[:sub]
        return {
            "sinkhorn": float(sinkhorn_divergence(a, b)),
            "gaussian_frechet": float(gaussian_frechet(a, b)),
        }

    return metric_fn


def _run(args, iterations_override=None, resume=False) -> int:
    config = _load_config(args)
    out = _output_dir(args)
    fp = config.fingerprint()
    observations, channel, _ = _load_run_inputs(args, config)
    em_cfg = config.em()
    if iterations_override is not None:
        em_cfg = replace(em_cfg, iterations=iterations_override)
    clean_path = os.path.join(out, CLEAN_FILE)
    clean = io_mod.load_dataset(clean_path, fp) if os.path.exists(clean_path) else None
    metrics_path = os.path.join(out, METRICS_FILE)

    initial_model = initial_dataset = initial_mean = None
    start_iteration = 0
    if resume:
        latest = _latest_checkpoint(out)
        if latest is None:
            raise ValueError(f"--resume given but no checkpoint in {out}")
        start_iteration, ckpt_path = latest
        initial_model, _, initial_mean = io_mod.load_checkpoint(ckpt_path, fp)
        initial_dataset = io_mod.load_dataset(
            _dataset_path(out, start_iteration), fp
        )
        if start_iteration >= em_cfg.iterations:
            raise ValueError(
                f"checkpoint iteration {start_iteration} >= configured "
                f"em.iterations {em_cfg.iterations}; nothing to resume"
            )

    def callback(state, record):
        io_mod.save_checkpoint(
            _checkpoint_path(out, state.iteration), state.model,
            state.iteration, fp,
            dataset_mean=state.dataset.mean(axis=0),
        )
        io_mod.save_dataset(_dataset_path(out, state.iteration),
                            state.dataset, fp)
        io_mod.append_metric(metrics_path, record)

    with io_mod.RunLock(out):
        io_mod.init_metrics(metrics_path, fp)
        state = run_em(
            observations, channel, em_cfg, config.schedule(),
            config["model.hidden"], config.seed,
            metric_fn=_metric_fn(config, out, clean), callback=callback,
            initial_model=initial_model, initial_dataset=initial_dataset,
            initial_mean=initial_mean, start_iteration=start_iteration,
        )
    print(json.dumps({"iterations": state.iteration, "output": out},
                     sort_keys=True))
    return 0


def cmd_init(args) -> int:
    return _run(args, iterations_override=0)


def cmd_run_em(args) -> int:
    return _run(args, resume=args.resume)


def cmd_sample(args) -> int:
    config = _load_config(args)
    out = _output_dir(args)
    fp = config.fingerprint()
    if not args.checkpoint:
        raise ValueError("--checkpoint is required for sample")
    model, iteration, _ = io_mod.load_checkpoint(args.checkpoint, fp)
    sampler_cfg = config.sampler()
    if args.observations:
        observations, _channel = io_mod.load_observations(args.observations, fp)
        cond = encode_conditioning(observations)
        n = len(observations)
        tag = "cli-sample-cond"
    else:
        n = args.n if args.n is not None else config["data.n"]
        cond = None
        tag = "cli-sample"
    streams = RowStreams(config.seed, tag, range(n))
    x = draw_samples(model, cond, sampler_cfg, streams, n=n,
                     use_ema=model.ema is not None)
    path = os.path.join(out, f"samples_{iteration:04d}.dfem")
    io_mod.save_dataset(path, x, fp)
    print(json.dumps({"written": path, "n": n}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    fp = config.fingerprint()
    a = io_mod.load_dataset(args.files[0], fp)
    b = io_mod.load_dataset(args.files[1], fp)
    record = {
        "sinkhorn": float(sinkhorn_divergence(a, b)),
        "gaussian_frechet": float(gaussian_frechet(a, b)),
        "n_a": int(a.shape[0]), "n_b": int(b.shape[0]),
    }
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_verify_theory(args) -> int:
    config = _load_config(args)
    out = _output_dir(args)
    fp = config.fingerprint()
    records = theory_suite(config.seed)
    path = os.path.join(out, "theory_report.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(io_mod.metrics_header(fp), sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    n_ok = sum(r["ok"] for r in records)
    print(json.dumps({"models": len(records), "ok": n_ok, "report": path},
                     sort_keys=True))
    if n_ok != len(records):
        raise ValueError(f"{len(records) - n_ok} models violated a bound")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffem",
        description="EM-trained diffusion models from corrupted observations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (overrides config)")
        p.add_argument("--output", default=None, help="output directory")
        p.set_defaults(fn=fn)
        return p

    p = add("generate-data", cmd_generate_data,
            help="write the manifold dataset and observations")
    p.add_argument("--n", type=int, default=None)
    p = add("init", cmd_init, help="initialize and write checkpoint 0")
    p.add_argument("--observations", default=None)
    p = add("run-em", cmd_run_em, help="run the EM loop")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--observations", default=None)
    p = add("sample", cmd_sample, help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--observations", default=None)
    p.add_argument("--n", type=int, default=None)
    p = add("eval", cmd_eval, help="compare two sample files")
    p.add_argument("files", nargs=2, metavar="SAMPLES")
    add("verify-theory", cmd_verify_theory,
        help="run the convergence-theory oracle suite")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single-line machine-parsable failure contract
        return _fail(f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
