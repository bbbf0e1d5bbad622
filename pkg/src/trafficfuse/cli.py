"""Command-line front end: one subcommand per pipeline stage.

Every subcommand reads the same experiment JSON (defaults apply when no
config is given), reruns the deterministic stage chain up to its own
stage, and writes that stage's artifacts into --out. `run` executes the
whole chain and writes the full artifact set.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .harness import ExperimentConfig, Pipeline, load_config
from .network import save_counts
from .observability import analyze, report_to_csv, report_to_json
from .propagation import export_localization, export_transition
from .train import save_checkpoint

STAGES = (
    "simulate",
    "sample",
    "features",
    "train",
    "calibrate",
    "observability",
    "evaluate",
    "run",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trafficfuse",
        description="Camera-calibrated traffic volume estimation from probe counts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        blurb = ("full chain, complete artifact set" if name == "run"
                 else f"run the chain through the {name} stage")
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", help="experiment JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="artifact directory (default: out)")
    return parser


def _configure(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _outdir(args, cfg: ExperimentConfig) -> str:
    out = args.out or cfg.out_dir or "out"
    os.makedirs(out, exist_ok=True)
    return out


def _cmd_simulate(pipe: Pipeline, out: str) -> str:
    pipe.simulate()
    path = os.path.join(out, "truth_counts.csv")
    save_counts(pipe.truth, path)
    n, t = pipe.truth.values.shape
    return f"simulate: {n} segments x {t} bins -> {path}"


def _cmd_sample(pipe: Pipeline, out: str) -> str:
    pipe.sample()
    path = os.path.join(out, "probe_counts.csv")
    save_counts(pipe.probe, path)
    import numpy as np

    rate = float(np.nansum(pipe.probe.values) / max(np.nansum(pipe.truth.values), 1.0))
    return f"sample: through-rate {rate:.3f} -> {path}"


def _cmd_features(pipe: Pipeline, out: str) -> str:
    pipe.features()
    prefix = os.path.join(out, "features")
    pipe.tensor.save(prefix)
    shape = "x".join(str(k) for k in pipe.tensor.values.shape)
    return f"features: tensor {shape} -> {prefix}.bin"


def _cmd_train(pipe: Pipeline, out: str) -> str:
    pipe.fit()
    log = os.path.join(out, "training_log.csv")
    pipe.trained.write_log(log)
    save_checkpoint(os.path.join(out, "model"), pipe.trained.params, pipe.cfg.model)
    return f"train: best validation loss {pipe.trained.best_val:.4f} -> {log}"


def _cmd_calibrate(pipe: Pipeline, out: str) -> str:
    pipe.calibrate()
    path = os.path.join(out, "calibrated_counts.csv")
    save_counts(pipe.calibrated, path)
    pipe._write_calibration_field(os.path.join(out, "calibration_field.csv"))
    export_transition(pipe.trans, pipe.net, os.path.join(out, "transition.csv"))
    export_localization(pipe.localization, pipe.net, os.path.join(out, "localization.csv"))
    import numpy as np

    alpha = float(np.median(pipe.alpha_path[:, pipe.t_assim - 1]))
    return f"calibrate: median multiplier {alpha:.3f} -> {path}"


def _cmd_observability(pipe: Pipeline, out: str) -> str:
    pipe.build()
    report = analyze(pipe.net, pipe.fd, pipe.calibration, bin_seconds=pipe.cfg.bin_seconds)
    path = os.path.join(out, "observability.json")
    report_to_json(report, pipe.net, path)
    report_to_csv(report, pipe.net, os.path.join(out, "observability_conf.csv"))
    ranks = ", ".join(f"{k}={v:.3f}" for k, v in sorted(report.gamma_rank.items()))
    return f"observability: rank ratios {ranks} -> {path}"


def _cmd_evaluate(pipe: Pipeline, out: str) -> str:
    pipe.metrics()
    from .util import atomic_write_text, canonical_json

    payload = {
        "seed": pipe.cfg.seed,
        "config": pipe.cfg.to_dict(),
        "metrics": pipe.report.to_dict(),
        "uncalibrated": pipe.uncal_report.to_dict(),
        "diagnostics": pipe.diagnostics,
    }
    path = os.path.join(out, "metrics.json")
    atomic_write_text(path, canonical_json(payload))
    pooled = pipe.report.pooled_r2
    pooled_txt = "n/a" if pooled is None else f"{pooled:.4f}"
    return f"evaluate: pooled r2 {pooled_txt} -> {path}"


def _cmd_run(pipe: Pipeline, out: str) -> str:
    paths = pipe.write_artifacts(out)
    pooled = pipe.report.pooled_r2
    pooled_txt = "n/a" if pooled is None else f"{pooled:.4f}"
    cov = pipe.report.coverage
    cov_txt = "n/a" if cov is None else f"{cov:.3f}"
    return f"run: pooled r2 {pooled_txt}, coverage {cov_txt} -> {paths['metrics']}"


_COMMANDS = {
    "simulate": _cmd_simulate,
    "sample": _cmd_sample,
    "features": _cmd_features,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "observability": _cmd_observability,
    "evaluate": _cmd_evaluate,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _configure(args)
    out = _outdir(args, cfg)
    pipe = Pipeline(cfg)
    line = _COMMANDS[args.command](pipe, out)
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
