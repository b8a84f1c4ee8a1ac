"""
imabench command line.

    python -m imabench [--config PATH] [--out DIR] [--seed N] [--threads K] <command> ...

Exit codes: 0 success, 1 failed check or aborted run, 2 configuration error.
"""
import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import ValidationError
from scipy.stats import kstest

from .acceptance import run_acceptance
from .config import BIAS_SCALE, DARMOIS_NODES, EVAL_SAMPLES, LEAKY_ALPHA, LOG_LEVEL, OUTPUT_DIR
from .contrast import isoperimetric_check, log_sin_theta_profile, write_isoperimetric_csv, write_profile_csv
from .errors import ConfigError, ImaBenchError, TrainingAborted
from .flows import build_flow_from_spec, load_checkpoint, save_checkpoint
from .metrics import METRICS_COLUMNS, evaluate_model, mixing_cima, model_cima
from .mixing import (
    SourcePrior,
    darmois_2d,
    load_mixing,
    mix_inverse,
    sample_dataset,
    sample_mixing,
    save_mixing,
    true_log_density,
)
from .models import RegularizerSpec, RunConfig, RunManifest, config_hash
from .suites import SUITES, run_suite, self_check, suite_config
from .training import make_sampler, train, write_manifest

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format='%(asctime)s [%(levelname)s] %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2


# ==================== Helpers ====================

def _read_config(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e


def _run_config(args) -> RunConfig:
    cfg = RunConfig.model_validate(_read_config(args.config))
    if args.seed is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": args.seed})})
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    logger.info(f"📄 Wrote {path}")
    return path


# ==================== mixing ====================

def cmd_mixing_gen(args) -> int:
    out = _out_dir(args)
    seed = _seed(args)
    mixing = sample_mixing(args.n, args.layers, args.init, seed, alpha=args.alpha, bias_scale=args.bias_scale)
    path = save_mixing(mixing, out / f"mixing_n{args.n}_L{args.layers}_{args.init}_seed{seed}.json")
    logger.info(f"✅ Mixing saved to {path}")
    if args.samples:
        data = sample_dataset(mixing, SourcePrior(args.prior, args.n), args.samples, seed)
        logger.info(f"✅ Dataset saved to {data.to_csv(path.with_suffix('.csv'))}")
    return EXIT_OK


def cmd_mixing_eval(args) -> int:
    mixing = load_mixing(args.mixing)
    prior = SourcePrior(args.prior, mixing.n)
    data = sample_dataset(mixing, prior, args.samples, _seed(args))
    round_trip = float(np.max(np.abs(mix_inverse(mixing, data.observations) - data.sources)))
    cima = mixing_cima(mixing, prior, args.samples, _seed(args))
    logp = true_log_density(mixing, prior, data.observations)
    summary = {
        "n": mixing.n,
        "L": mixing.L,
        "round_trip_max_error": round_trip,
        "cima": cima.value,
        "cima_se": cima.std_error,
        "mean_log_density": float(np.mean(logp)),
    }
    logger.info(f"📊 Round trip {round_trip:.2e}, C_IMA {cima.value:.4f} ± {cima.std_error:.4f}")
    _write_json(_out_dir(args) / "mixing_eval.json", summary)
    return EXIT_OK


# ==================== cima ====================

def cmd_cima_eval(args) -> int:
    out = _out_dir(args)
    if args.profile:
        thetas = np.linspace(0.0, math.pi, args.profile + 2)[1:-1]
        write_profile_csv(log_sin_theta_profile(thetas), out / "log_sin_profile.csv")
        reports = [isoperimetric_check(area, 1000, _seed(args)) for area in (0.25, 1.0, 4.0)]
        write_isoperimetric_csv(reports, out / "isoperimetric.csv")
        if not all(r.passed for r in reports):
            logger.error("❌ Isoperimetric check failed")
            return EXIT_ASSERTION
    if not args.mixing:
        return EXIT_OK

    mixing = load_mixing(args.mixing)
    prior = SourcePrior(args.prior, mixing.n)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        data = sample_dataset(mixing, prior, args.samples, _seed(args))
        estimate = model_cima(model, data.observations)
        target = "model"
    else:
        estimate = mixing_cima(mixing, prior, args.samples, _seed(args))
        target = "mixing"
    logger.info(f"📊 C_IMA of {target}: {estimate.value:.6f} ± {estimate.std_error:.6f} ({estimate.sample_count} samples)")
    _write_json(out / f"cima_{target}.json", {
        "target": target,
        "value": estimate.value,
        "std_error": estimate.std_error,
        "sample_count": estimate.sample_count,
    })
    return EXIT_OK


# ==================== training ====================

def _train_and_save(args, kind: str, base: str, reg: RegularizerSpec, stem: str) -> int:
    cfg = _run_config(args)
    mixing = load_mixing(args.mixing)
    prior = SourcePrior(args.prior, mixing.n)
    out = _out_dir(args)
    model = build_flow_from_spec(mixing.n, cfg.flow, kind, base, cfg.train.seed)
    manifest = RunManifest(
        command=" ".join(sys.argv[1:]) or stem,
        config={"run": cfg.model_dump(), "reg": reg.model_dump(), "mixing": str(args.mixing), "prior": args.prior},
        seeds={"train": cfg.train.seed, "mixing": mixing.seed},
    )
    write_manifest(manifest, out / f"{stem}_manifest.json")
    try:
        model, log = train(model, make_sampler(mixing, prior, cfg.train), cfg.train, reg)
    except TrainingAborted as e:
        save_checkpoint(e.model, out / f"{stem}_checkpoint.json", config_hash(cfg.train))
        e.log.to_csv(out / f"{stem}_trajectory.csv")
        logger.error(f"❌ Training aborted at iteration {e.iteration}; last valid state saved")
        return EXIT_ASSERTION
    save_checkpoint(model, out / f"{stem}_checkpoint.json", config_hash(cfg.train))
    log.to_csv(out / f"{stem}_trajectory.csv")
    logger.info(f"✅ Checkpoint and trajectory written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    reg = RegularizerSpec(kind=args.reg_kind, strength=args.strength)
    return _train_and_save(args, "full", "logistic", reg, f"flow_{reg.label}")


def cmd_darmois_train(args) -> int:
    return _train_and_save(args, "triangular", "gaussian", RegularizerSpec(), "darmois")


def cmd_darmois_exact2d(args) -> int:
    mixing = load_mixing(args.mixing)
    prior = SourcePrior(args.prior, mixing.n)
    data = sample_dataset(mixing, prior, args.samples, _seed(args))
    u = darmois_2d(mixing, prior, data.observations, nodes=args.nodes)
    stats = [float(kstest(u[:, i], "uniform").statistic) for i in range(2)]
    path = _out_dir(args) / "darmois_exact2d.csv"
    with open(path, "w") as f:
        f.write("x1,x2,u1,u2\n")
        for x, v in zip(data.observations, u):
            f.write(",".join(repr(float(c)) for c in (*x, *v)) + "\n")
    logger.info(f"📊 KS statistics against uniform: {stats[0]:.4f}, {stats[1]:.4f}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    mixing = load_mixing(args.mixing)
    prior = SourcePrior(args.prior, mixing.n)
    model = load_checkpoint(args.checkpoint)
    record = evaluate_model(mixing, prior, model, args.samples, _seed(args))
    reg = RegularizerSpec(kind=args.reg_kind, strength=args.strength)
    row = record.row(mixing.seed, mixing.L, mixing.n, reg, model.seed)
    path = _out_dir(args) / "metrics.csv"
    with open(path, "w") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row.values()) + "\n")
    logger.info(f"📄 Wrote {path}")
    return EXIT_OK


# ==================== suites and checks ====================

def cmd_suite(args) -> int:
    overrides = _read_config(args.config)
    overrides.update({"out_dir": args.out, "threads": args.threads})
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    cfg = suite_config(args.name, overrides)
    result = run_suite(cfg)
    if not args.self_check:
        return EXIT_OK
    checks = self_check(result, cfg)
    _write_json(result.out_dir / "self_check.json", {c.name: {"passed": c.passed, "detail": c.detail} for c in checks})
    return EXIT_OK if all(c.passed for c in checks) else EXIT_ASSERTION


def cmd_check(args) -> int:
    results = run_acceptance(_seed(args))
    _write_json(_out_dir(args) / "acceptance.json", {r.name: {"passed": r.passed, "detail": r.detail} for r in results})
    return EXIT_OK if all(r.passed for r in results) else EXIT_ASSERTION


# ==================== Parser ====================

def _add_prior(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prior", choices=["standard_normal", "uniform01"], default="standard_normal")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imabench", description="Independent Mechanism Analysis experiments")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", default=OUTPUT_DIR, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    mixing = sub.add_parser("mixing", help="generate or evaluate ground-truth mixings")
    mixing_sub = mixing.add_subparsers(dest="action", required=True)
    gen = mixing_sub.add_parser("gen")
    gen.add_argument("--n", type=int, default=5)
    gen.add_argument("--layers", type=int, default=4)
    gen.add_argument("--init", choices=["orthogonal", "uniform"], default="orthogonal")
    gen.add_argument("--alpha", type=float, default=LEAKY_ALPHA)
    gen.add_argument("--bias-scale", type=float, default=BIAS_SCALE)
    gen.add_argument("--samples", type=int, default=0, help="also export a dataset CSV of this size")
    _add_prior(gen)
    gen.set_defaults(handler=cmd_mixing_gen)
    ev = mixing_sub.add_parser("eval")
    ev.add_argument("--mixing", required=True)
    ev.add_argument("--samples", type=int, default=1000)
    _add_prior(ev)
    ev.set_defaults(handler=cmd_mixing_eval)

    cima = sub.add_parser("cima", help="C_IMA of a mixing or a trained model")
    cima_sub = cima.add_subparsers(dest="action", required=True)
    cima_eval = cima_sub.add_parser("eval")
    cima_eval.add_argument("--mixing")
    cima_eval.add_argument("--checkpoint")
    cima_eval.add_argument("--samples", type=int, default=EVAL_SAMPLES)
    cima_eval.add_argument("--profile", type=int, default=0, help="also export a log|sin theta| profile with this many points")
    _add_prior(cima_eval)
    cima_eval.set_defaults(handler=cmd_cima_eval)

    darmois = sub.add_parser("darmois", help="Darmois solutions: learned (triangular flow) or exact (n=2)")
    darmois_sub = darmois.add_subparsers(dest="action", required=True)
    d_train = darmois_sub.add_parser("train")
    d_train.add_argument("--mixing", required=True)
    _add_prior(d_train)
    d_train.set_defaults(handler=cmd_darmois_train)
    exact = darmois_sub.add_parser("exact2d")
    exact.add_argument("--mixing", required=True)
    exact.add_argument("--samples", type=int, default=10000)
    exact.add_argument("--nodes", type=int, default=DARMOIS_NODES)
    _add_prior(exact)
    exact.set_defaults(handler=cmd_darmois_exact2d)

    tr = sub.add_parser("train", help="regularized maximum-likelihood training of a full-Jacobian flow")
    tr.add_argument("--mixing", required=True)
    tr.add_argument("--reg-kind", choices=["none", "cima", "l1", "l2"], default="none")
    tr.add_argument("--strength", type=float, default=0.0)
    _add_prior(tr)
    tr.set_defaults(handler=cmd_train)

    met = sub.add_parser("metrics", help="MCC, KLD and C_IMA of a checkpoint against its mixing")
    met.add_argument("--mixing", required=True)
    met.add_argument("--checkpoint", required=True)
    met.add_argument("--samples", type=int, default=EVAL_SAMPLES)
    met.add_argument("--reg-kind", choices=["none", "cima", "l1", "l2"], default="none")
    met.add_argument("--strength", type=float, default=0.0)
    _add_prior(met)
    met.set_defaults(handler=cmd_metrics)

    suite = sub.add_parser("suite", help="run an experiment suite")
    suite.add_argument("name", choices=sorted(SUITES))
    suite.add_argument("--self-check", action="store_true", help="exit 1 if a directional assertion fails")
    suite.set_defaults(handler=cmd_suite)

    check = sub.add_parser("check", help="run the fast acceptance checks")
    check.set_defaults(handler=cmd_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        return args.handler(args)
    except ValidationError as e:
        logger.error(f"❌ Invalid configuration: {e}")
        return EXIT_CONFIG
    except ConfigError as e:
        logger.error(f"❌ {e}")
        return EXIT_CONFIG
    except ImaBenchError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_ASSERTION
    except ValueError as e:
        logger.error(f"❌ Invalid arguments: {e}")
        return EXIT_CONFIG
