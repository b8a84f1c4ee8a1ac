"""
Experiment suites: grids of independent cells (mixing x regularizer x seed)
run on a bounded thread pool, persisted one JSON file per finished cell so an
interrupted suite resumes where it stopped, and collated into CSV tables.
"""
import csv
import hashlib
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .acceptance import CheckResult
from .errors import ImaBenchError, QuadratureError, SchemaMismatch
from .flows import build_flow_from_spec, save_checkpoint, transform
from .metrics import METRICS_COLUMNS, evaluate_model, kld_estimate, mixing_cima, model_cima
from .mixing import SourcePrior, build_darmois_grid, darmois_2d, load_mixing, sample_dataset, sample_mixing, save_mixing
from .models import RegularizerSpec, RunManifest, SuiteConfig, SuiteName, config_hash
from .training import TRAJECTORY_COLUMNS, make_sampler, train, write_manifest

logger = logging.getLogger(__name__)

Row = Dict[str, Any]
Tables = Dict[str, List[Row]]

EVAL_SEED_OFFSET = 1_000_003
SCATTER_POINTS = 2000

# Self-check thresholds
MCC_GAIN_MARGIN = 0.05
PENALTY_MCC_SLACK = 0.02
PER_SEED_SHARE = 0.8

FIG1_COLUMNS = ["L", "seed", "cima_true", "cima_darmois", "kld_darmois"]
SUMMARY_COLUMNS = ["n", "L", "reg_kind", "strength", "seed", "cima_initial", "cima_final", "loglik_initial", "loglik_final"]
DYNAMICS_COLUMNS = ["n", "L", "reg_kind", "strength", "seed"] + [c for c in TRAJECTORY_COLUMNS if c != "wallclock_s"]
TRAIL_COLUMNS = ["status", "manifest"]

_LAMBDAS = [{"kind": "none"}, {"kind": "cima", "strength": 0.5}, {"kind": "cima", "strength": 1.0}]
_PENALTIES = [{"kind": k, "strength": s} for k in ("l1", "l2") for s in (1e-4, 5e-4, 1e-3)]

SUITE_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "fig1": {"layers": [2, 4, 8, 12, 16, 20], "init_kind": "orthogonal"},
    "figA_uniform": {"layers": [2, 3, 4, 5], "init_kind": "uniform"},
    "recovery": {"layers": [2, 4, 8], "regularizers": _LAMBDAS},
    "training_dynamics": {"dims": [2, 5], "layers": [4], "regularizers": _LAMBDAS},
    "reg_comparison": {"layers": [4], "regularizers": _LAMBDAS + _PENALTIES},
}


def suite_config(name: SuiteName, overrides: Optional[Dict[str, Any]] = None) -> SuiteConfig:
    """Suite defaults overlaid with user overrides, validated."""
    payload = {"suite": name, **SUITE_DEFAULTS[name], **(overrides or {})}
    payload["suite"] = name
    return SuiteConfig.model_validate(payload)


def run_manifest(cfg: SuiteConfig) -> RunManifest:
    return RunManifest(
        command=f"suite {cfg.suite}",
        config=cfg.model_dump(exclude={"out_dir", "threads"}),
        seeds={f"seed{i}": s for i, s in enumerate(cfg.seeds)},
    )


def _regularizers(cfg: SuiteConfig) -> List[RegularizerSpec]:
    seen, out = set(), []
    for reg in cfg.regularizers or [RegularizerSpec()]:
        if (reg.kind, reg.strength) not in seen:
            seen.add((reg.kind, reg.strength))
            out.append(reg)
    return out


# ==================== Cell runner ====================

@dataclass
class SuiteResult:
    suite: str
    out_dir: Path
    manifest_digest: str
    tables: Tables
    csv_paths: Dict[str, Path] = field(default_factory=dict)
    plot_specs: List[Path] = field(default_factory=list)
    failed_cells: int = 0
    skipped_cells: int = 0

    def ok_rows(self, table: str = "main") -> List[Row]:
        return [r for r in self.tables.get(table, []) if r["status"] == "ok"]


def _cell_hash(digest: str, key: Row) -> str:
    payload = json.dumps({"manifest": digest, "key": key}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_cell(path: Path) -> Optional[Tables]:
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())["tables"]
    except (json.JSONDecodeError, KeyError) as e:
        logger.warning(f"⚠️  Ignoring unreadable cell file {path.name}: {e}")
        return None


def run_cells(
    cfg: SuiteConfig,
    out_dir: Path,
    digest: str,
    keys: Sequence[Row],
    work: Callable[[Row], Tables],
    table_names: Sequence[str],
) -> Tuple[Tables, int, int]:
    """
    Run `work(key)` for every cell key on cfg.threads workers. Finished cells
    are read back from cells/<hash>.json; failures become status rows and are
    not persisted, so a re-run retries them.
    """
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    counters = {"failed": 0, "skipped": 0}
    lock = threading.Lock()

    def run_one(key: Row) -> Tables:
        path = cell_dir / f"{_cell_hash(digest, key)}.json"
        cached = _load_cell(path)
        if cached is not None:
            logger.info(f"⏭️  Cell {key} already done, skipping")
            with lock:
                counters["skipped"] += 1
            return cached
        try:
            tables = work(key)
        except (ImaBenchError, ValueError, ArithmeticError, RuntimeError) as e:
            logger.error(f"❌ Cell {key} failed: {type(e).__name__}: {e}")
            with lock:
                counters["failed"] += 1
            return {name: [{**key, "status": f"failed:{type(e).__name__}"}] for name in table_names}
        for rows in tables.values():
            for row in rows:
                row["status"] = "ok"
        _write_atomic(path, json.dumps({"key": key, "tables": tables}, sort_keys=True))
        logger.info(f"✅ Cell {key} done")
        return tables

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        results = list(pool.map(run_one, keys))

    merged: Tables = {name: [] for name in table_names}
    for tables in results:
        for name, rows in tables.items():
            merged[name].extend(rows)
    return merged, counters["failed"], counters["skipped"]


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(rows: List[Row], columns: Sequence[str], sort_by: Sequence[str], digest: str, path: Path) -> Path:
    header = list(columns) + TRAIL_COLUMNS

    def order(row: Row):
        return tuple((row.get(c) is None, row.get(c)) for c in sort_by)

    lines = []
    for row in sorted(rows, key=order):
        full = {**row, "manifest": digest}
        lines.append([_format(full.get(c)) for c in header])
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(lines)
    os.replace(tmp, path)
    return path


def _prepare(cfg: SuiteConfig) -> Tuple[Path, str]:
    torch.set_num_threads(1)
    out_dir = Path(cfg.out_dir) / cfg.suite
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = run_manifest(cfg)
    write_manifest(manifest, out_dir / "manifest.json")
    logger.info("=" * 70)
    logger.info(f"🚀 Suite {cfg.suite} (manifest {manifest.digest}) -> {out_dir}")
    logger.info("=" * 70)
    return out_dir, manifest.digest


def _finish(result: SuiteResult) -> SuiteResult:
    logger.info("=" * 70)
    logger.info(
        f"✅ Suite {result.suite} finished: {result.failed_cells} failed, {result.skipped_cells} resumed"
    )
    for path in result.csv_paths.values():
        logger.info(f"   {path}")
    logger.info("=" * 70)
    return result


def _eval_seed(seed: int) -> int:
    return seed + EVAL_SEED_OFFSET


def _train_config(cfg: SuiteConfig, seed: int):
    return cfg.train.model_copy(update={"seed": seed})


# ==================== fig1 / figA_uniform ====================

def _mixing_path(out_dir: Path, L: int, seed: int) -> Path:
    return out_dir / "mixings" / f"L{L}_seed{seed}.json"


def _darmois_cell(cfg: SuiteConfig, out_dir: Path, key: Row) -> Tables:
    L, seed = key["L"], key["seed"]
    prior = SourcePrior(cfg.prior, cfg.n)
    mixing = sample_mixing(cfg.n, L, cfg.init_kind, seed, alpha=cfg.alpha, bias_scale=cfg.bias_scale)
    path = _mixing_path(out_dir, L, seed)
    path.parent.mkdir(exist_ok=True)
    save_mixing(mixing, path)
    truth = mixing_cima(mixing, prior, cfg.eval_samples, seed)

    tc = _train_config(cfg, seed)
    learner = build_flow_from_spec(cfg.n, cfg.flow, "triangular", "gaussian", seed)
    learner, _ = train(learner, make_sampler(mixing, prior, tc), tc, RegularizerSpec())

    data = sample_dataset(mixing, prior, cfg.eval_samples, _eval_seed(seed))
    darmois = model_cima(learner, data.observations)
    kld, _ = kld_estimate(mixing, prior, learner, cfg.eval_samples, _eval_seed(seed))
    return {"main": [{**key, "cima_true": truth.value, "cima_darmois": darmois.value, "kld_darmois": kld}]}


def _darmois_suite(cfg: SuiteConfig) -> SuiteResult:
    out_dir, digest = _prepare(cfg)
    keys = [{"L": L, "seed": s} for L in cfg.layers for s in cfg.seeds]
    tables, failed, skipped = run_cells(cfg, out_dir, digest, keys, lambda k: _darmois_cell(cfg, out_dir, k), ["main"])
    result = SuiteResult(cfg.suite, out_dir, digest, tables, failed_cells=failed, skipped_cells=skipped)
    path = write_table(tables["main"], FIG1_COLUMNS, ["L", "seed"], digest, out_dir / f"{cfg.suite}.csv")
    result.csv_paths["main"] = path
    result.plot_specs.append(export_plot_spec(path, cfg.suite))
    return _finish(result)


def suite_fig1(cfg: SuiteConfig) -> SuiteResult:
    """C_IMA of random orthogonal-init MLPs and of learned Darmois solutions across depth."""
    return _darmois_suite(cfg)


def suite_figA_uniform(cfg: SuiteConfig) -> SuiteResult:
    if cfg.init_kind != "uniform":
        raise ValueError("suite figA_uniform requires init_kind = uniform")
    return _darmois_suite(cfg)


# ==================== recovery / reg_comparison ====================

def _hue_lightness(sources: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.arctan2(sources[:, 1], sources[:, 0]), np.linalg.norm(sources, axis=1)


def _write_scatter(path: Path, columns: Dict[str, np.ndarray]) -> Path:
    names = list(columns)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(names)
        for row in zip(*(columns[c] for c in names)):
            writer.writerow([repr(float(v)) for v in row])
    return path


def _recovery_cell(cfg: SuiteConfig, out_dir: Path, key: Row, scatter: bool) -> Tables:
    L, seed = key["L"], key["seed"]
    reg = RegularizerSpec(kind=key["reg_kind"], strength=key["strength"])
    prior = SourcePrior(cfg.prior, cfg.n)
    mixing = sample_mixing(cfg.n, L, cfg.init_kind, seed, alpha=cfg.alpha, bias_scale=cfg.bias_scale)

    tc = _train_config(cfg, seed)
    model = build_flow_from_spec(cfg.n, cfg.flow, "full", "logistic", seed)
    model, _ = train(model, make_sampler(mixing, prior, tc), tc, reg)
    record = evaluate_model(mixing, prior, model, cfg.eval_samples, _eval_seed(seed))

    checkpoints = out_dir / "checkpoints"
    checkpoints.mkdir(exist_ok=True)
    save_checkpoint(model, checkpoints / f"L{L}_seed{seed}_{reg.label}.json", config_hash(tc))

    if scatter:
        data = sample_dataset(mixing, prior, SCATTER_POINTS, _eval_seed(seed))
        y = transform(model, data.observations)
        hue, lightness = _hue_lightness(data.sources)
        scatter_dir = out_dir / "scatter"
        scatter_dir.mkdir(exist_ok=True)
        _write_scatter(
            scatter_dir / f"L{L}_seed{seed}_{reg.label}.csv",
            {"s1": data.sources[:, 0], "s2": data.sources[:, 1], "y1": y[:, 0], "y2": y[:, 1], "hue": hue, "lightness": lightness},
        )
    return {"main": [record.row(seed, L, cfg.n, reg, seed)]}


def write_truth_scatter(cfg: SuiteConfig, out_dir: Path, L: int, seed: int) -> Optional[Path]:
    """Sources, observations and the exact Darmois output for one n=2 mixing."""
    path = out_dir / "scatter" / f"L{L}_seed{seed}_truth.csv"
    if path.exists():
        return path
    path.parent.mkdir(exist_ok=True)
    prior = SourcePrior(cfg.prior, 2)
    mixing = sample_mixing(2, L, cfg.init_kind, seed, alpha=cfg.alpha, bias_scale=cfg.bias_scale)
    data = sample_dataset(mixing, prior, SCATTER_POINTS, _eval_seed(seed))
    columns = {
        "s1": data.sources[:, 0],
        "s2": data.sources[:, 1],
        "x1": data.observations[:, 0],
        "x2": data.observations[:, 1],
    }
    try:
        grid = build_darmois_grid(mixing, prior, nodes=cfg.darmois_nodes)
        u = darmois_2d(mixing, prior, data.observations, grid=grid)
        columns["darmois1"], columns["darmois2"] = u[:, 0], u[:, 1]
    except QuadratureError as e:
        logger.warning(f"⚠️  No Darmois columns for L={L} seed={seed}: {e}")
    columns["hue"], columns["lightness"] = _hue_lightness(data.sources)
    return _write_scatter(path, columns)


def _metrics_suite(cfg: SuiteConfig, scatter: bool) -> SuiteResult:
    out_dir, digest = _prepare(cfg)
    regs = _regularizers(cfg)
    keys = [
        {"L": L, "reg_kind": r.kind, "strength": float(r.strength), "seed": s}
        for L in cfg.layers
        for r in regs
        for s in cfg.seeds
    ]
    tables, failed, skipped = run_cells(
        cfg, out_dir, digest, keys, lambda k: _recovery_cell(cfg, out_dir, k, scatter), ["main"]
    )
    for row in tables["main"]:
        if row["status"] != "ok":
            row.update({"mixing_seed": row["seed"], "run_seed": row["seed"], "n": cfg.n})
    result = SuiteResult(cfg.suite, out_dir, digest, tables, failed_cells=failed, skipped_cells=skipped)
    path = write_table(
        tables["main"], METRICS_COLUMNS, ["L", "reg_kind", "strength", "mixing_seed"], digest, out_dir / f"{cfg.suite}.csv"
    )
    result.csv_paths["main"] = path
    result.plot_specs.append(export_plot_spec(path, cfg.suite))
    if scatter:
        for L in cfg.layers:
            for s in cfg.seeds:
                write_truth_scatter(cfg, out_dir, L, s)
    return _finish(result)


def suite_recovery(cfg: SuiteConfig) -> SuiteResult:
    """MCC, KLD and C_IMA of full-Jacobian flows over (L, lambda, seed); n=2 adds scatter exports."""
    return _metrics_suite(cfg, scatter=cfg.n == 2)


def suite_reg_comparison(cfg: SuiteConfig) -> SuiteResult:
    return _metrics_suite(cfg, scatter=False)


# ==================== training_dynamics ====================

def _dynamics_cell(cfg: SuiteConfig, out_dir: Path, key: Row) -> Tables:
    n, L, seed = key["n"], key["L"], key["seed"]
    reg = RegularizerSpec(kind=key["reg_kind"], strength=key["strength"])
    prior = SourcePrior(cfg.prior, n)
    mixing = sample_mixing(n, L, cfg.init_kind, seed, alpha=cfg.alpha, bias_scale=cfg.bias_scale)
    tc = _train_config(cfg, seed)
    model = build_flow_from_spec(n, cfg.flow, "full", "logistic", seed)
    _, log = train(model, make_sampler(mixing, prior, tc), tc, reg)

    traj_dir = out_dir / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    log.to_csv(traj_dir / f"n{n}_L{L}_seed{seed}_{reg.label}.csv")

    rows = [
        {**key, **dict(zip(TRAJECTORY_COLUMNS, r.values(include_wallclock=False)))}
        for r in log.records
    ]
    first, last = log.initial(), log.final()
    summary = {
        **key,
        "cima_initial": first.cima,
        "cima_final": last.cima,
        "loglik_initial": first.loglik,
        "loglik_final": last.loglik,
    }
    return {"main": rows, "summary": [summary]}


def suite_training_dynamics(cfg: SuiteConfig) -> SuiteResult:
    """Loss, log-likelihood and C_IMA trajectories per lambda for every n in cfg.dims."""
    out_dir, digest = _prepare(cfg)
    dims = cfg.dims or [cfg.n]
    regs = _regularizers(cfg)
    keys = [
        {"n": n, "L": L, "reg_kind": r.kind, "strength": float(r.strength), "seed": s}
        for n in dims
        for L in cfg.layers
        for r in regs
        for s in cfg.seeds
    ]
    tables, failed, skipped = run_cells(
        cfg, out_dir, digest, keys, lambda k: _dynamics_cell(cfg, out_dir, k), ["main", "summary"]
    )
    result = SuiteResult(cfg.suite, out_dir, digest, tables, failed_cells=failed, skipped_cells=skipped)
    order = ["n", "L", "reg_kind", "strength", "seed"]
    main = write_table(tables["main"], DYNAMICS_COLUMNS, order + ["iteration"], digest, out_dir / f"{cfg.suite}.csv")
    summary = write_table(tables["summary"], SUMMARY_COLUMNS, order, digest, out_dir / f"{cfg.suite}_summary.csv")
    result.csv_paths.update({"main": main, "summary": summary})
    result.plot_specs.append(export_plot_spec(main, cfg.suite))
    return _finish(result)


SUITES: Dict[str, Callable[[SuiteConfig], SuiteResult]] = {
    "fig1": suite_fig1,
    "figA_uniform": suite_figA_uniform,
    "recovery": suite_recovery,
    "training_dynamics": suite_training_dynamics,
    "reg_comparison": suite_reg_comparison,
}


def run_suite(cfg: SuiteConfig) -> SuiteResult:
    return SUITES[cfg.suite](cfg)


# ==================== Plot specs ====================

PLOT_SCHEMAS: Dict[str, Dict[str, Any]] = {
    "fig1": {
        "required": FIG1_COLUMNS,
        "mark": "line", "x": "L", "y": ["cima_true", "cima_darmois"],
        "series": "measure", "facet": None, "aggregate": "median",
    },
    "figA_uniform": {
        "required": FIG1_COLUMNS,
        "mark": "line", "x": "L", "y": ["cima_true", "cima_darmois"],
        "series": "measure", "facet": None, "aggregate": "median",
    },
    "recovery": {
        "required": METRICS_COLUMNS,
        "mark": "boxplot", "x": "L", "y": ["cima", "kld", "mcc"],
        "series": "L", "facet": "strength", "aggregate": None,
    },
    "training_dynamics": {
        "required": DYNAMICS_COLUMNS,
        "mark": "line", "x": "iteration", "y": ["loss", "loglik", "cima"],
        "series": "strength", "facet": "n", "aggregate": "median",
    },
    "reg_comparison": {
        "required": METRICS_COLUMNS,
        "mark": "boxplot", "x": "strength", "y": ["cima", "mcc"],
        "series": "strength", "facet": "reg_kind", "aggregate": None,
    },
}


def export_plot_spec(csv_path: Union[str, Path], kind: str) -> Path:
    """Write <csv>.plot.json describing how to chart the table; never renders."""
    if kind not in PLOT_SCHEMAS:
        raise ValueError(f"unknown plot kind '{kind}'")
    csv_path = Path(csv_path)
    schema = PLOT_SCHEMAS[kind]
    with open(csv_path, newline="") as f:
        header = next(csv.reader(f), [])
    for column in schema["required"]:
        if column not in header:
            raise SchemaMismatch(column, kind)
    spec = {
        "data": csv_path.name,
        "mark": schema["mark"],
        "x": schema["x"],
        "y": schema["y"],
        "series": schema["series"],
        "facet": schema["facet"],
        "aggregate": schema["aggregate"],
        "filter": {"status": "ok"},
    }
    out = csv_path.with_suffix(".plot.json")
    out.write_text(json.dumps(spec, indent=2, sort_keys=True))
    return out


# ==================== Directional self-checks ====================

def _median(rows: List[Row], column: str) -> float:
    values = [r[column] for r in rows if r.get(column) is not None]
    return float(np.median(values)) if values else math.nan


def _group(rows: List[Row], **match) -> List[Row]:
    return [r for r in rows if all(r.get(k) == v for k, v in match.items())]


def _nondecreasing(values: Sequence[float]) -> bool:
    return all(b >= a for a, b in zip(values, values[1:]))


def _per_seed_check(label: str, base: Dict[Any, float], regularized: Dict[Any, float]) -> CheckResult:
    """Regularized final C_IMA is no higher than the lambda=0 run on the same seed, in most seeds."""
    matched = sorted(k for k in regularized if k in base)
    wins = sum(regularized[k] <= base[k] for k in matched)
    share = wins / len(matched) if matched else 0.0
    return CheckResult(
        f"{label}: final C_IMA no higher than lambda=0 per seed",
        share >= PER_SEED_SHARE,
        f"{wins} of {len(matched)} seeds",
    )


def _check_darmois(result: SuiteResult, cfg: SuiteConfig) -> List[CheckResult]:
    rows = result.ok_rows()
    checks = []
    layers = sorted(cfg.layers)
    if 1 in layers and cfg.init_kind == "orthogonal":
        value = max(r["cima_true"] for r in _group(rows, L=1)) if _group(rows, L=1) else math.nan
        checks.append(CheckResult("linear orthogonal mixing has zero C_IMA", value < 1e-9, f"max {value:.3e}"))

    medians_true = [_median(_group(rows, L=L), "cima_true") for L in layers]
    medians_darmois = [_median(_group(rows, L=L), "cima_darmois") for L in layers]
    if cfg.init_kind == "orthogonal":
        deep = [L for L in layers if L > 1]
        checks.append(CheckResult(
            "median C_IMA of the true mixing is nondecreasing in L",
            _nondecreasing([medians_true[layers.index(L)] for L in deep]),
            f"medians {dict(zip(layers, medians_true))}",
        ))
        shallow = [L for L in layers if L in (2, 4, 8)]
        for L in shallow:
            t, d = medians_true[layers.index(L)], medians_darmois[layers.index(L)]
            checks.append(CheckResult(f"L={L}: Darmois C_IMA exceeds true C_IMA", d > t, f"darmois {d:.4f} vs true {t:.4f}"))
        kld = [_median(_group(rows, L=L), "kld_darmois") for L in shallow]
        if len(kld) > 1:
            checks.append(CheckResult("Darmois KLD is nondecreasing in L", _nondecreasing(kld), f"medians {dict(zip(shallow, kld))}"))
    else:
        for L, t, d in zip(layers, medians_true, medians_darmois):
            checks.append(CheckResult(f"L={L}: Darmois C_IMA below true C_IMA", d < t, f"darmois {d:.4f} vs true {t:.4f}"))
        paths = [_mixing_path(result.out_dir, r["L"], r["seed"]) for r in rows]
        present = [p for p in paths if p.exists()]
        zero_bias = bool(present) and all(not np.any(b) for p in present for b in load_mixing(p).biases)
        checks.append(CheckResult(
            "uniform-init mixings have zero biases",
            zero_bias and len(present) == len(paths),
            f"{len(present)} of {len(paths)} mixings inspected",
        ))
    return checks


def _check_recovery(result: SuiteResult, cfg: SuiteConfig) -> List[CheckResult]:
    rows = result.ok_rows()
    checks = []
    lambdas = sorted({0.0} | {r.strength for r in _regularizers(cfg) if r.kind == "cima"})

    def cell(L, lam):
        return _group(rows, L=L, reg_kind="none") if lam == 0.0 else _group(rows, L=L, reg_kind="cima", strength=lam)

    for L in cfg.layers:
        cimas = [_median(cell(L, lam), "cima") for lam in lambdas]
        checks.append(CheckResult(
            f"L={L}: final C_IMA decreases with lambda",
            all(b < a for a, b in zip(cimas, cimas[1:])),
            f"medians {dict(zip(lambdas, cimas))}",
        ))
        m0, m1 = _median(cell(L, lambdas[0]), "mcc"), _median(cell(L, lambdas[-1]), "mcc")
        checks.append(CheckResult(
            f"L={L}: MCC at max lambda beats lambda=0 by {MCC_GAIN_MARGIN:g}",
            m1 - m0 >= MCC_GAIN_MARGIN,
            f"{m1:.4f} vs {m0:.4f}",
        ))
        base = {r["run_seed"]: r["cima"] for r in cell(L, 0.0)}
        for lam in lambdas[1:]:
            checks.append(_per_seed_check(f"L={L}, lambda={lam:g}", base, {r["run_seed"]: r["cima"] for r in cell(L, lam)}))
    for lam in lambdas:
        mccs = [_median(cell(L, lam), "mcc") for L in sorted(cfg.layers)]
        checks.append(CheckResult(
            f"lambda={lam:g}: MCC is nonincreasing in L",
            all(b <= a for a, b in zip(mccs, mccs[1:])),
            f"medians {dict(zip(sorted(cfg.layers), mccs))}",
        ))
    return checks


def _check_dynamics(result: SuiteResult, cfg: SuiteConfig) -> List[CheckResult]:
    rows = result.ok_rows("summary")
    checks = []
    lam_max = max([r.strength for r in _regularizers(cfg) if r.kind == "cima"], default=None)
    for n in cfg.dims or [cfg.n]:
        base = _group(rows, n=n, reg_kind="none")
        increases = [r["cima_final"] - r["cima_initial"] for r in base]
        share = float(np.mean([d > 0 for d in increases])) if increases else 0.0
        checks.append(CheckResult(f"n={n}: unregularized C_IMA grows during training", share >= 0.8, f"{share:.0%} of runs"))
        if lam_max is not None:
            reg_rows = _group(rows, n=n, reg_kind="cima", strength=lam_max)
            d0 = {(r["L"], r["seed"]): r["cima_final"] - r["cima_initial"] for r in base}
            d1 = {(r["L"], r["seed"]): r["cima_final"] - r["cima_initial"] for r in reg_rows}
            matched = [k for k in d1 if k in d0]
            smaller = bool(matched) and all(d1[k] < d0[k] for k in matched)
            checks.append(CheckResult(f"n={n}: lambda={lam_max:g} grows C_IMA less than lambda=0", smaller, f"{len(matched)} matched runs"))
        finals = {(r["L"], r["seed"]): r["cima_final"] for r in base}
        for lam in sorted({r.strength for r in _regularizers(cfg) if r.kind == "cima"}):
            reg_finals = {(r["L"], r["seed"]): r["cima_final"] for r in _group(rows, n=n, reg_kind="cima", strength=lam)}
            checks.append(_per_seed_check(f"n={n}, lambda={lam:g}", finals, reg_finals))
        per_n = _group(rows, n=n)
        grew = bool(per_n) and all(r["loglik_final"] > r["loglik_initial"] for r in per_n)
        checks.append(CheckResult(f"n={n}: log-likelihood increases for every lambda", grew, f"{len(per_n)} runs"))
    return checks


def _check_reg_comparison(result: SuiteResult, cfg: SuiteConfig) -> List[CheckResult]:
    rows = result.ok_rows()
    checks = []
    regs = _regularizers(cfg)
    for L in cfg.layers:
        baseline = _group(rows, L=L, reg_kind="none")
        c0, m0 = _median(baseline, "cima"), _median(baseline, "mcc")
        penalty_mccs = []
        for kind in ("l1", "l2"):
            strengths = sorted(r.strength for r in regs if r.kind == kind)
            if not strengths:
                continue
            cimas = [_median(_group(rows, L=L, reg_kind=kind, strength=s), "cima") for s in strengths]
            spread = max(abs(c - c0) for c in cimas) / abs(c0) if c0 else math.inf
            checks.append(CheckResult(f"L={L}: {kind} leaves C_IMA within 25%", spread < 0.25, f"max relative change {spread:.3f}"))
            mccs = [_median(_group(rows, L=L, reg_kind=kind, strength=s), "mcc") for s in strengths]
            best_penalty = max(mccs)
            checks.append(CheckResult(
                f"L={L}: no {kind} strength improves MCC",
                all(m <= m0 + PENALTY_MCC_SLACK for m in mccs),
                f"best {kind} {best_penalty:.4f} vs baseline {m0:.4f}",
            ))
            penalty_mccs += mccs
        cima_strengths = sorted(r.strength for r in regs if r.kind == "cima")
        if cima_strengths:
            best = _median(_group(rows, L=L, reg_kind="cima", strength=cima_strengths[-1]), "mcc")
            rivals = penalty_mccs + [m0]
            checks.append(CheckResult(
                f"L={L}: C_IMA regularization beats every L1/L2 cell on MCC",
                all(best > v for v in rivals),
                f"{best:.4f} vs best rival {max(rivals):.4f}",
            ))
    return checks


SELF_CHECKS = {
    "fig1": _check_darmois,
    "figA_uniform": _check_darmois,
    "recovery": _check_recovery,
    "training_dynamics": _check_dynamics,
    "reg_comparison": _check_reg_comparison,
}


def self_check(result: SuiteResult, cfg: SuiteConfig) -> List[CheckResult]:
    checks = SELF_CHECKS[cfg.suite](result, cfg)
    for c in checks:
        logger.info(f"{'✅' if c.passed else '❌'} {c.name} ({c.detail})")
    return checks
