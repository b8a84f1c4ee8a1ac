"""
Source-recovery and model-fit metrics.

MCC: Spearman correlation between true and recovered sources, absolute values
matched one-to-one with the Hungarian algorithm, then averaged. KLD: Monte-Carlo
E_x~true[log p_true(x) - log p_model(x)] with the exact change-of-variables
density of the ground-truth mixing.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from . import diffmath
from .contrast import ContrastEstimate, cima_global, summarize
from .errors import ConstantColumn
from .flows import FlowModel, cima_from_output, log_likelihood_from_output
from .mixing import MixingFunction, SourcePrior, mixing_jacobian, sample_dataset, true_log_density
from .models import RegularizerSpec

logger = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "mixing_seed", "L", "n", "reg_kind", "strength", "run_seed",
    "mcc", "kld", "kld_se", "cima", "cima_se",
]


def _ranks(a: np.ndarray, name: str) -> np.ndarray:
    r = rankdata(a, axis=0)
    r = r - r.mean(axis=0)
    spread = np.sqrt(np.sum(r * r, axis=0))
    constant = np.nonzero(spread == 0.0)[0]
    if constant.size:
        raise ConstantColumn(name, int(constant[0]))
    return r / spread


def spearman_matrix(A, B) -> np.ndarray:
    """(n x n) Spearman correlations; entry (i, j) correlates A[:, i] with B[:, j]."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape != B.shape:
        raise ValueError(f"spearman_matrix needs two matrices of equal shape, got {A.shape} and {B.shape}")
    if A.shape[0] < 3:
        raise ValueError("spearman_matrix needs at least 3 rows")
    return np.clip(_ranks(A, "A").T @ _ranks(B, "B"), -1.0, 1.0)


def hungarian(cost) -> Tuple[np.ndarray, float]:
    """Minimum-cost perfect matching; assignment[i] is the column matched to row i."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian needs finite costs")
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(cost.shape[0], dtype=int)
    assignment[rows] = cols
    return assignment, float(cost[rows, cols].sum())


@dataclass(frozen=True)
class MccResult:
    mcc: float
    assignment: np.ndarray
    matched: np.ndarray


def mcc(true_sources, recovered) -> MccResult:
    corr = np.abs(spearman_matrix(true_sources, recovered))
    assignment, _ = hungarian(-corr)
    matched = corr[np.arange(corr.shape[0]), assignment]
    return MccResult(mcc=float(matched.mean()), assignment=assignment, matched=matched)


@torch.no_grad()
def _model_loglik(model: FlowModel, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    parts = []
    for i in range(0, len(x), chunk):
        out = model(diffmath.as_tensor(x[i:i + chunk]))
        parts.append(log_likelihood_from_output(model, out).numpy())
    return np.concatenate(parts)


def kld_estimate(
    m: MixingFunction,
    prior: SourcePrior,
    model: FlowModel,
    sample_count: int,
    seed: int,
) -> Tuple[float, float]:
    """(KLD in nats, standard error) from the true distribution to the model's."""
    if sample_count < 100:
        raise ValueError("kld_estimate needs sample_count >= 100")
    data = sample_dataset(m, prior, sample_count, seed)
    gap = true_log_density(m, prior, data.observations) - _model_loglik(model, data.observations)
    return summarize_signed(gap)


def summarize_signed(values: np.ndarray) -> Tuple[float, float]:
    values = np.ascontiguousarray(values, dtype=np.float64)
    mean = float(np.sum(values) / len(values))
    se = float(np.sqrt(np.sum((values - mean) ** 2) / (len(values) - 1)) / math.sqrt(len(values)))
    return mean, se


def mixing_cima(m: MixingFunction, prior: SourcePrior, sample_count: int, seed: int) -> ContrastEstimate:
    """C_IMA of the ground-truth mixing over prior samples."""
    rng = np.random.default_rng([seed, 3])
    sources = prior.sample(sample_count, rng)
    return cima_global(lambda s: mixing_jacobian(m, s), sources, batched=True)


@torch.no_grad()
def model_cima(model: FlowModel, x: np.ndarray, chunk: int = 4096) -> ContrastEstimate:
    """C_IMA of g^-1 evaluated at y = g(x) for observations x."""
    parts = []
    for i in range(0, len(x), chunk):
        parts.append(cima_from_output(model(diffmath.as_tensor(x[i:i + chunk]))).numpy())
    return summarize(np.concatenate(parts))


@dataclass(frozen=True)
class MetricsRecord:
    mcc: float
    kld_nats: float
    kld_se: float
    cima: ContrastEstimate
    assignment: np.ndarray
    matched: np.ndarray

    def row(self, mixing_seed: int, L: int, n: int, reg: RegularizerSpec, run_seed: int) -> Dict[str, Any]:
        values = [
            mixing_seed, L, n, reg.kind, float(reg.strength), run_seed,
            self.mcc, self.kld_nats, self.kld_se, self.cima.value, self.cima.std_error,
        ]
        return dict(zip(METRICS_COLUMNS, values))


@torch.no_grad()
def evaluate_model(
    m: MixingFunction,
    prior: SourcePrior,
    model: FlowModel,
    sample_count: int,
    seed: int,
) -> MetricsRecord:
    """MCC, KLD and C_IMA of a trained model on one shared evaluation sample."""
    data = sample_dataset(m, prior, sample_count, seed)
    recovered, loglik, cima_values = [], [], []
    for i in range(0, data.count, 4096):
        out = model(diffmath.as_tensor(data.observations[i:i + 4096]))
        recovered.append(out.y.numpy())
        loglik.append(log_likelihood_from_output(model, out).numpy())
        cima_values.append(cima_from_output(out).numpy())
    match = mcc(data.sources, np.concatenate(recovered))
    kld, kld_se = summarize_signed(true_log_density(m, prior, data.observations) - np.concatenate(loglik))
    cima = summarize(np.concatenate(cima_values))
    logger.info(f"📊 MCC {match.mcc:.4f}  KLD {kld:.4f} ± {kld_se:.4f}  C_IMA {cima.value:.4f}")
    return MetricsRecord(
        mcc=match.mcc,
        kld_nats=kld,
        kld_se=kld_se,
        cima=cima,
        assignment=match.assignment,
        matched=match.matched,
    )
