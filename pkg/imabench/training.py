"""
Regularized maximum-likelihood training of residual flows.

The objective is maximized:

    E_x[ log p_g(x) ] - penalty

with penalty = lambda * E[C_IMA(g^-1)] (cima), gamma * sum|w| (l1) or
beta * sum w^2 (l2). Biases are never penalized. Adam descends
loss = -objective; after every step the weights are re-masked (triangular
flows), spectrally normalized and audited for Lipschitz compliance.
"""
import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import diffmath
from .contrast import ContrastEstimate, summarize
from .errors import LipschitzViolation, NonFiniteLoss, SingularJacobian, TrainingAborted
from .flows import FlowModel, FlowOutput, cima_from_output, functional, log_likelihood_from_output
from .mixing import MixingFunction, SourcePrior, mix_forward
from .models import RegularizerSpec, RunManifest, TrainConfig

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["iteration", "loss", "loglik", "cima", "cima_stderr", "wallclock_s"]


# ==================== Observation samplers ====================

class GenerativeSampler:
    """Fresh minibatches x = f(s), s ~ prior, every iteration."""

    def __init__(self, mixing: MixingFunction, prior: SourcePrior, seed: int):
        if prior.n != mixing.n:
            raise ValueError(f"prior dimension {prior.n} does not match mixing dimension {mixing.n}")
        self.mixing = mixing
        self.prior = prior
        self.n = mixing.n
        self._train_rng = np.random.default_rng([seed, 0])
        self._holdout_rng = np.random.default_rng([seed, 1])

    def next_batch(self, size: int) -> np.ndarray:
        return mix_forward(self.mixing, self.prior.sample(size, self._train_rng))

    def holdout(self, size: int) -> np.ndarray:
        return mix_forward(self.mixing, self.prior.sample(size, self._holdout_rng))


class FixedDatasetSampler:
    """Epoch-shuffled minibatches from a fixed observation matrix.

    Holdout points come from `holdout_source`, a generative sampler of the same
    mixing and prior, so evaluation never sees training rows.
    """

    def __init__(self, observations: np.ndarray, seed: int, holdout_source: Optional[GenerativeSampler] = None):
        observations = np.asarray(observations, dtype=np.float64)
        if observations.ndim != 2 or observations.shape[0] < 2:
            raise ValueError("a fixed dataset needs at least 2 observations")
        if holdout_source is not None and holdout_source.n != observations.shape[1]:
            raise ValueError(f"holdout dimension {holdout_source.n} does not match dataset dimension {observations.shape[1]}")
        self.observations = observations
        self.n = observations.shape[1]
        self.holdout_source = holdout_source
        self._rng = np.random.default_rng([seed, 0])
        self._order = self._rng.permutation(len(observations))
        self._cursor = 0

    def next_batch(self, size: int) -> np.ndarray:
        if size > len(self.observations):
            raise ValueError(f"batch size {size} exceeds dataset size {len(self.observations)}")
        if self._cursor + size > len(self._order):
            self._order = self._rng.permutation(len(self.observations))
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + size]
        self._cursor += size
        return self.observations[idx]

    def holdout(self, size: int) -> np.ndarray:
        if self.holdout_source is None:
            raise ValueError("this fixed dataset has no holdout source")
        return self.holdout_source.holdout(size)


def make_sampler(mixing: MixingFunction, prior: SourcePrior, config: TrainConfig):
    if config.data_source == "fresh_resample":
        return GenerativeSampler(mixing, prior, config.seed)
    rng = np.random.default_rng([config.seed, 2])
    observations = mix_forward(mixing, prior.sample(config.dataset_size, rng))
    return FixedDatasetSampler(observations, config.seed, GenerativeSampler(mixing, prior, config.seed))


# ==================== Objective ====================

@dataclass
class ObjectiveTerms:
    objective: torch.Tensor
    loglik: torch.Tensor
    penalty: torch.Tensor


def weight_penalty(weights: Sequence[torch.Tensor], reg: RegularizerSpec) -> torch.Tensor:
    if reg.kind == "l1":
        return reg.strength * sum(w.abs().sum() for w in weights)
    if reg.kind == "l2":
        return reg.strength * sum((w * w).sum() for w in weights)
    return torch.zeros((), dtype=diffmath.DTYPE)


def _raise_if_nonfinite(term: str, value: torch.Tensor) -> None:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLoss(term, v)


def objective_terms(m: FlowModel, out: FlowOutput, reg: RegularizerSpec, weights: Sequence[torch.Tensor]) -> ObjectiveTerms:
    loglik = log_likelihood_from_output(m, out).mean()
    _raise_if_nonfinite("loglik", loglik)
    if reg.kind == "cima":
        penalty = reg.strength * cima_from_output(out).mean()
    else:
        penalty = weight_penalty(weights, reg)
    _raise_if_nonfinite(reg.kind, penalty)
    return ObjectiveTerms(objective=loglik - penalty, loglik=loglik, penalty=penalty)


def batch_terms(m: FlowModel, batch, reg: RegularizerSpec) -> ObjectiveTerms:
    x = diffmath.as_tensor(batch)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("batch_loss needs a batch of at least 2 points")
    return objective_terms(m, m(x), reg, m.weight_parameters())


def batch_loss(m: FlowModel, batch, reg: RegularizerSpec) -> torch.Tensor:
    """Maximization objective on one batch; the optimizer descends its negation."""
    return batch_terms(m, batch, reg).objective


def objective_function(m: FlowModel, batch, reg: RegularizerSpec):
    """batch_loss as a function of the flat parameter vector, for gradient checks."""
    names = m.weight_names()

    def objective(out: FlowOutput, params: Dict[str, torch.Tensor]) -> torch.Tensor:
        return objective_terms(m, out, reg, [params[name] for name in names]).objective

    return functional(m, batch, objective)


# ==================== Trajectory log ====================

@dataclass(frozen=True)
class TrajectoryRecord:
    iteration: int
    loss: float
    loglik: float
    cima: float
    cima_stderr: float
    wallclock_s: float

    def values(self, include_wallclock: bool = True) -> Tuple:
        row = (self.iteration, self.loss, self.loglik, self.cima, self.cima_stderr)
        return row + (self.wallclock_s,) if include_wallclock else row


@dataclass
class TrajectoryLog:
    records: List[TrajectoryRecord] = field(default_factory=list)

    def append(self, record: TrajectoryRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("trajectory iterations must be strictly increasing")
        for name in ("loss", "loglik", "cima", "cima_stderr"):
            if not math.isfinite(getattr(record, name)):
                raise NonFiniteLoss(name, getattr(record, name))
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def initial(self) -> TrajectoryRecord:
        return self.records[0]

    def final(self) -> TrajectoryRecord:
        return self.records[-1]

    def same_trajectory(self, other: "TrajectoryLog") -> bool:
        """Equality of every logged value except wallclock."""
        mine = [r.values(include_wallclock=False) for r in self.records]
        theirs = [r.values(include_wallclock=False) for r in other.records]
        return mine == theirs

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(TRAJECTORY_COLUMNS)
            for r in self.records:
                writer.writerow([r.iteration] + [repr(v) for v in r.values()[1:]])
        return path


@torch.no_grad()
def evaluate(m: FlowModel, x: torch.Tensor, reg: RegularizerSpec) -> Tuple[float, float, ContrastEstimate]:
    """(loss, mean log-likelihood, C_IMA estimate) on a held-out batch."""
    out = m(x)
    cima_values = cima_from_output(out)
    terms = objective_terms(m, out, reg, m.weight_parameters())
    return -float(terms.objective), float(terms.loglik), summarize(cima_values.numpy())


# ==================== Training loop ====================

def _parameters_finite(m: FlowModel) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in m.parameters())


def train(
    m: FlowModel,
    data_source,
    config: TrainConfig,
    reg: RegularizerSpec,
) -> Tuple[FlowModel, TrajectoryLog]:
    """
    Adam on -batch_loss with gradient clipping. Evaluates at iteration 0, every
    eval_every iterations and at the last iteration on one held-out batch.
    On a non-finite loss, a singular Jacobian or a Lipschitz violation the
    model is restored to its last valid state and TrainingAborted is raised.
    """
    if config.iterations < 1:
        raise ValueError("train needs at least 1 iteration")
    if data_source.n != m.n:
        raise ValueError(f"data dimension {data_source.n} does not match model dimension {m.n}")

    optimizer = torch.optim.Adam(
        m.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )
    eval_x = diffmath.as_tensor(data_source.holdout(config.eval_batch))
    log = TrajectoryLog()
    start = time.perf_counter()
    last_good = copy.deepcopy(m.state_dict())

    def record(iteration: int) -> None:
        loss, loglik, cima = evaluate(m, eval_x, reg)
        log.append(TrajectoryRecord(iteration, loss, loglik, cima.value, cima.std_error, time.perf_counter() - start))
        logger.info(f"📊 iter {iteration:>6}  loss {loss:.4f}  loglik {loglik:.4f}  C_IMA {cima.value:.4f}")

    logger.info(f"🚀 Training {m.kind} flow (n={m.n}, {len(m.blocks)} blocks) with {reg.label} for {config.iterations} iterations")
    iteration = 0
    try:
        record(0)
        for iteration in range(1, config.iterations + 1):
            batch = diffmath.as_tensor(data_source.next_batch(config.batch_size))
            terms = batch_terms(m, batch, reg)
            optimizer.zero_grad()
            (-terms.objective).backward()
            torch.nn.utils.clip_grad_norm_(m.parameters(), config.grad_clip)
            optimizer.step()
            m.project(config.power_iters)
            if not _parameters_finite(m):
                raise NonFiniteLoss("parameters", float("nan"))
            if config.lipschitz_pairs:
                m.audit_lipschitz(config.lipschitz_pairs, seed=iteration)
            last_good = copy.deepcopy(m.state_dict())
            if iteration % config.eval_every == 0 or iteration == config.iterations:
                record(iteration)
    except (NonFiniteLoss, SingularJacobian, LipschitzViolation) as e:
        m.load_state_dict(last_good)
        logger.error(f"❌ Training aborted at iteration {iteration}: {type(e).__name__}: {e}")
        raise TrainingAborted(e, m, log, iteration) from e

    logger.info(f"✅ Training finished in {time.perf_counter() - start:.1f}s")
    return m, log


# ==================== Equal-area check ====================

@dataclass(frozen=True)
class EqualAreaReport:
    logdet_gap: np.ndarray
    base_gap: np.ndarray
    loglik_gap: np.ndarray
    likelihood_matched: bool
    conditioned_points: int
    holds_fraction: float
    eps: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.likelihood_matched and self.holds_fraction >= 0.95


@torch.no_grad()
def equal_area_check(
    model_a: FlowModel,
    model_b: FlowModel,
    points,
    eps: float = 1e-1,
    tol: float = 1e-1,
) -> EqualAreaReport:
    """
    Compare log|det J_{g^-1}(y)| between two models at the same observations.
    Where both likelihoods agree within tol and the base log-densities agree
    within eps, the log-determinants must agree within eps + tol.
    """
    x = diffmath.as_tensor(np.atleast_2d(points))
    out_a, out_b = model_a(x), model_b(x)
    base_a, base_b = model_a.base.log_prob(out_a.y), model_b.base.log_prob(out_b.y)
    logdet_gap = (out_a.log_det - out_b.log_det).abs().numpy()
    base_gap = (base_a - base_b).abs().numpy()
    loglik_gap = ((base_a + out_a.log_det) - (base_b + out_b.log_det)).abs().numpy()

    matched = loglik_gap <= tol
    conditioned = matched & (base_gap <= eps)
    holds = logdet_gap[conditioned] <= eps + tol
    fraction = float(holds.mean()) if holds.size else 1.0
    return EqualAreaReport(
        logdet_gap=logdet_gap,
        base_gap=base_gap,
        loglik_gap=loglik_gap,
        likelihood_matched=bool(matched.mean() >= 0.95),
        conditioned_points=int(conditioned.sum()),
        holds_fraction=fraction,
        eps=eps,
        tol=tol,
    )


# ==================== Run manifests ====================

def write_manifest(manifest: RunManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    payload = manifest.model_dump()
    payload["code_hash"] = manifest.code_hash
    payload["digest"] = manifest.digest
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
