"""
Fast deterministic acceptance checks: contrast properties, gradient
correctness, flow invertibility, matching and metric sanity, density
normalization and the Darmois oracle. Used by `imabench check`.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
import torch
from scipy.stats import kstest

from . import diffmath
from .contrast import cima_local, decompose_2d
from .flows import (
    FlowModel,
    build_flow,
    cima_from_output,
    flat_parameters,
    flow_inverse,
    functional,
    log_likelihood_from_output,
)
from .metrics import hungarian, kld_estimate, mcc
from .mixing import MixingFunction, SourcePrior, build_darmois_grid, darmois_2d, sample_dataset, sample_mixing
from .models import RegularizerSpec, TrainConfig
from .training import GenerativeSampler, objective_function, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


# ==================== Shared fixtures ====================

def identity_mixing(n: int, scale: float = 1.0) -> MixingFunction:
    """Single linear layer scale * I with zero bias."""
    return MixingFunction((scale * np.eye(n),), (np.zeros(n),), init_kind="orthogonal", seed=0)


@torch.no_grad()
def identity_flow(n: int, base: str = "gaussian", kind: str = "full") -> FlowModel:
    """One block whose residual output layer is zero, so g(x) = x."""
    model = build_flow(n, block_count=1, hidden_width=max(8, n), kind=kind, base=base, seed=0)
    model.blocks[0].weights[-1].zero_()
    return model


@torch.no_grad()
def gradient_check_flow(n: int, seed: int = 0, kind: str = "full") -> FlowModel:
    """
    Small 2-block flow with output weights lifted away from the near-identity
    init and no weight within 1e-3 of zero, so |w| stays differentiable under
    finite differences.
    """
    model = build_flow(n, block_count=2, hidden_width=8, kind=kind, base="logistic", seed=seed)
    for block in model.blocks:
        block.weights[-1].mul_(20.0)
        for k, w in enumerate(block.weights):
            tiny = w.abs() < 1e-3
            w.copy_(torch.where(tiny, torch.where(w < 0, -1e-3, 1e-3), w))
            mask = block.mask(k)
            if mask is not None:
                w.mul_(mask)
    model.project(50)
    return model


def _regularizers() -> List[RegularizerSpec]:
    return [
        RegularizerSpec(),
        RegularizerSpec(kind="cima", strength=1.0),
        RegularizerSpec(kind="l1", strength=1e-3),
        RegularizerSpec(kind="l2", strength=1e-3),
    ]


def _random_invertible(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    J = rng.standard_normal((count, n, n))
    det = np.abs(np.linalg.det(J))
    keep = det > 1e-6
    return J[keep]


def _orthogonal_batch(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((count, n, n)))
    return q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[:, None, :]


# ==================== Criteria ====================

def check_nonnegativity(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, worst_od = math.inf, -math.inf
    for n in range(2, 6):
        values = cima_local(_random_invertible(rng, 25_000, n)).numpy()
        worst = min(worst, float(values.min()))
        O = _orthogonal_batch(rng, 250, n)
        D = np.exp(rng.standard_normal((250, n)))
        od = cima_local(O * D[:, None, :]).numpy()
        worst_od = max(worst_od, float(np.abs(od).max()))
    passed = worst >= -1e-12 and worst_od < 1e-12
    return CheckResult("C_IMA nonnegative and zero exactly on O.D", passed, f"min {worst:.3e}, max |O.D| {worst_od:.3e}")


def check_invariance(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(1000):
        n = 2 + trial % 4
        J = _random_invertible(rng, 4, n)[0]
        D = np.diag(rng.choice([-1.0, 1.0], n) * np.exp(rng.standard_normal(n)))
        P = np.eye(n)[rng.permutation(n)]
        gap = abs(float(cima_local(J)) - float(cima_local(J @ D @ P)))
        worst = max(worst, gap)
    return CheckResult("C_IMA invariant under J -> J D P", worst < 1e-10, f"max gap {worst:.3e}")


def check_identities_2d(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    Js = _random_invertible(rng, 10_000, 2)
    logdets = diffmath.logabsdet(Js).numpy()
    cimas = cima_local(Js).numpy()
    worst = 0.0
    for J, logdet, cima in zip(Js, logdets, cimas):
        for lam in (0.0, 0.5, 1.0):
            d = decompose_2d(J, log_base_density=-1.0, lam=lam)
            direct = d.term_i - logdet - lam * cima
            worst = max(worst, abs(cima + d.term_iii), abs(logdet - d.log_abs_det), abs(d.likelihood - direct))
    return CheckResult("2D parallelogram identities and likelihood reassembly", worst < 1e-9, f"max error {worst:.3e}")


def check_gradients(seed: int) -> CheckResult:
    details, passed = [], True
    for n in (2, 5):
        model = gradient_check_flow(n, seed)
        x = torch.randn(8, n, generator=torch.Generator().manual_seed(seed), dtype=diffmath.DTYPE)
        theta = flat_parameters(model)
        targets: List[Tuple[str, Callable]] = [
            ("loglik", functional(model, x, lambda out, p: log_likelihood_from_output(model, out).mean())),
            ("cima", functional(model, x, lambda out, p: cima_from_output(out).mean())),
        ]
        targets += [(f"batch_loss[{reg.label}]", objective_function(model, x, reg)) for reg in _regularizers()]
        for name, fn in targets:
            report = diffmath.finite_diff_check(fn, theta, step=1e-5, tol=1e-4)
            passed &= report.passed
            details.append(f"n={n} {name}: {report.max_rel_error:.1e}")
    return CheckResult("finite-difference gradients of likelihood, C_IMA and batch_loss", passed, "; ".join(details))


def check_invertibility(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    points = diffmath.as_tensor(3.0 * rng.standard_normal((1000, 3)))
    worst_rt, worst_upper = 0.0, 0.0
    mixing = sample_mixing(3, 2, "orthogonal", seed)
    prior = SourcePrior("standard_normal", 3)
    for kind in ("full", "triangular"):
        model = build_flow(3, block_count=3, hidden_width=16, kind=kind, base="logistic", seed=seed)
        config = TrainConfig(iterations=30, batch_size=64, eval_every=30, eval_batch=256, seed=seed, learning_rate=1e-2)
        for stage in ("fresh", "trained"):
            if stage == "trained":
                model, _ = train(model, GenerativeSampler(mixing, prior, seed), config, RegularizerSpec())
            with torch.no_grad():
                out = model(points)
                back = flow_inverse(model, out.y, tol=1e-10)
            worst_rt = max(worst_rt, float((back - points).abs().max()))
            if kind == "triangular":
                worst_upper = max(worst_upper, float(torch.triu(out.jacobian, diagonal=1).abs().max()))
    passed = worst_rt < 1e-7 and worst_upper < 1e-12
    return CheckResult("flow round trip and triangular structure", passed, f"round trip {worst_rt:.2e}, upper {worst_upper:.2e}")


def check_matching(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in range(1, 7):
        perms = np.array(list(itertools.permutations(range(n))))
        for _ in range(1000):
            cost = rng.standard_normal((n, n))
            _, total = hungarian(cost)
            brute = cost[np.arange(n), perms].sum(axis=1).min()
            worst = max(worst, abs(total - brute))

    sources = rng.standard_normal((10_000, 5))
    warped = np.exp(sources[:, rng.permutation(5)]) * -1.0
    score = mcc(sources, warped).mcc
    passed = worst < 1e-9 and abs(score - 1.0) < 1e-9
    return CheckResult("Hungarian equals brute force; MCC blind to permutation and warps", passed, f"cost gap {worst:.1e}, mcc {score:.12f}")


def check_kld(seed: int) -> CheckResult:
    prior = SourcePrior("standard_normal", 2)
    model = identity_flow(2, base="gaussian")
    self_kld, self_se = kld_estimate(identity_mixing(2), prior, model, 10_000, seed)
    scaled, scaled_se = kld_estimate(identity_mixing(2, scale=2.0), prior, model, 10_000, seed)
    target = 3.0 - math.log(4.0)
    passed = abs(self_kld) <= 3 * self_se + 1e-12 and abs(scaled - target) <= 3 * scaled_se
    return CheckResult("KLD sanity (self and diag(2) gaussian)", passed, f"self {self_kld:.2e}, diag(2) {scaled:.4f} vs {target:.4f}")


@torch.no_grad()
def model_density_mass(model: FlowModel, half_width: float = 8.0, nodes: int = 401) -> float:
    """Trapezoid mass of exp(log-likelihood) over a square n=2 grid."""
    axis = torch.linspace(-half_width, half_width, nodes, dtype=diffmath.DTYPE)
    grid = torch.stack(torch.meshgrid(axis, axis, indexing="ij"), dim=-1).reshape(-1, 2)
    density = torch.exp(log_likelihood_from_output(model, model(grid))).reshape(nodes, nodes)
    return float(torch.trapezoid(torch.trapezoid(density, axis, dim=1), axis))


def check_normalization(seed: int) -> CheckResult:
    model = build_flow(2, block_count=4, hidden_width=16, kind="full", base="gaussian", seed=seed)
    model_mass = model_density_mass(model)
    mixing = sample_mixing(2, 3, "orthogonal", seed)
    true_mass = build_darmois_grid(mixing, SourcePrior("standard_normal", 2), nodes=512, mass_tol=1e-2).mass
    passed = abs(model_mass - 1.0) < 1e-2 and abs(true_mass - 1.0) < 1e-2
    return CheckResult("n=2 densities integrate to one", passed, f"model {model_mass:.5f}, true {true_mass:.5f}")


def check_darmois(seed: int) -> CheckResult:
    prior = SourcePrior("standard_normal", 2)
    mixing = sample_mixing(2, 2, "orthogonal", seed)
    data = sample_dataset(mixing, prior, 10_000, seed)
    u = darmois_2d(mixing, prior, data.observations)
    stats = [kstest(u[:, i], "uniform").statistic for i in range(2)]
    return CheckResult("Darmois pushforward is uniform", max(stats) < 0.03, f"KS {stats[0]:.4f}, {stats[1]:.4f}")


CRITERIA: List[Callable[[int], CheckResult]] = [
    check_nonnegativity,
    check_invariance,
    check_identities_2d,
    check_gradients,
    check_invertibility,
    check_matching,
    check_kld,
    check_normalization,
    check_darmois,
]


def run_acceptance(seed: int = 0) -> List[CheckResult]:
    logger.info("=" * 70)
    logger.info("🚀 Running acceptance checks")
    logger.info("=" * 70)
    results = []
    for criterion in CRITERIA:
        try:
            result = criterion(seed)
        except Exception as e:
            result = CheckResult(criterion.__name__, False, f"{type(e).__name__}: {e}")
        logger.info(f"{'✅' if result.passed else '❌'} {result.name} ({result.detail})")
        results.append(result)
    failed = sum(not r.passed for r in results)
    logger.info("=" * 70)
    logger.info(f"📊 {len(results) - failed}/{len(results)} checks passed")
    logger.info("=" * 70)
    return results
