"""
The IMA contrast and its two-dimensional geometry.

cima_local(J) = sum_i log ||J[:, i]|| - log |det J|, in nats. It is zero exactly
when the columns of J are orthogonal, and invariant under J -> J D P for
nonsingular diagonal D and permutation P.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Sequence, Union

import numpy as np
import torch

from . import diffmath
from .errors import SingularJacobian

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastEstimate:
    value: float
    std_error: float
    sample_count: int

    def __post_init__(self):
        if self.value < -1e-9:
            raise ValueError(f"C_IMA estimate {self.value} is negative beyond float noise")
        if self.std_error < 0:
            raise ValueError("std_error must be nonnegative")


def cima_local(J) -> torch.Tensor:
    """Local contrast of a square matrix (or a batch), differentiable in J."""
    J = diffmath.as_tensor(J)
    log_norms = torch.log(torch.linalg.vector_norm(J, dim=-2)).sum(dim=-1)
    return log_norms - diffmath.logabsdet(J)


def summarize(values: np.ndarray) -> ContrastEstimate:
    values = np.ascontiguousarray(values, dtype=np.float64)
    count = values.shape[0]
    # numpy reduces contiguous float arrays pairwise in index order
    mean = float(np.sum(values) / count)
    if count > 1:
        spread = float(np.sqrt(np.sum((values - mean) ** 2) / (count - 1)))
        std_error = spread / math.sqrt(count)
    else:
        std_error = 0.0
    return ContrastEstimate(value=max(mean, 0.0) if mean > -1e-9 else mean, std_error=std_error, sample_count=count)


def cima_global(jacobian_provider: Callable, points, batched: bool = False) -> ContrastEstimate:
    """
    Monte-Carlo C_IMA over `points` (m x n). `jacobian_provider` maps one point
    to its n x n Jacobian; with `batched=True` it maps the whole (m, n) batch to
    an (m, n, n) stack instead.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] < 2:
        raise ValueError("cima_global needs at least 2 points")
    if batched:
        jacobians = diffmath.as_tensor(jacobian_provider(pts)).detach()
    else:
        jacobians = torch.stack([diffmath.as_tensor(jacobian_provider(p)).detach() for p in pts])
    if jacobians.shape != (pts.shape[0], pts.shape[1], pts.shape[1]):
        raise ValueError(f"expected Jacobians of shape {(pts.shape[0], pts.shape[1], pts.shape[1])}, got {tuple(jacobians.shape)}")
    try:
        values = cima_local(jacobians)
    except SingularJacobian as e:
        raise SingularJacobian(f"singular Jacobian at point index {e.index}", e.condition, e.index) from e
    return summarize(values.numpy())


# ==================== Two-dimensional decomposition ====================

@dataclass(frozen=True)
class Decomposition2D:
    norm_a: float
    norm_b: float
    theta: float
    term_i: float
    term_ii: float
    term_iii: float
    lam: float

    @property
    def log_abs_det(self) -> float:
        return math.log(self.norm_a) + math.log(self.norm_b) + self.term_iii

    @property
    def likelihood(self) -> float:
        return self.term_i - self.term_ii - (1.0 - self.lam) * self.term_iii


def column_angle(J) -> float:
    """Angle between the two columns via atan2(|det|, a.b), stable near 0 and pi."""
    J = np.asarray(J, dtype=np.float64)
    a, b = J[:, 0], J[:, 1]
    det = a[0] * b[1] - a[1] * b[0]
    return math.atan2(abs(det), float(a @ b))


def decompose_2d(J, log_base_density: float, lam: float) -> Decomposition2D:
    """
    Split the regularized per-point likelihood log p_y(y) - log|det J| - lam * C_IMA
    into (i) log p_y(y), (ii) log||a|| + log||b|| and (iii) log|sin theta|, where
    a, b are the columns of J = J_{g^-1}(y).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    J = np.asarray(J, dtype=np.float64)
    if J.shape != (2, 2):
        raise ValueError(f"decompose_2d expects a 2x2 matrix, got {J.shape}")
    diffmath.logabsdet(J)
    norm_a = float(np.linalg.norm(J[:, 0]))
    norm_b = float(np.linalg.norm(J[:, 1]))
    theta = column_angle(J)
    return Decomposition2D(
        norm_a=norm_a,
        norm_b=norm_b,
        theta=theta,
        term_i=float(log_base_density),
        term_ii=math.log(norm_a) + math.log(norm_b),
        term_iii=math.log(abs(math.sin(theta))),
        lam=float(lam),
    )


def log_sin_theta_profile(thetas: Sequence[float]) -> np.ndarray:
    """Rows of (theta, log|sin theta|, cot theta) for theta in the open interval (0, pi)."""
    thetas = np.asarray(thetas, dtype=np.float64).reshape(-1)
    if np.any((thetas <= 0.0) | (thetas >= math.pi)) or not np.all(np.isfinite(thetas)):
        raise ValueError("every theta must lie strictly inside (0, pi)")
    return np.stack([thetas, np.log(np.abs(np.sin(thetas))), np.cos(thetas) / np.sin(thetas)], axis=-1)


@dataclass(frozen=True)
class IsoperimetricReport:
    area: float
    trials: int
    lower_bound: float
    min_sum: float
    minimizer_sin: float
    tol: float
    bound_holds: bool

    @property
    def gap(self) -> float:
        return self.min_sum - self.lower_bound

    @property
    def minimum_reached(self) -> bool:
        return self.gap < self.tol

    @property
    def passed(self) -> bool:
        return self.bound_holds and self.minimum_reached


def isoperimetric_check(
    area: float,
    trials: int,
    seed: int,
    near_orthogonal_share: float = 0.5,
    tol: float = 1e-3,
) -> IsoperimetricReport:
    """
    Sample 2x2 Jacobians with |det| = area and confirm that log||a|| + log||b||
    never drops below log(area) and that the smallest observed sum comes
    within `tol` of it.
    """
    if area <= 0:
        raise ValueError("area must be positive")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(seed)
    near = int(round(trials * near_orthogonal_share))
    generic = rng.standard_normal((trials - near, 2, 2))

    rot = rng.uniform(0.0, 2.0 * math.pi, near)
    angle = math.pi / 2 + 0.05 * rng.standard_normal(near)
    scale = np.exp(rng.standard_normal((near, 2)))
    a = np.stack([np.cos(rot), np.sin(rot)], axis=-1) * scale[:, :1]
    b = np.stack([np.cos(rot + angle), np.sin(rot + angle)], axis=-1) * scale[:, 1:]
    structured = np.stack([a, b], axis=-1)

    J = np.concatenate([generic, structured], axis=0)
    det = np.abs(np.linalg.det(J))
    J = J * np.sqrt(area / det)[:, None, None]

    sums = np.log(np.linalg.norm(J[:, :, 0], axis=-1)) + np.log(np.linalg.norm(J[:, :, 1], axis=-1))
    lower = math.log(area)
    idx = int(np.argmin(sums))

    report = IsoperimetricReport(
        area=area,
        trials=trials,
        lower_bound=lower,
        min_sum=float(sums[idx]),
        minimizer_sin=abs(math.sin(column_angle(J[idx]))),
        tol=tol,
        bound_holds=bool(np.all(sums >= lower - 1e-12)),
    )
    logger.info(f"📐 Isoperimetric check: min sum {report.min_sum:.6f} vs bound {lower:.6f} (gap {report.gap:.2e})")
    return report


def write_profile_csv(rows: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["theta", "log_sin", "grad"])
        for theta, log_sin, g in rows:
            writer.writerow([repr(float(theta)), repr(float(log_sin)), repr(float(g))])
    return path


def write_isoperimetric_csv(reports: List[IsoperimetricReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["area", "trials", "lower_bound", "min_sum", "gap", "minimizer_sin", "passed"])
        for r in reports:
            writer.writerow([r.area, r.trials, repr(r.lower_bound), repr(r.min_sum), repr(r.gap), repr(r.minimizer_sin), int(r.passed)])
    return path
