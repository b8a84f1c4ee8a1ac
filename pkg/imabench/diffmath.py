"""
Dense small-dimension linear algebra on top of torch autograd.

Every function works in float64 and keeps the autograd graph intact, so a loss
built from `jacobian`, `matinv` and `logabsdet` can be differentiated with
respect to model parameters by a single backward pass. Flow Jacobians are
assembled analytically per block (see flows.py), which keeps everything first
order.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import torch

from .config import SINGULAR_DET
from .errors import NonFiniteValue, SingularJacobian, UnsupportedPrimitive

logger = logging.getLogger(__name__)

DTYPE = torch.float64
_LOG_SINGULAR = float(np.log(SINGULAR_DET))

ArrayLike = Union[torch.Tensor, np.ndarray, list, float]


def as_tensor(value: ArrayLike) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


def _condition(m: torch.Tensor) -> float:
    with torch.no_grad():
        try:
            return float(torch.linalg.cond(m.detach()).max())
        except RuntimeError:
            return float("inf")


def _check_square(m: torch.Tensor) -> None:
    if m.ndim < 2 or m.shape[-1] != m.shape[-2] or m.shape[-1] < 1:
        raise ValueError(f"Expected a square matrix (or batch of them), got shape {tuple(m.shape)}")


def _raise_if_singular(m: torch.Tensor, logabs: torch.Tensor) -> None:
    bad = ~(logabs.detach() > _LOG_SINGULAR)
    if bool(bad.any()):
        idx = int(torch.nonzero(bad.reshape(-1))[0]) if logabs.ndim else None
        offending = m.reshape(-1, m.shape[-2], m.shape[-1])[idx or 0]
        raise SingularJacobian(
            f"|det| below {SINGULAR_DET:g}" + (f" at batch index {idx}" if idx is not None else ""),
            condition=_condition(offending),
            index=idx,
        )


def jacobian(vector_fn: Callable[[torch.Tensor], torch.Tensor], point: ArrayLike, create_graph: bool = False) -> torch.Tensor:
    """Exact Jacobian d(output_i)/d(input_j) of an R^n -> R^n map via reverse mode."""
    x = as_tensor(point).reshape(-1)
    out = vector_fn(x)
    if not isinstance(out, torch.Tensor):
        raise UnsupportedPrimitive("vector_fn must return a torch tensor")
    finite = torch.isfinite(out.detach())
    if not bool(finite.all()):
        coord = int(torch.nonzero(~finite.reshape(-1))[0])
        raise NonFiniteValue(f"vector_fn output is non-finite at coordinate {coord}", coordinate=coord)
    J = torch.autograd.functional.jacobian(vector_fn, x, create_graph=create_graph)
    return J.reshape(out.numel(), x.numel())


def logabsdet(m: ArrayLike) -> torch.Tensor:
    """log|det m| via LU with partial pivoting; batched over leading dimensions."""
    m = as_tensor(m)
    _check_square(m)
    _, logabs = torch.linalg.slogdet(m)
    _raise_if_singular(m, logabs)
    return logabs


def matinv(m: ArrayLike) -> torch.Tensor:
    m = as_tensor(m)
    _check_square(m)
    _, logabs = torch.linalg.slogdet(m.detach())
    _raise_if_singular(m, logabs)
    return torch.linalg.inv(m)


def grad(loss_fn: Callable[[torch.Tensor], torch.Tensor], params: ArrayLike) -> torch.Tensor:
    """Exact gradient of a scalar loss w.r.t. a flat parameter vector."""
    theta = as_tensor(params).detach().clone().reshape(-1).requires_grad_(True)
    loss = loss_fn(theta)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise UnsupportedPrimitive("loss_fn must return a scalar torch tensor")
    if loss.grad_fn is None:
        raise UnsupportedPrimitive(
            "loss is not connected to the parameters; it was computed outside the supported primitives"
        )
    (g,) = torch.autograd.grad(loss.reshape(()), theta, allow_unused=True)
    if g is None:
        return torch.zeros_like(theta)
    return g.detach()


@dataclass(frozen=True)
class GradientCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    step: float
    tol: float


def finite_diff_check(
    fn: Callable[[torch.Tensor], torch.Tensor],
    params: ArrayLike,
    step: float = 1e-5,
    tol: float = 1e-4,
    analytic: Optional[ArrayLike] = None,
    floor: float = 1e-3,
) -> GradientCheckReport:
    """
    Compare the autograd gradient (or a supplied `analytic` one) against central
    differences. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    theta = as_tensor(params).detach().clone().reshape(-1)
    a = grad(fn, theta) if analytic is None else as_tensor(analytic).reshape(-1).detach()
    numeric = torch.empty_like(theta)
    with torch.no_grad():
        for i in range(theta.numel()):
            plus = theta.clone()
            minus = theta.clone()
            plus[i] += step
            minus[i] -= step
            numeric[i] = (fn(plus).reshape(()) - fn(minus).reshape(())) / (2.0 * step)

    a_np = a.numpy()
    n_np = numeric.numpy()
    denom = np.maximum(np.maximum(np.abs(a_np), np.abs(n_np)), floor)
    rel = np.abs(a_np - n_np) / denom
    worst = int(np.argmax(rel)) if rel.size else -1
    max_rel = float(rel[worst]) if rel.size else 0.0
    report = GradientCheckReport(
        passed=bool(max_rel < tol),
        max_rel_error=max_rel,
        worst_index=worst,
        analytic=a_np,
        numeric=n_np,
        step=step,
        tol=tol,
    )
    if not report.passed:
        logger.warning(f"⚠️  Gradient check failed: max rel. error {max_rel:.3e} at coordinate {worst}")
    return report
