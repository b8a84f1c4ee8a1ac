"""
Invertible residual flows y = g(x) built from blocks x + h(x) with Lip(h) < 1.

Each block returns its Jacobian I + J_h(x) in closed form, so the flow Jacobian
is an explicit product of small matrices and every quantity derived from it
(log-determinant, inverse, column norms) stays differentiable in the
parameters through ordinary first-order autograd.

Two kinds are supported:
- full: unconstrained residual networks (learned unmixing)
- triangular: masked residual networks whose Jacobian is lower-triangular
  (learner for the Darmois construction)
"""
import copy
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffmath
from .config import (
    BLOCK_ALPHA,
    FLOW_BLOCKS,
    HIDDEN_LAYERS,
    HIDDEN_WIDTH,
    LIPSCHITZ_COEFF,
    OUTPUT_INIT_SCALE,
)
from .contrast import cima_local
from .errors import ConvergenceError, LipschitzViolation
from .models import BaseKind, BlockDocument, CheckpointDocument, FlowKind, FlowSpec

logger = logging.getLogger(__name__)

DTYPE = diffmath.DTYPE
# fixed-point steps below this are float64 noise for unit-scale inputs
BLOCK_TOL_FLOOR = 1e-14
_LOG_2PI = math.log(2.0 * math.pi)


# ==================== Base distributions ====================

class BaseDistribution:
    """Factorized base density: standard gaussian or unit logistic per coordinate."""

    def __init__(self, kind: BaseKind, n: int):
        if kind not in ("gaussian", "logistic"):
            raise ValueError(f"unknown base distribution '{kind}'")
        self.kind = kind
        self.n = n

    def log_prob(self, y: torch.Tensor) -> torch.Tensor:
        if self.kind == "gaussian":
            per_coord = -0.5 * y * y - 0.5 * _LOG_2PI
        else:
            per_coord = -y - 2.0 * F.softplus(-y)
        return per_coord.sum(dim=-1)

    def sample(self, count: int, generator: torch.Generator) -> torch.Tensor:
        if self.kind == "gaussian":
            return torch.randn(count, self.n, generator=generator, dtype=DTYPE)
        u = torch.rand(count, self.n, generator=generator, dtype=DTYPE).clamp(1e-12, 1 - 1e-12)
        return torch.log(u) - torch.log1p(-u)


# ==================== Residual blocks ====================

def _activation(z: torch.Tensor, alpha: float) -> torch.Tensor:
    return torch.tanh(z) + alpha * z


def _activation_grad(z: torch.Tensor, alpha: float) -> torch.Tensor:
    t = torch.tanh(z)
    return 1.0 - t * t + alpha


def _autoregressive_masks(n: int, hidden: List[int]) -> List[torch.Tensor]:
    """Masks so that h_i depends on x_j only for j <= i (lower-triangular Jacobian)."""
    degrees = [torch.arange(1, n + 1)]
    for width in hidden:
        degrees.append(torch.arange(width) % n + 1)
    degrees.append(torch.arange(1, n + 1))
    masks = []
    for d_in, d_out in zip(degrees[:-1], degrees[1:]):
        masks.append((d_in[None, :] <= d_out[:, None]).to(DTYPE))
    return masks


class FlowOutput(NamedTuple):
    y: torch.Tensor
    jacobian: torch.Tensor
    log_det: torch.Tensor


class ResidualBlock(nn.Module):
    def __init__(
        self,
        n: int,
        hidden_width: int = HIDDEN_WIDTH,
        hidden_layers: int = HIDDEN_LAYERS,
        coeff: float = LIPSCHITZ_COEFF,
        alpha: float = BLOCK_ALPHA,
        triangular: bool = False,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if not 0.0 < coeff < 1.0:
            raise ValueError("Lipschitz coefficient must lie in (0, 1)")
        self.n = n
        self.coeff = coeff
        self.alpha = alpha
        self.triangular = triangular
        dims = [n] + [hidden_width] * hidden_layers + [n]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = k == len(dims) - 2
            std = OUTPUT_INIT_SCALE / math.sqrt(d_in) if last else 1.0 / math.sqrt(d_in)
            w = torch.randn(d_out, d_in, generator=generator, dtype=DTYPE) * std
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(d_out, dtype=DTYPE)))
            u = torch.randn(d_out, generator=generator, dtype=DTYPE)
            self.register_buffer(f"power_u{k}", u / u.norm())
        if triangular:
            for k, mask in enumerate(_autoregressive_masks(n, dims[1:-1])):
                self.register_buffer(f"mask{k}", mask)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def weight_bound(self) -> float:
        """Per-matrix operator-norm bound giving Lip(h) <= coeff with (1 + alpha)-Lipschitz activations."""
        return (self.coeff / (1.0 + self.alpha) ** (self.depth - 1)) ** (1.0 / self.depth)

    def mask(self, k: int) -> Optional[torch.Tensor]:
        return getattr(self, f"mask{k}") if self.triangular else None

    def effective_weight(self, k: int) -> torch.Tensor:
        w = self.weights[k]
        mask = self.mask(k)
        return w if mask is None else w * mask

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        z = x
        for k in range(self.depth):
            z = F.linear(z, self.effective_weight(k), self.biases[k])
            if k < self.depth - 1:
                z = _activation(z, self.alpha)
        return z

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return (x + h(x), I + J_h(x)) for a batch x of shape (B, n)."""
        z = x
        A = None
        for k in range(self.depth):
            w = self.effective_weight(k)
            pre = F.linear(z, w, self.biases[k])
            A = w.expand(x.shape[0], *w.shape) if A is None else torch.matmul(w, A)
            if k < self.depth - 1:
                A = _activation_grad(pre, self.alpha).unsqueeze(-1) * A
                z = _activation(pre, self.alpha)
            else:
                z = pre
        eye = torch.eye(self.n, dtype=x.dtype)
        return x + z, eye + A


@torch.no_grad()
def apply_masks(block: ResidualBlock) -> None:
    if not block.triangular:
        return
    for k in range(block.depth):
        block.weights[k].mul_(block.mask(k))


@torch.no_grad()
def spectral_normalize(block: ResidualBlock, power_iters: int, bound: Optional[float] = None) -> Tuple[ResidualBlock, List[float]]:
    """
    Rescale every weight whose power-iteration spectral-norm estimate exceeds
    `bound` (default: block.weight_bound). Power vectors persist on the block
    so later calls warm-start. Returns the block and the pre-rescale estimates.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be at least 1")
    target = block.weight_bound if bound is None else bound
    norms = []
    for k in range(block.depth):
        w = block.weights[k]
        u = getattr(block, f"power_u{k}")
        for _ in range(power_iters):
            v = F.normalize(torch.mv(w.t(), u), dim=0)
            u = F.normalize(torch.mv(w, v), dim=0)
        sigma = float(torch.dot(u, torch.mv(w, v)))
        getattr(block, f"power_u{k}").copy_(u)
        norms.append(sigma)
        if sigma > target:
            w.mul_(target / sigma)
    return block, norms


def project_block(block: ResidualBlock, power_iters: int) -> List[float]:
    apply_masks(block)
    _, norms = spectral_normalize(block, power_iters)
    return norms


@torch.no_grad()
def lipschitz_ratio(block: ResidualBlock, pairs: int = 1000, seed: int = 0, scale: float = 3.0) -> float:
    """Largest ||h(u) - h(v)|| / ||u - v|| over random far and near pairs."""
    if pairs < 1:
        return 0.0
    gen = torch.Generator().manual_seed(seed)
    u = scale * torch.randn(pairs, block.n, generator=gen, dtype=DTYPE)
    v = scale * torch.randn(pairs, block.n, generator=gen, dtype=DTYPE)
    half = pairs // 2
    v[:half] = u[:half] + 1e-3 * torch.randn(half, block.n, generator=gen, dtype=DTYPE)
    num = torch.linalg.vector_norm(block.residual(u) - block.residual(v), dim=-1)
    den = torch.linalg.vector_norm(u - v, dim=-1)
    return float((num / den).max())


def block_inverse(block: ResidualBlock, y: torch.Tensor, tol: float, max_iters: int) -> Tuple[torch.Tensor, int]:
    """Banach fixed point x <- y - h(x); stops when the update is below tol."""
    x = y.clone()
    step = float("inf")
    for it in range(1, max_iters + 1):
        x_next = y - block.residual(x)
        step = float(torch.linalg.vector_norm(x_next - x, dim=-1).max())
        x = x_next
        if step <= tol:
            return x, it
    raise ConvergenceError("residual block inversion did not converge", step, max_iters)


# ==================== Flow models ====================

class FlowModel(nn.Module):
    """y = g(x): observation x to latent y, base density on y."""

    def __init__(self, n: int, kind: FlowKind, base: BaseKind, spec: FlowSpec, seed: int):
        super().__init__()
        if kind not in ("full", "triangular"):
            raise ValueError(f"unknown flow kind '{kind}'")
        self.n = n
        self.kind = kind
        self.spec = spec
        self.seed = seed
        self.base = BaseDistribution(base, n)
        generator = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList(
            ResidualBlock(
                n,
                hidden_width=spec.hidden_width,
                hidden_layers=spec.hidden_layers,
                coeff=spec.coeff,
                alpha=spec.block_alpha,
                triangular=kind == "triangular",
                generator=generator,
            )
            for _ in range(spec.blocks)
        )

    def forward(self, x: torch.Tensor) -> FlowOutput:
        J = torch.eye(self.n, dtype=x.dtype).expand(x.shape[0], self.n, self.n)
        y = x
        for block in self.blocks:
            y, J_block = block(y)
            J = torch.matmul(J_block, J)
        return FlowOutput(y, J, diffmath.logabsdet(J))

    def weight_parameters(self) -> List[torch.Tensor]:
        """Weight matrices only; biases are excluded from L1/L2 penalties."""
        return [w for block in self.blocks for w in block.weights]

    def weight_names(self) -> List[str]:
        return [name for name, _ in self.named_parameters() if ".weights." in name]

    def project(self, power_iters: int) -> None:
        for block in self.blocks:
            project_block(block, power_iters)

    def audit_lipschitz(self, pairs: int, seed: int = 0) -> List[float]:
        ratios = []
        for i, block in enumerate(self.blocks):
            ratio = lipschitz_ratio(block, pairs=pairs, seed=seed + i)
            if ratio >= 1.0:
                raise LipschitzViolation(i, ratio)
            ratios.append(ratio)
        return ratios


def build_flow(
    n: int,
    block_count: int = FLOW_BLOCKS,
    hidden_width: int = HIDDEN_WIDTH,
    kind: FlowKind = "full",
    base: BaseKind = "logistic",
    seed: int = 0,
    hidden_layers: int = HIDDEN_LAYERS,
    coeff: float = LIPSCHITZ_COEFF,
    block_alpha: float = BLOCK_ALPHA,
    init_power_iters: int = 100,
) -> FlowModel:
    if block_count < 1:
        raise ValueError("block_count must be at least 1")
    if hidden_width < n:
        raise ValueError("hidden_width must be at least n")
    spec = FlowSpec(
        blocks=block_count,
        hidden_width=hidden_width,
        hidden_layers=hidden_layers,
        coeff=coeff,
        block_alpha=block_alpha,
    )
    model = FlowModel(n, kind, base, spec, seed)
    model.project(init_power_iters)
    return model


def build_flow_from_spec(n: int, spec: FlowSpec, kind: FlowKind, base: BaseKind, seed: int) -> FlowModel:
    return build_flow(
        n,
        block_count=spec.blocks,
        hidden_width=spec.hidden_width,
        kind=kind,
        base=base,
        seed=seed,
        hidden_layers=spec.hidden_layers,
        coeff=spec.coeff,
        block_alpha=spec.block_alpha,
    )


def _batched(x) -> Tuple[torch.Tensor, bool]:
    t = diffmath.as_tensor(x)
    if t.ndim == 1:
        return t.unsqueeze(0), True
    return t, False


def flow_forward(m: FlowModel, x) -> FlowOutput:
    xb, single = _batched(x)
    out = m(xb)
    if single:
        return FlowOutput(out.y[0], out.jacobian[0], out.log_det[0])
    return out


def block_tolerance(tol: float, coeff: float, blocks: int) -> float:
    """Per-block stopping tolerance: tol shrunk by the forward amplification of the blocks, floored."""
    return max(tol / (1.0 + coeff) ** blocks, BLOCK_TOL_FLOOR)


@torch.no_grad()
def flow_inverse(m: FlowModel, y, tol: float = 1e-10, max_iters: int = 1000) -> torch.Tensor:
    yb, single = _batched(y)
    block_tol = block_tolerance(tol, m.spec.coeff, len(m.blocks))
    x = yb
    total = 0
    for block in reversed(m.blocks):
        x, used = block_inverse(block, x, block_tol, max_iters)
        total += used
    residual = float(torch.linalg.vector_norm(m(x).y - yb, dim=-1).max())
    if residual >= tol:
        raise ConvergenceError("flow inversion missed the tolerance", residual, total)
    return x[0] if single else x


def log_likelihood_from_output(m: FlowModel, out: FlowOutput) -> torch.Tensor:
    return m.base.log_prob(out.y) + out.log_det


def cima_from_output(out: FlowOutput) -> torch.Tensor:
    """C_IMA of g^-1 at y, using J_{g^-1}(y) = J_g(x)^-1."""
    return cima_local(diffmath.matinv(out.jacobian))


def model_log_likelihood(m: FlowModel, x) -> torch.Tensor:
    xb, single = _batched(x)
    ll = log_likelihood_from_output(m, m(xb))
    return ll[0] if single else ll


def model_cima_term(m: FlowModel, x) -> torch.Tensor:
    xb, single = _batched(x)
    c = cima_from_output(m(xb))
    return c[0] if single else c


# ==================== Parameter-vector views ====================

def flat_parameters(m: FlowModel) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in m.parameters()])


def functional(
    m: FlowModel,
    x,
    objective: Callable[[FlowOutput, Dict[str, torch.Tensor]], torch.Tensor],
) -> Callable[[torch.Tensor], torch.Tensor]:
    """Turn `objective(outputs, params)` into a function of the flat parameter vector."""
    xb, _ = _batched(x)
    named = [(name, p.shape, p.numel()) for name, p in m.named_parameters()]

    def fn(theta: torch.Tensor) -> torch.Tensor:
        params, offset = {}, 0
        for name, shape, count in named:
            params[name] = theta[offset:offset + count].reshape(shape)
            offset += count
        out = torch.func.functional_call(m, params, (xb,))
        return objective(FlowOutput(*out), params)

    return fn


# ==================== Snapshots and checkpoints ====================

def snapshot(m: FlowModel) -> FlowModel:
    """Deep frozen copy for evaluation."""
    frozen = copy.deepcopy(m)
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen.eval()


def to_document(m: FlowModel, train_config_hash: Optional[str] = None) -> CheckpointDocument:
    blocks = []
    for block in m.blocks:
        blocks.append(
            BlockDocument(
                weights=[w.detach().tolist() for w in block.weights],
                biases=[b.detach().tolist() for b in block.biases],
                power_vectors=[getattr(block, f"power_u{k}").tolist() for k in range(block.depth)],
                masks=[block.mask(k).tolist() for k in range(block.depth)] if block.triangular else None,
            )
        )
    return CheckpointDocument(
        n=m.n,
        kind=m.kind,
        base=m.base.kind,
        flow=m.spec,
        seed=m.seed,
        blocks=blocks,
        train_config_hash=train_config_hash,
    )


@torch.no_grad()
def from_document(doc: CheckpointDocument) -> FlowModel:
    if len(doc.blocks) != doc.flow.blocks:
        raise ValueError(f"checkpoint declares {doc.flow.blocks} blocks but holds {len(doc.blocks)}")
    m = FlowModel(doc.n, doc.kind, doc.base, doc.flow, doc.seed)
    for block, stored in zip(m.blocks, doc.blocks):
        for k in range(block.depth):
            block.weights[k].copy_(torch.tensor(stored.weights[k], dtype=DTYPE))
            block.biases[k].copy_(torch.tensor(stored.biases[k], dtype=DTYPE))
            getattr(block, f"power_u{k}").copy_(torch.tensor(stored.power_vectors[k], dtype=DTYPE))
    return m


def save_checkpoint(m: FlowModel, path: Union[str, Path], train_config_hash: Optional[str] = None) -> Path:
    path = Path(path)
    path.write_text(to_document(m, train_config_hash).model_dump_json())
    return path


def load_checkpoint(path: Union[str, Path]) -> FlowModel:
    return from_document(CheckpointDocument.model_validate_json(Path(path).read_text()))


@torch.no_grad()
def transform(m: FlowModel, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """y = g(x) for a numpy batch, evaluated in chunks."""
    pieces = [m(diffmath.as_tensor(x[i:i + chunk])).y.numpy() for i in range(0, len(x), chunk)]
    return np.concatenate(pieces, axis=0)
