"""
Ground-truth mixing functions: invertible MLPs with leaky_tanh activations.

A mixing with L layers computes h <- W_k h + b_k for k = 1..L and applies
leaky_tanh after every layer except the last, so observations cover all of R^n.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import diffmath
from .config import BIAS_SCALE, DARMOIS_NODES, LEAKY_ALPHA, MIXING_MIN_DET
from .errors import ConvergenceError, QuadratureError
from .models import InitKind, LayerDocument, MixingDocument, PriorKind

logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))
_MAX_RESAMPLES = 100


# ==================== Activation ====================

def leaky_tanh(x, alpha: float = LEAKY_ALPHA):
    if alpha <= 0:
        raise ValueError("leaky_tanh needs alpha > 0")
    return np.tanh(x) + alpha * x


def leaky_tanh_grad(x, alpha: float = LEAKY_ALPHA):
    t = np.tanh(x)
    return 1.0 - t * t + alpha


def leaky_tanh_inverse(y, alpha: float = LEAKY_ALPHA, tol: float = 1e-12, max_iters: int = 100):
    """
    Safeguarded Newton iteration. The root is bracketed by
    [(y - 1) / alpha, (y + 1) / alpha] because |leaky_tanh(x) - alpha x| <= 1.
    """
    if alpha <= 0:
        raise ValueError("leaky_tanh needs alpha > 0")
    y = np.asarray(y, dtype=np.float64)
    lo = (y - 1.0) / alpha
    hi = (y + 1.0) / alpha
    x = np.clip(y / (1.0 + alpha), lo, hi)
    done = np.zeros(y.shape, dtype=bool)
    for _ in range(max_iters):
        f = leaky_tanh(x, alpha) - y
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        newton = x - f / leaky_tanh_grad(x, alpha)
        outside = (newton <= lo) | (newton >= hi)
        x_new = np.where(outside, 0.5 * (lo + hi), newton)
        step = np.abs(x_new - x)
        x = np.where(done, x, x_new)
        done |= (step <= tol * (1.0 + np.abs(x))) | (f == 0)
        if done.all():
            return x
    residual = float(np.max(np.abs(leaky_tanh(x, alpha) - y)))
    raise ConvergenceError("leaky_tanh inversion did not converge", residual, max_iters)


# ==================== Source priors ====================

@dataclass(frozen=True)
class SourcePrior:
    kind: PriorKind
    n: int

    def log_density(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(s)
        if self.kind == "standard_normal":
            return -0.5 * np.sum(s * s, axis=-1) - 0.5 * self.n * _LOG_2PI
        inside = np.all((s >= 0.0) & (s <= 1.0), axis=-1)
        return np.where(inside, 0.0, -np.inf)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "standard_normal":
            return rng.standard_normal((count, self.n))
        return rng.uniform(0.0, 1.0, size=(count, self.n))

    def support_box(self, width: float = 6.0) -> Tuple[float, float]:
        """Per-coordinate interval holding all but a negligible share of the mass."""
        return (-width, width) if self.kind == "standard_normal" else (0.0, 1.0)


# ==================== Mixing functions ====================

@dataclass(frozen=True, eq=False)
class MixingFunction:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    alpha: float = LEAKY_ALPHA
    init_kind: InitKind = "orthogonal"
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("activation slope alpha must be positive")
        if len(self.weights) < 1 or len(self.weights) != len(self.biases):
            raise ValueError("a mixing needs L >= 1 matching (weight, bias) pairs")
        weights = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        biases = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        n = weights[0].shape[0] if weights[0].ndim == 2 else 0
        if n < 2:
            raise ValueError("mixing dimension must be at least 2")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (n, n) or b.shape != (n,):
                raise ValueError(f"layer {k} has shape {w.shape}/{b.shape}, expected ({n},{n})/({n},)")
            if abs(np.linalg.det(w)) <= MIXING_MIN_DET:
                raise ValueError(f"layer {k} weight is not invertible (|det| <= {MIXING_MIN_DET:g})")
            w.setflags(write=False)
            b.setflags(write=False)
        # private copies; callers keep their own arrays writable
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def n(self) -> int:
        return self.weights[0].shape[0]

    @property
    def L(self) -> int:
        return len(self.weights)


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _uniform_weight(n: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / np.sqrt(n)
    for _ in range(_MAX_RESAMPLES):
        w = rng.uniform(-bound, bound, size=(n, n))
        if abs(np.linalg.det(w)) > MIXING_MIN_DET:
            return w
    raise RuntimeError(f"uniform weight draw stayed singular after {_MAX_RESAMPLES} resamples")


def sample_mixing(
    n: int,
    L: int,
    init_kind: InitKind = "orthogonal",
    seed: int = 0,
    alpha: float = LEAKY_ALPHA,
    bias_scale: float = BIAS_SCALE,
) -> MixingFunction:
    if n < 2 or L < 1:
        raise ValueError("sample_mixing needs n >= 2 and L >= 1")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for _ in range(L):
        if init_kind == "orthogonal":
            weights.append(_orthogonal(n, rng))
            biases.append(bias_scale * rng.standard_normal(n))
        elif init_kind == "uniform":
            weights.append(_uniform_weight(n, rng))
            biases.append(np.zeros(n))
        else:
            raise ValueError(f"unknown init_kind '{init_kind}'")
    return MixingFunction(tuple(weights), tuple(biases), alpha=alpha, init_kind=init_kind, seed=seed)


def _pre_activations(m: MixingFunction, s: np.ndarray):
    h = np.atleast_2d(np.asarray(s, dtype=np.float64))
    pre = []
    for k, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = leaky_tanh(z, m.alpha) if k < m.L - 1 else z
    return h, pre


def mix_forward(m: MixingFunction, s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    x, _ = _pre_activations(m, s)
    return x.reshape(s.shape)


def mix_inverse(m: MixingFunction, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = np.atleast_2d(x)
    for k in reversed(range(m.L)):
        if k < m.L - 1:
            h = leaky_tanh_inverse(h, m.alpha)
        h = np.linalg.solve(m.weights[k], (h - m.biases[k]).T).T
    return h.reshape(x.shape)


def mixing_jacobian(m: MixingFunction, s) -> np.ndarray:
    """Closed-form J_f(s) = W_L D_{L-1} W_{L-1} ... D_1 W_1, batched as (count, n, n)."""
    _, pre = _pre_activations(m, s)
    count = pre[0].shape[0]
    J = np.broadcast_to(m.weights[0], (count, m.n, m.n)).copy()
    for k in range(1, m.L):
        d = leaky_tanh_grad(pre[k - 1], m.alpha)
        J = m.weights[k] @ (d[:, :, None] * J)
    return J


def true_log_density(m: MixingFunction, prior: SourcePrior, x) -> np.ndarray:
    """log p_x(x) = log p_s(f^-1(x)) - log|det J_f(f^-1(x))|."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s = mix_inverse(m, x2)
    logdet = diffmath.logabsdet(mixing_jacobian(m, s)).numpy()
    out = prior.log_density(s) - logdet
    return out if np.ndim(x) > 1 else out[0]


# ==================== Datasets ====================

@dataclass(frozen=True, eq=False)
class Dataset:
    sources: np.ndarray
    observations: np.ndarray
    mixing_seed: int
    prior_kind: PriorKind

    @property
    def count(self) -> int:
        return self.sources.shape[0]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        n = self.sources.shape[1]
        header = [f"s{i + 1}" for i in range(n)] + [f"x{i + 1}" for i in range(n)]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for s_row, x_row in zip(self.sources, self.observations):
                writer.writerow([repr(float(v)) for v in s_row] + [repr(float(v)) for v in x_row])
        return path


def sample_dataset(m: MixingFunction, prior: SourcePrior, count: int, seed: int) -> Dataset:
    if count < 1:
        raise ValueError("sample_dataset needs count >= 1")
    if prior.n != m.n:
        raise ValueError(f"prior dimension {prior.n} does not match mixing dimension {m.n}")
    rng = np.random.default_rng(seed)
    sources = prior.sample(count, rng)
    return Dataset(sources, mix_forward(m, sources), m.seed, prior.kind)


# ==================== Serialization ====================

def mixing_to_document(m: MixingFunction) -> MixingDocument:
    return MixingDocument(
        n=m.n,
        L=m.L,
        alpha=m.alpha,
        init_kind=m.init_kind,
        seed=m.seed,
        layers=[LayerDocument(weight=w.tolist(), bias=b.tolist()) for w, b in zip(m.weights, m.biases)],
    )


def mixing_from_document(doc: MixingDocument) -> MixingFunction:
    if len(doc.layers) != doc.L:
        raise ValueError(f"document declares L={doc.L} but holds {len(doc.layers)} layers")
    weights = tuple(np.array(layer.weight, dtype=np.float64) for layer in doc.layers)
    biases = tuple(np.array(layer.bias, dtype=np.float64) for layer in doc.layers)
    if weights[0].shape[0] != doc.n:
        raise ValueError(f"document declares n={doc.n} but weights are {weights[0].shape}")
    return MixingFunction(weights, biases, alpha=doc.alpha, init_kind=doc.init_kind, seed=doc.seed)


def save_mixing(m: MixingFunction, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(mixing_to_document(m).model_dump_json(indent=2))
    return path


def load_mixing(path: Union[str, Path]) -> MixingFunction:
    return mixing_from_document(MixingDocument.model_validate_json(Path(path).read_text()))


# ==================== Exact 2D Darmois construction ====================

@dataclass(frozen=True, eq=False)
class DarmoisGrid:
    """Tabulated density of a 2D pushforward, integrated with the trapezoid rule."""

    x1: np.ndarray
    x2: np.ndarray
    marginal_cdf: np.ndarray
    conditional_cdf: np.ndarray
    mass: float


def _grid_bounds(m: MixingFunction, prior: SourcePrior, width: float, lattice: int = 129):
    lo, hi = prior.support_box(width)
    axis = np.linspace(lo, hi, lattice)
    s = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    x = mix_forward(m, s)
    mins, maxs = x.min(axis=0), x.max(axis=0)
    if prior.kind == "standard_normal":
        pad = 0.05 * (maxs - mins)
        mins, maxs = mins - pad, maxs + pad
    return mins, maxs


def build_darmois_grid(
    m: MixingFunction,
    prior: SourcePrior,
    nodes: int = DARMOIS_NODES,
    width: float = 6.0,
    mass_tol: float = 1e-3,
    chunk: int = 1 << 18,
) -> DarmoisGrid:
    if m.n != 2:
        raise ValueError("the exact Darmois oracle is only available for n = 2")
    mins, maxs = _grid_bounds(m, prior, width)
    g1 = np.linspace(mins[0], maxs[0], nodes)
    g2 = np.linspace(mins[1], maxs[1], nodes)
    points = np.stack(np.meshgrid(g1, g2, indexing="ij"), axis=-1).reshape(-1, 2)
    logp = np.concatenate([true_log_density(m, prior, points[i:i + chunk]) for i in range(0, len(points), chunk)])
    density = np.exp(logp).reshape(nodes, nodes)

    row_cum = cumulative_trapezoid(density, g2, axis=1, initial=0.0)
    marginal = row_cum[:, -1]
    marginal_cum = cumulative_trapezoid(marginal, g1, initial=0.0)
    mass = float(marginal_cum[-1])
    if abs(1.0 - mass) > mass_tol:
        raise QuadratureError(
            f"Darmois quadrature captured mass {mass:.6f}; widen the grid (width={width}) or add nodes"
        )
    with np.errstate(invalid="ignore", divide="ignore"):
        conditional = np.where(marginal[:, None] > 0, row_cum / marginal[:, None], 0.0)
    logger.info(f"📐 Darmois grid ready: {nodes}x{nodes} nodes, mass {mass:.6f}")
    return DarmoisGrid(g1, g2, marginal_cum / mass, conditional, mass)


def darmois_2d(
    m: MixingFunction,
    prior: SourcePrior,
    x,
    grid: Optional[DarmoisGrid] = None,
    nodes: int = DARMOIS_NODES,
) -> np.ndarray:
    """(F(x1), F(x2 | x1)) from the exact density; accepts one point or a batch."""
    if grid is None:
        grid = build_darmois_grid(m, prior, nodes=nodes)
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u1 = np.interp(pts[:, 0], grid.x1, grid.marginal_cdf)

    pos = np.interp(pts[:, 0], grid.x1, np.arange(len(grid.x1), dtype=np.float64))
    i0 = np.clip(np.floor(pos).astype(int), 0, len(grid.x1) - 2)
    w = np.clip(pos - i0, 0.0, 1.0)
    low = np.array([np.interp(v, grid.x2, grid.conditional_cdf[i]) for v, i in zip(pts[:, 1], i0)])
    high = np.array([np.interp(v, grid.x2, grid.conditional_cdf[i + 1]) for v, i in zip(pts[:, 1], i0)])
    u2 = (1.0 - w) * low + w * high

    eps = 1e-12
    out = np.clip(np.stack([u1, u2], axis=-1), eps, 1.0 - eps)
    return out if np.ndim(x) > 1 else out[0]
