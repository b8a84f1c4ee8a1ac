import math

import numpy as np
import pytest
import torch

from imabench import diffmath
from imabench.contrast import cima_local
from imabench.errors import NonFiniteValue, SingularJacobian, UnsupportedPrimitive


def _central_jacobian(fn, x, step=1e-5):
    n = x.numel()
    cols = []
    for j in range(n):
        e = torch.zeros(n, dtype=torch.float64)
        e[j] = step
        cols.append((fn(x + e) - fn(x - e)) / (2 * step))
    return torch.stack(cols, dim=1)


def test_jacobian_of_identity_is_identity():
    J = diffmath.jacobian(lambda x: x, [0.3, -1.2, 4.0])
    assert torch.equal(J, torch.eye(3, dtype=torch.float64))


def test_jacobian_hand_example():
    J = diffmath.jacobian(lambda x: torch.stack([x[0] ** 2, x[1]]), [3.0, 1.0])
    assert torch.allclose(J, torch.tensor([[6.0, 0.0], [0.0, 1.0]], dtype=torch.float64))


def test_jacobian_of_linear_map_is_its_matrix():
    A = torch.randn(4, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    J = diffmath.jacobian(lambda x: A @ x, torch.ones(4))
    assert torch.equal(J, A)


def test_jacobian_matches_finite_differences_for_mlp():
    gen = torch.Generator().manual_seed(0)
    W1 = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    W2 = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    fn = lambda x: W2 @ torch.tanh(W1 @ x + 0.1)
    x = torch.randn(3, generator=gen, dtype=torch.float64)
    J = diffmath.jacobian(fn, x)
    numeric = _central_jacobian(fn, x)
    rel = (J - numeric).abs() / torch.clamp(torch.maximum(J.abs(), numeric.abs()), min=1e-3)
    assert float(rel.max()) < 1e-5


def test_jacobian_reports_nonfinite_coordinate():
    with pytest.raises(NonFiniteValue) as e:
        diffmath.jacobian(lambda x: torch.stack([x[0], torch.log(x[1])]), [1.0, -1.0])
    assert e.value.coordinate == 1


def test_logabsdet_closed_forms():
    assert float(diffmath.logabsdet(np.eye(3))) == 0.0
    assert float(diffmath.logabsdet(np.diag([2.0, 3.0]))) == pytest.approx(math.log(6.0), abs=1e-12)


def test_logabsdet_gradient_is_inverse_transpose():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    g = diffmath.grad(lambda t: diffmath.logabsdet(t.reshape(3, 3)), A.reshape(-1))
    assert np.allclose(g.numpy().reshape(3, 3), np.linalg.inv(A).T, atol=1e-12)
    report = diffmath.finite_diff_check(lambda t: diffmath.logabsdet(t.reshape(3, 3)), A.reshape(-1))
    assert report.passed


def test_logabsdet_is_additive():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((4, 4)) + 2 * np.eye(4)
    B = rng.standard_normal((4, 4)) + 2 * np.eye(4)
    lhs = float(diffmath.logabsdet(A @ B))
    rhs = float(diffmath.logabsdet(A)) + float(diffmath.logabsdet(B))
    assert abs(lhs - rhs) < 1e-10


def test_singular_matrix_raises_with_condition():
    with pytest.raises(SingularJacobian) as e:
        diffmath.logabsdet([[1.0, 2.0], [2.0, 4.0]])
    assert e.value.condition > 1e12
    with pytest.raises(SingularJacobian):
        diffmath.matinv(np.zeros((2, 2)))


def test_singular_batch_entry_is_located():
    batch = np.stack([np.eye(2), np.eye(2), np.zeros((2, 2))])
    with pytest.raises(SingularJacobian) as e:
        diffmath.logabsdet(batch)
    assert e.value.index == 2


def test_matinv_closed_form_and_round_trips():
    inv = diffmath.matinv([[2.0, 0.0], [0.0, 4.0]])
    assert torch.allclose(inv, torch.tensor([[0.5, 0.0], [0.0, 0.25]], dtype=torch.float64))
    rng = np.random.default_rng(5)
    A = diffmath.as_tensor(rng.standard_normal((5, 5)) + 3 * np.eye(5))
    assert float((A @ diffmath.matinv(A) - torch.eye(5, dtype=torch.float64)).abs().max()) < 1e-10
    assert float((diffmath.matinv(diffmath.matinv(A)) - A).abs().max()) < 1e-8


def test_matinv_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    fn = lambda t: diffmath.matinv(t.reshape(3, 3)).sum() + diffmath.matinv(t.reshape(3, 3))[0, 1] ** 2
    assert diffmath.finite_diff_check(fn, A.reshape(-1)).passed


def test_grad_simple_and_logdet_at_identity():
    assert float(diffmath.grad(lambda t: (t ** 2).sum(), [3.0])[0]) == pytest.approx(6.0)
    g = diffmath.grad(lambda t: diffmath.logabsdet(t.reshape(3, 3)), np.eye(3).reshape(-1))
    assert np.allclose(g.numpy(), np.eye(3).reshape(-1))


def test_grad_of_local_contrast_matches_finite_differences():
    rng = np.random.default_rng(7)
    J = rng.standard_normal((3, 3)) + 2 * np.eye(3)
    report = diffmath.finite_diff_check(lambda t: cima_local(t.reshape(3, 3)), J.reshape(-1))
    assert report.passed


def test_grad_rejects_unsupported_losses():
    with pytest.raises(UnsupportedPrimitive):
        diffmath.grad(lambda t: float(t.sum()), [1.0, 2.0])
    with pytest.raises(UnsupportedPrimitive):
        diffmath.grad(lambda t: torch.tensor(float(np.sum(t.detach().numpy() ** 2))), [1.0, 2.0])
    with pytest.raises(UnsupportedPrimitive):
        diffmath.grad(lambda t: t * 2.0, [1.0, 2.0])


def test_finite_diff_check_quadratic_passes_tightly():
    weights = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    report = diffmath.finite_diff_check(lambda t: (weights * t ** 2).sum(), [0.5, -1.0, 2.0])
    assert report.passed
    assert report.max_rel_error < 1e-8


def test_finite_diff_check_flags_broken_gradient():
    weights = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    params = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    broken = 2 * weights * params
    broken[2] = 0.0
    report = diffmath.finite_diff_check(lambda t: (weights * t ** 2).sum(), params, analytic=broken)
    assert not report.passed
    assert report.worst_index == 2


def test_finite_diff_check_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        diffmath.finite_diff_check(lambda t: t.sum(), [1.0], step=0.0)
