import numpy as np
import pytest

from srrtune.errors import DivergenceError, DomainError, ShapeError
from srrtune.forward import MatrixOperator, identity_operator
from srrtune.solvers import (RegularizerKind, SolverConfig, convert_lambda, gradient, gradient_adjoint, objective,
                             solve, tikhonov1_norm, tv_norm)


def _tv_loop(x):
    total = 0.0
    nx, ny, nz = x.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                dx = x[i + 1, j, k] - x[i, j, k] if i + 1 < nx else 0.0
                dy = x[i, j + 1, k] - x[i, j, k] if j + 1 < ny else 0.0
                dz = x[i, j, k + 1] - x[i, j, k] if k + 1 < nz else 0.0
                total += (dx * dx + dy * dy + dz * dz) ** 0.5
    return total


def test_gradient_adjoint_is_exact_transpose(rng):
    x = rng.standard_normal((5, 4, 3))
    g = rng.standard_normal((3, 5, 4, 3))
    assert np.vdot(gradient(x), g) == pytest.approx(np.vdot(x, gradient_adjoint(g)), rel=1e-12)


def test_regularizers_match_scalar_loops(rng):
    x = rng.standard_normal((4, 3, 5))
    assert tv_norm(x) == pytest.approx(_tv_loop(x), rel=1e-12)
    g = gradient(x)
    assert tikhonov1_norm(x) == pytest.approx(float((g ** 2).sum()), rel=1e-12)
    assert tv_norm(np.full((3, 3, 3), 2.0)) == 0.0


def test_objective_matches_scalar_loop(rng):
    A = rng.standard_normal((7, 8))
    H = MatrixOperator(A, (2, 2, 2))
    x = rng.standard_normal((2, 2, 2))
    y = rng.standard_normal(7)
    r = [sum(A[i, j] * x.ravel()[j] for j in range(8)) - y[i] for i in range(7)]
    want = 0.5 * sum(v * v for v in r) + 0.3 * _tv_loop(x)
    assert objective(H, y, x, "tv", 0.3) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ShapeError):
        objective(H, y, np.zeros((2, 2, 1)), "tv", 0.3)


def test_two_pixel_tv_closed_form():
    H = identity_operator((2, 1, 1))
    res = solve(H, np.array([0.0, 1.0]), "tv", SolverConfig(0.2, max_iters=5000, tol=1e-12))
    np.testing.assert_allclose(res.x.ravel(), [0.2, 0.8], atol=1e-4)


def test_two_pixel_tv_merges_above_threshold():
    # for alpha >= 1/2 the minimiser is the mean
    H = identity_operator((2, 1, 1))
    res = solve(H, np.array([0.0, 1.0]), "tv", SolverConfig(0.8, max_iters=5000, tol=1e-12))
    np.testing.assert_allclose(res.x.ravel(), [0.5, 0.5], atol=1e-4)


def test_tikhonov_matches_dense_solve(rng):
    A = rng.standard_normal((40, 27))
    H = MatrixOperator(A, (3, 3, 3))
    y = rng.standard_normal(40)
    alpha = 0.1
    D = np.stack([gradient(e.reshape(3, 3, 3)).ravel() for e in np.eye(27)], axis=1)
    x_ref = np.linalg.solve(A.T @ A + 2 * alpha * D.T @ D, A.T @ y)
    res = solve(H, y, "tikhonov1", SolverConfig(alpha, max_iters=200, tol=1e-10))
    assert res.converged and res.residual < 1e-10
    np.testing.assert_allclose(res.x.ravel(), x_ref, atol=1e-8)


@pytest.mark.parametrize("reg", ["tv", "tikhonov1"])
def test_objective_does_not_increase_from_init(reg, small_series, small_grid):
    from srrtune.forward import build_operator, stack_data
    H = build_operator(small_series, small_grid)
    y = stack_data(small_series)
    res = solve(H, y, reg, SolverConfig(0.1, max_iters=30))
    assert res.objective <= res.history[0] + 1e-9
    assert res.objective == pytest.approx(objective(H, y, res.x, reg, 0.1), rel=1e-9)
    assert res.volume.grid is small_grid


def _path(reg, H, y, alphas, **kw):
    fid, R = [], []
    for a in alphas:
        x = solve(H, y, reg, SolverConfig(a, **kw)).x
        r = H.apply(x) - y
        fid.append(0.5 * float(r @ r))
        R.append(tv_norm(x) if reg == "tv" else tikhonov1_norm(x))
    return np.array(fid), np.array(R)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tikhonov_solution_path_monotone(seed):
    rng = np.random.default_rng(seed)
    H = MatrixOperator(rng.standard_normal((60, 64)), (4, 4, 4))
    y = rng.standard_normal(60)
    fid, R = _path("tikhonov1", H, y, [1e-3, 1e-2, 1e-1, 1.0], max_iters=500, tol=1e-12)
    assert np.all(np.diff(fid) >= -1e-9) and np.all(np.diff(R) <= 1e-9)


def test_tv_solution_path_monotone():
    rng = np.random.default_rng(3)
    H = identity_operator((4, 4, 2))
    y = rng.standard_normal(32)
    fid, R = _path("tv", H, y, [0.05, 0.1, 0.2, 0.4], max_iters=20000, tol=1e-13)
    assert np.all(np.diff(fid) > 0) and np.all(np.diff(R) < 0)


def test_zero_alpha_tv_recovers_data_for_identity(rng):
    H = identity_operator((3, 3, 3))
    y = rng.standard_normal(27)
    res = solve(H, y, "tv", SolverConfig(0.0, max_iters=3000, tol=1e-14))
    np.testing.assert_allclose(res.x.ravel(), y, atol=1e-6)


class _Exploding:
    domain_shape = (2, 2, 2)

    def __init__(self):
        self.calls = 0

    def apply(self, x):
        self.calls += 1
        return np.full(4, np.nan if self.calls > 3 else float(self.calls))

    def adjoint(self, y):
        return np.ones(self.domain_shape)

    def norm(self):
        return 1.0


def test_divergence_reports_iteration():
    with pytest.raises(DivergenceError) as exc:
        solve(_Exploding(), np.zeros(4), "tv", SolverConfig(0.1, max_iters=10, init="zeros"))
    assert exc.value.iteration >= 1


def test_config_validation_and_parsing():
    with pytest.raises(ValueError):
        SolverConfig(-1.0)
    with pytest.raises(ValueError):
        SolverConfig(0.1, init="random")
    with pytest.raises(ValueError):
        solve(identity_operator((1, 1, 1)), [np.inf], "tv", SolverConfig(0.1))
    assert RegularizerKind.parse("TV") is RegularizerKind.TV
    with pytest.raises(ValueError):
        RegularizerKind.parse("l1")


def test_convert_lambda():
    assert convert_lambda(0.75) == pytest.approx(4 / 3)
    with pytest.raises(DomainError):
        convert_lambda(0.0)
