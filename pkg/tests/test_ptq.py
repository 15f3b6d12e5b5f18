import itertools

import numpy as np
import pytest

from calibq.calibration import damp
from calibq.ptq import (
    MagrConfig,
    NumericalError,
    PtqConfig,
    magr_objective,
    magr_preprocess,
    project_l1_ball,
    prox_linf,
    ptq_optq,
    ptq_rtn,
    weighted_objective,
)
from calibq.quant_grid import QuantConfig, QuantGrid, dequantize, fit_matrix_grid, quantize_codes

from conftest import rel


def cfg(bits=4, method="optq", **kw):
    return PtqConfig(method=method, quant=QuantConfig(bits=bits, **kw))


def sequential_oracle(W, H, c):
    """OPTQ by definition: after fixing each row, re-solve the free rows exactly."""
    W0 = np.asarray(W, dtype=np.float64)
    m = W0.shape[0]
    grid = fit_matrix_grid(W0, c.quant)
    groups = grid.row_group()
    work = W0.copy()
    Q = np.zeros_like(W0)
    for i in range(m):
        gi = QuantGrid(grid.delta[groups[i]], grid.zero[groups[i]], grid.bits)
        Q[i] = dequantize(quantize_codes(work[i], gi), gi)
        fixed, free = slice(0, i + 1), slice(i + 1, m)
        if i + 1 < m:
            work[free] = W0[free] - np.linalg.solve(H[free, free], H[free, fixed] @ (Q[fixed] - W0[fixed]))
    return Q


def brute_force_codes(W, H, grid):
    """Best assignment over every code combination for a single column."""
    m = W.shape[0]
    best = np.inf
    for codes in itertools.product(range(grid.maxq + 1), repeat=m):
        Q = grid.delta * (np.array(codes, dtype=float)[:, None] - grid.zero)
        best = min(best, weighted_objective(Q - W, H))
    return best


def test_rtn_on_grid_weights_unchanged():
    W = np.array([[0.0, -1.5], [1.0, 0.0], [2.0, 1.5], [3.0, 3.0]])
    res = ptq_rtn(W, cfg(2, "rtn"))
    np.testing.assert_array_equal(res.Q, W)
    assert res.obj_plain == 0.0


def test_rtn_per_channel_exact():
    W = np.array([[0.0, 3.0], [1.0, 6.0], [2.0, 9.0], [3.0, 12.0]])
    res = ptq_rtn(W, cfg(2, "rtn", granularity="per_channel"))
    np.testing.assert_array_equal(res.Q, W)


def test_rtn_entrywise_nearest(rng):
    W = rng.normal(size=(8, 4))
    res = ptq_rtn(W, cfg(3, "rtn"))
    for j in range(4):
        delta, zero = res.grid.delta[0, j], res.grid.zero[0, j]
        pts = (np.arange(8) - zero) * delta
        nearest = pts[np.argmin(np.abs(W[:, j, None] - pts[None, :]), axis=1)]
        np.testing.assert_allclose(np.abs(res.Q[:, j] - W[:, j]), np.abs(nearest - W[:, j]), atol=1e-14)


def test_optq_diagonal_hessian_equals_rtn(rng):
    for _ in range(20):
        m, n = rng.integers(2, 20, size=2)
        W = rng.normal(size=(m, n))
        H = float(rng.uniform(0.1, 10)) * np.eye(m)
        c = cfg(int(rng.choice([2, 3, 4])), group_size=8)
        a, b = ptq_optq(W, H, c), ptq_rtn(W, c, H)
        np.testing.assert_array_equal(a.codes, b.codes)
        np.testing.assert_array_equal(a.Q, b.Q)


def test_optq_on_grid_any_hessian(rng):
    W = np.array([[0.0, 3.0], [1.0, 2.0], [2.0, 1.0], [3.0, 0.0]])
    X = rng.normal(size=(20, 4)) @ rng.normal(size=(4, 4))
    res = ptq_optq(W, damp(X.T @ X, 0.01), cfg(2))
    np.testing.assert_array_equal(res.Q, W)


def test_optq_matches_sequential_oracle(rng):
    for _ in range(10):
        m, n = int(rng.integers(3, 12)), int(rng.integers(1, 6))
        X = rng.normal(size=(5 * m, m)) @ rng.normal(size=(m, m))
        H = damp(X.T @ X, 0.01).H
        W = rng.normal(size=(m, n))
        c = cfg(int(rng.choice([2, 3, 4])), group_size=4)
        np.testing.assert_allclose(ptq_optq(W, H, c).Q, sequential_oracle(W, H, c), atol=1e-12)


def test_optq_correlated_two_by_one():
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    W = np.array([[0.3], [1.7]])
    c = cfg(2)
    opt, rtn = ptq_optq(W, H, c), ptq_rtn(W, c, H)
    best = brute_force_codes(W, H, QuantGrid(opt.grid.delta, opt.grid.zero, 2))
    assert best <= opt.obj_weighted + 1e-12
    assert opt.obj_weighted <= rtn.obj_weighted + 1e-12


def test_optq_grid_stays_fixed(rng):
    m = 10
    X = rng.normal(size=(40, m)) @ rng.normal(size=(m, m))
    W = rng.normal(size=(m, 3))
    res = ptq_optq(W, damp(X.T @ X, 0.01), cfg(3, group_size=4))
    ref = fit_matrix_grid(W, QuantConfig(bits=3, group_size=4))
    np.testing.assert_array_equal(res.grid.delta, ref.delta)
    groups = ref.row_group()
    for i in range(m):
        k = res.Q[i] / ref.delta[groups[i]] + ref.zero[groups[i]]
        np.testing.assert_allclose(k, np.round(k), atol=1e-9)
        assert np.all((np.round(k) >= 0) & (np.round(k) <= 7))


def test_optq_not_spd():
    with pytest.raises(NumericalError, match="damp"):
        ptq_optq(np.ones((2, 2)), np.diag([1.0, -1.0]), cfg())
    with pytest.raises(NumericalError):
        ptq_optq(np.ones((2, 2)), np.zeros((2, 2)), cfg())


def test_optq_dimension_mismatch():
    with pytest.raises(ValueError):
        ptq_optq(np.ones((3, 2)), np.eye(2), cfg())


def test_weighted_objective_cases(rng):
    M = rng.normal(size=(4, 3))
    assert weighted_objective(np.zeros((4, 3)), np.eye(4)) == 0.0
    assert np.isclose(weighted_objective(M, np.eye(4)), np.linalg.norm(M), rtol=1e-14)
    X = rng.normal(size=(12, 4))
    assert abs(weighted_objective(M, X.T @ X) / np.linalg.norm(X @ M) - 1) <= 1e-10


def test_weighted_objective_random_oracle(rng):
    for _ in range(50):
        m, n, k = rng.integers(1, 10, size=3)
        X, M = rng.normal(size=(k + m, m)), rng.normal(size=(m, n))
        assert abs(weighted_objective(M, X.T @ X) - np.linalg.norm(X @ M)) <= 1e-9 * np.linalg.norm(X @ M)


# --- MagR ------------------------------------------------------------------


def l1_projection_oracle(v, radius):
    """Bisection on the soft-threshold level."""
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    lo, hi = 0.0, a.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(a - mid, 0).sum() > radius:
            lo = mid
        else:
            hi = mid
    return np.sign(v) * np.maximum(a - hi, 0)


def test_l1_projection_against_bisection(rng):
    for _ in range(100):
        v = rng.normal(size=int(rng.integers(1, 12))) * rng.uniform(0.1, 5)
        radius = float(rng.uniform(0.01, 3))
        np.testing.assert_allclose(project_l1_ball(v, radius), l1_projection_oracle(v, radius), atol=1e-10)


def test_l1_projection_columnwise(rng):
    V = rng.normal(size=(6, 5))
    radii = rng.uniform(0.1, 2, size=5)
    P = project_l1_ball(V, radii)
    for j in range(5):
        np.testing.assert_allclose(P[:, j], l1_projection_oracle(V[:, j], radii[j]), atol=1e-10)


def test_prox_linf_moreau_identity(rng):
    v = rng.normal(size=7)
    t = 0.8
    p = prox_linf(v, t)
    # prox minimizes t*||x||_inf + 0.5||x - v||^2; compare against perturbations
    f = lambda x: t * np.max(np.abs(x)) + 0.5 * np.sum((x - v) ** 2)  # noqa: E731
    for _ in range(200):
        assert f(p) <= f(p + 1e-3 * rng.normal(size=7)) + 1e-12


def test_magr_vanishing_penalty(rng):
    X = rng.normal(size=(30, 6))
    W = rng.normal(size=(6, 4))
    out = magr_preprocess(W, X.T @ X, alpha=1e-12, iters=20)
    assert rel(out.W, W) <= 1e-6


def test_magr_single_column_line_search():
    w = np.array([[1.0], [0.0], [0.0]])
    alpha = 0.8
    out = magr_preprocess(w, np.eye(3), alpha=alpha, iters=50, tol=0)
    # scalar oracle: only the peak entry moves; minimize (t - 1)^2 + alpha * t over a fine grid
    ts = np.linspace(0, 1, 200001)
    t_star = ts[np.argmin((ts - 1) ** 2 + alpha * ts)]
    assert abs(out.W[0, 0] - t_star) <= 1e-5
    np.testing.assert_allclose(out.W[1:, 0], 0.0, atol=1e-12)
    assert np.max(np.abs(out.W)) < 1.0
    assert np.all(np.diff(out.history[:, 0]) <= 0)


def test_magr_monotone_random(rng):
    for _ in range(20):
        m, n = int(rng.integers(3, 12)), int(rng.integers(1, 6))
        X = rng.normal(size=(4 * m, m)) @ rng.normal(size=(m, m))
        H = damp(X.T @ X, 0.01).H
        W = rng.standard_t(3, size=(m, n))
        alpha = float(rng.uniform(0.1, 10)) * np.trace(H) / m
        out = magr_preprocess(W, H, alpha, iters=30, tol=0)
        assert np.all(np.diff(out.history, axis=0) <= 1e-12 * np.abs(out.history[:-1]))
        assert np.all(np.max(np.abs(out.W), axis=0) <= np.max(np.abs(W), axis=0) + 1e-12)
        np.testing.assert_allclose(out.history[-1], magr_objective(out.W, W, H, alpha))


def test_magr_reports_nonconvergence(rng, caplog):
    X = rng.normal(size=(20, 5)) @ np.diag([1, 1, 1, 1, 1e-3])
    W = rng.normal(size=(5, 3))
    out = magr_preprocess(W, X.T @ X, alpha=5.0, iters=1, tol=0)
    assert not out.converged
    assert "MagR" in caplog.text


def test_magr_inside_ptq_uses_original_w(rng):
    m = 8
    X = rng.normal(size=(40, m))
    H = damp(X.T @ X, 0.01)
    W = rng.normal(size=(m, 4))
    W[0, 0] = 8.0
    c = PtqConfig("optq", QuantConfig(bits=3), MagrConfig(alpha=50.0, iters=50), 0.01)
    res = ptq_optq(W, H, c)
    assert not np.array_equal(res.W_pre, W)
    assert np.abs(res.W_pre).max() < np.abs(W).max()
    assert np.isclose(res.obj_weighted, weighted_objective(res.Q - W, H))


def test_magr_config_validation():
    with pytest.raises(ValueError):
        MagrConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        MagrConfig(iters=0)
    with pytest.raises(ValueError):
        PtqConfig(method="awq")
