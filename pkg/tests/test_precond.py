import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import diag_dominant, random_spd
from symprecond.precond import (
    PrecondConfig, PrecondError, PrecondKind, amg_setup, amg_strength,
    amg_vcycle_apply, make_preconditioner, sor_iterate, sor_precond_apply,
    ssor_precond_apply,
)
from symprecond.problems import gen_poisson
from symprecond.sparse import csr_from_dense, to_dense

A22 = csr_from_dense(np.array([[2.0, 1.0], [1.0, 2.0]]))


def laplacian(n):
    return gen_poisson(np.zeros(8), grid_n=n).A


def test_sor_hand_sweep():
    x = sor_iterate(A22, [3.0, 3.0], [0.0, 0.0], 1.0)
    assert np.allclose(x, [1.5, 0.75], rtol=0, atol=1e-15)


def test_sor_fixed_point(rng):
    D = diag_dominant(rng, 12)
    A = csr_from_dense(D)
    x = rng.standard_normal(12)
    for w in (0.5, 1.0, 1.7):
        assert np.allclose(sor_iterate(A, D @ x, x, w), x, atol=1e-12)


def test_sor_omega_one_is_gauss_seidel(rng):
    D = diag_dominant(rng, 10)
    b = rng.standard_normal(10)
    x0 = rng.standard_normal(10)
    L = np.tril(D)
    U = np.triu(D, 1)
    gs = np.linalg.solve(L, b - U @ x0)
    assert np.allclose(sor_iterate(csr_from_dense(D), b, x0, 1.0), gs, atol=1e-12)


def test_sor_precond_hand():
    z = sor_precond_apply(A22, [1.0, 0.0], 1.0, sweeps=1)
    assert np.allclose(z, [0.5, -0.25], atol=1e-15)
    assert np.array_equal(sor_precond_apply(A22, [0.0, 0.0], 1.3), [0.0, 0.0])


def test_sor_precond_dense_oracle(rng):
    for _ in range(5):
        D = rng.standard_normal((10, 10))
        np.fill_diagonal(D, rng.uniform(0.5, 3.0, 10) * rng.choice([-1, 1], 10))
        r = rng.standard_normal(10)
        z = sor_precond_apply(csr_from_dense(D), r, 1.0, sweeps=1)
        assert np.allclose(z, np.linalg.solve(np.tril(D), r), rtol=1e-12, atol=1e-12)


def test_sor_sweeps_chain(rng):
    D = diag_dominant(rng, 15)
    A = csr_from_dense(D)
    r = rng.standard_normal(15)
    x = np.zeros(15)
    for _ in range(4):
        x = sor_iterate(A, r, x, 1.3)
    assert np.allclose(sor_precond_apply(A, r, 1.3, sweeps=4), x, rtol=0, atol=1e-14)


def test_zero_diagonal_names_row():
    A = csr_from_dense(np.array([[1.0, 2.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]))
    with pytest.raises(PrecondError, match="row 1"):
        sor_iterate(A, np.ones(3), np.zeros(3), 1.0)
    with pytest.raises(PrecondError, match="row 1"):
        sor_precond_apply(A, np.ones(3), 1.0)


@pytest.mark.parametrize("omega", [0.0, 2.0, -0.5, 2.5])
def test_omega_range(omega):
    with pytest.raises(PrecondError):
        sor_iterate(A22, [1.0, 1.0], [0.0, 0.0], omega)
    with pytest.raises(PrecondError):
        PrecondConfig("ssor", omega=omega)


def test_ssor_hand():
    z = ssor_precond_apply(A22, [1.0, 0.0], 1.0)
    assert np.allclose(z, [0.625, -0.25], atol=1e-15)
    assert np.array_equal(ssor_precond_apply(A22, [0.0, 0.0], 0.7), [0.0, 0.0])


def _ssor_matrix(D, w):
    d = np.diag(np.diag(D))
    L, U = np.tril(D, -1), np.triu(D, 1)
    return (d + w * L) @ np.linalg.inv(d) @ (d + w * U) / (w * (2 - w))


@pytest.mark.parametrize("omega", [0.3, 1.0, 1.6])
def test_ssor_dense_oracle(rng, omega):
    D = random_spd(rng, 10)
    A = csr_from_dense(D)
    M = _ssor_matrix(D, omega)
    assert np.allclose(M, M.T, atol=1e-12)
    assert np.linalg.eigvalsh((M + M.T) / 2).min() > 0
    for _ in range(3):
        r = rng.standard_normal(10)
        z = ssor_precond_apply(A, r, omega)
        assert np.allclose(z, np.linalg.solve(M, r), rtol=1e-12, atol=1e-12)
        assert r @ z > 0


def test_ssor_rejects_asymmetric_pattern():
    A = csr_from_dense(np.array([[2.0, 1.0], [0.0, 2.0]]))
    with pytest.raises(PrecondError):
        ssor_precond_apply(A, [1.0, 1.0], 1.0)
    with pytest.raises(PrecondError):
        make_preconditioner(A, PrecondConfig("ssor", omega=1.0))


def test_strength_example():
    D = np.array([
        [4.0, -1.0, -1.0, -0.1],
        [-1.0, 4.0, 0.0, 0.0],
        [-1.0, 0.0, 4.0, 0.0],
        [-0.1, 0.0, 0.0, 4.0],
    ])
    S = amg_strength(csr_from_dense(D), 0.25)
    cols, _ = S.row(0)
    assert list(cols) == [1, 2]
    S0 = amg_strength(csr_from_dense(D), 0.0)
    assert list(S0.row(0)[0]) == [1, 2, 3]


def test_strength_diagonal_matrix():
    S = amg_strength(csr_from_dense(np.diag([1.0, 2.0, 3.0])), 0.5)
    assert S.nnz == 0


def test_strength_positive_offdiagonals_weak():
    D = np.array([[4.0, 1.0, -1.0], [1.0, 4.0, 1.0], [-1.0, 1.0, 4.0]])
    S = amg_strength(csr_from_dense(D), 0.0)
    assert list(S.row(0)[0]) == [2]
    assert S.row(1)[0].size == 0


@given(st.floats(0.0, 0.99))
def test_strength_monotone_in_theta(theta):
    A = laplacian(5)
    lo = amg_strength(A, 0.0)
    hi = amg_strength(A, theta)
    assert hi.nnz <= lo.nnz


def test_amg_levels_shrink():
    H = amg_setup(laplacian(8), theta=0.25, coarse_cap=10)
    assert len(H.levels) >= 2
    assert all(a > b for a, b in zip(H.sizes, H.sizes[1:]))
    assert H.sizes[-1] <= 10 or H.warnings


def test_amg_galerkin():
    H = amg_setup(laplacian(6), theta=0.25, coarse_cap=4)
    assert len(H.levels) >= 2
    for k in range(len(H.levels) - 1):
        A0 = to_dense(H.levels[k].A)
        P = to_dense(H.levels[k].P)
        A1 = to_dense(H.levels[k + 1].A)
        assert np.allclose(A1, P.T @ A0 @ P, rtol=0, atol=1e-12 * np.abs(A0).max())


def test_amg_single_level_exact(rng):
    A = laplacian(5)
    H = amg_setup(A, coarse_cap=64)
    assert len(H.levels) == 1
    r = rng.standard_normal(25)
    z = amg_vcycle_apply(H, r)
    assert np.linalg.norm(to_dense(A) @ z - r) / np.linalg.norm(r) <= 1e-10


def test_amg_zero_and_linear(rng):
    H = amg_setup(laplacian(8), theta=0.25, coarse_cap=10)
    assert np.array_equal(amg_vcycle_apply(H, np.zeros(64)), np.zeros(64))
    r1, r2 = rng.standard_normal(64), rng.standard_normal(64)
    lhs = amg_vcycle_apply(H, r1 + r2)
    rhs = amg_vcycle_apply(H, r1) + amg_vcycle_apply(H, r2)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * np.abs(lhs).max())


@pytest.mark.parametrize("theta", [0.0, 0.25, 0.6])
def test_amg_cycle_symmetric(theta):
    H = amg_setup(laplacian(8), theta=theta, coarse_cap=10)
    C = np.column_stack([amg_vcycle_apply(H, e) for e in np.eye(64)])
    assert np.allclose(C, C.T, rtol=0, atol=1e-10 * np.abs(C).max())


def test_amg_sor_smoother_reduces_error(rng):
    A = laplacian(12)
    D = to_dense(A)
    H = amg_setup(A, theta=0.25, coarse_cap=16, smoother="sor", omega=1.2)
    x = rng.standard_normal(144)
    e = x.copy()
    for _ in range(5):
        e = e - amg_vcycle_apply(H, D @ e)
    assert np.linalg.norm(e) < 0.1 * np.linalg.norm(x)


def test_amg_theta_range():
    with pytest.raises(PrecondError):
        amg_setup(laplacian(4), theta=1.0)
    with pytest.raises(PrecondError):
        PrecondConfig("amg", theta=-0.1)


@pytest.mark.parametrize("kind", list(PrecondKind))
def test_make_preconditioner(kind, rng):
    A = laplacian(6)
    cfg = PrecondConfig(kind, omega=1.2, theta=0.25, coarse_cap=8)
    M = make_preconditioner(A, cfg)
    r = rng.standard_normal(36)
    z = M.apply(r)
    assert z.shape == r.shape and np.all(np.isfinite(z))
    # every preconditioner here is SPD for an SPD matrix, except forward SOR
    if kind is not PrecondKind.SOR:
        assert r @ z > 0


def test_config_json_roundtrip():
    for cfg in [PrecondConfig("sor", omega=1.4, sweeps=2), PrecondConfig("ssor", omega=0.8),
                PrecondConfig("amg", theta=0.3), PrecondConfig("amg", theta=0.1, smoother="sor",
                                                               omega=1.1),
                PrecondConfig("jacobi"), PrecondConfig()]:
        back = PrecondConfig.from_json(cfg.to_json())
        assert back.kind == cfg.kind and back.param == cfg.param


def test_with_param():
    assert PrecondConfig("sor").with_param(1.5).omega == 1.5
    assert PrecondConfig("amg").with_param(0.4).theta == 0.4
    with pytest.raises(PrecondError):
        PrecondConfig("sor").with_param(2.0)
