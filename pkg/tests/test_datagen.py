import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from symprecond.datagen import (
    Objective, ObjectiveKind, ParamDataset, SearchConfig, SearchError,
    adaptive_grid_search, binary_search_min, build_dataset, make_objective,
    objective_eval, product_grid_search, split_indices,
)
from symprecond.krylov import Method, SolverConfig
from symprecond.precond import PrecondConfig
from symprecond.problems import ProblemInstance, gen_poisson, generate_problems
from symprecond.sparse import csr_from_triplets


def identity_instance(n=4):
    A = csr_from_triplets(n, n, [(i, i, 1.0) for i in range(n)])
    return ProblemInstance("poisson", np.zeros(8), A, np.ones(n), 2, 0)


# -- objectives -------------------------------------------------------------


def test_objective_weights():
    assert Objective(ObjectiveKind.TIME).weights == (0.0, 1.0, 0.0)
    assert Objective("hybrid", (0.03, 1, 0)).weights == (0.03, 1.0, 0.0)
    assert Objective("iters").deterministic and not Objective("time").deterministic
    with pytest.raises(ValueError):
        Objective("hybrid")
    with pytest.raises(ValueError):
        Objective("hybrid", (0, 0, 0))
    with pytest.raises(ValueError):
        Objective("hybrid", (-1, 1, 0))
    o = Objective("hybrid", (0.03, 1, 0))
    assert Objective.from_json(o.to_json()) == o


@pytest.mark.parametrize("omega", [0.3, 1.0, 1.7])
def test_identity_iterations_objective(omega):
    v = objective_eval(identity_instance(), PrecondConfig("sor"), omega, Objective("iters"),
                       SolverConfig(Method.GMRES))
    assert v == 1


def test_hybrid_is_weighted_sum():
    p = gen_poisson(np.ones(8), grid_n=8)
    cfg = PrecondConfig("ssor")
    solver = SolverConfig(Method.CG)
    cond = objective_eval(p, cfg, 1.2, Objective("cond"), solver)
    its = objective_eval(p, cfg, 1.2, Objective("iters"), solver)
    mixed = objective_eval(p, cfg, 1.2, Objective("hybrid", (0.03, 0.0, 2.0)), solver)
    assert mixed == pytest.approx(0.03 * cond + 2 * its, rel=1e-12)
    t = objective_eval(p, cfg, 1.2, Objective("hybrid", (0.03, 1.0, 0.0)), solver)
    assert 0.03 * cond < t < 0.03 * cond + 1.0


def test_failures_are_infinite():
    p = gen_poisson(np.ones(8), grid_n=8)
    tight = SolverConfig(Method.GMRES, max_iters=2)
    assert objective_eval(p, PrecondConfig("sor"), 1.0, Objective("iters"), tight) == math.inf
    # illegal parameter value
    assert objective_eval(p, PrecondConfig("sor"), 2.5, Objective("iters")) == math.inf


# -- searches ---------------------------------------------------------------


def test_grid_quadratic():
    r = adaptive_grid_search(lambda w: (w - 1.3) ** 2, 0.0, 2.0)
    assert abs(r.y - 1.3) <= 0.001


def test_grid_constant_tie_break():
    assert adaptive_grid_search(lambda w: 5.0, 0.1, 1.9).y == 0.1
    assert binary_search_min(lambda w: 5.0, 0.1, 1.9).y == 0.1


def test_grid_sor_poisson_classical_optimum():
    p = gen_poisson(np.ones(8), grid_n=16)
    solver = SolverConfig(Method.RICHARDSON, tolerance=1e-6, max_iters=5000)
    f = make_objective(p, PrecondConfig("sor"), Objective("iters"), solver)
    r = adaptive_grid_search(f, 1.0, 1.95, coarse_step=0.05, fine_step=0.01)
    assert abs(r.y - 2 / (1 + math.sin(math.pi / 17))) < 0.05


def test_grid_is_exact_argmin_over_evaluated():
    seen = {}

    def f(w):
        seen[w] = (w * 7.3) % 1.1
        return seen[w]

    r = adaptive_grid_search(f, 0.0, 2.0)
    best = min(seen.values())
    assert r.value == best
    assert r.y == min(w for w, v in seen.items() if v == best)
    assert r.evaluations == len(seen)


def test_grid_penalty_rule():
    def f(w):
        return math.inf if w > 1.0 else 2.0 - w

    r = adaptive_grid_search(f, 0.0, 2.0)
    assert r.y == 1.0 and r.value == 1.0
    with pytest.raises(SearchError, match="no feasible parameter"):
        adaptive_grid_search(lambda w: math.inf, 0.0, 1.0)


def test_grid_argument_checks():
    with pytest.raises(ValueError):
        adaptive_grid_search(lambda w: w, 1.0, 1.0)
    with pytest.raises(ValueError):
        adaptive_grid_search(lambda w: w, 0.0, 1.0, coarse_step=0.01, fine_step=0.05)


def test_binary_quadratic():
    r = binary_search_min(lambda w: (w - 0.8) ** 2, 0.0, 2.0)
    assert abs(r.y - 0.8) <= 0.001 and not r.fallback


def test_binary_edge_minimum():
    assert binary_search_min(lambda w: w, 0.25, 1.75).y == 0.25
    assert binary_search_min(lambda w: -w, 0.25, 1.75).y == 1.75


def test_binary_fallback_on_non_unimodal():
    f = lambda w: -abs(w - 1.0) + 0.1 * (w - 0.3) ** 2  # noqa: E731
    r = binary_search_min(f, 0.0, 2.0)
    assert r.fallback
    g = adaptive_grid_search(f, 0.0, 2.0)
    assert r.y == g.y
    r2 = binary_search_min(f, 0.0, 2.0, fallback=False)
    assert not r2.fallback


@given(st.floats(0.05, 1.95), st.floats(0.5, 5.0), st.floats(1.0, 3.0))
def test_binary_matches_grid_on_convex(c, scale, power):
    f = lambda w: scale * abs(w - c) ** power  # noqa: E731
    b = binary_search_min(f, 0.0, 2.0)
    g = adaptive_grid_search(f, 0.0, 2.0)
    assert abs(b.y - g.y) <= 0.002
    assert abs(b.y - c) <= 0.001


def test_deterministic_search_reproducible():
    p = next(generate_problems("elliptic", 1, grid_n=10, seed=5))
    f = make_objective(p, PrecondConfig("sor"), Objective("iters"))
    a = adaptive_grid_search(f, 0.5, 1.9, coarse_step=0.1, fine_step=0.05)
    b = adaptive_grid_search(f, 0.5, 1.9, coarse_step=0.1, fine_step=0.05)
    assert (a.param, a.value) == (b.param, b.value)


def test_product_grid():
    f = lambda p: (p[0] - 0.3) ** 2 + (p[1] - 1.2) ** 2  # noqa: E731
    r = product_grid_search(f, [(0.0, 0.9), (0.5, 1.9)], coarse_step=0.1, fine_step=0.01)
    assert r.param == pytest.approx((0.3, 1.2), abs=1e-9)


def test_product_grid_degenerate_axis():
    f = lambda p: (p[0] - 0.3) ** 2 + p[1]  # noqa: E731
    r = product_grid_search(f, [(0.0, 0.9), (1.0, 1.0)], coarse_step=0.1, fine_step=0.01)
    s = adaptive_grid_search(lambda w: (w - 0.3) ** 2 + 1.0, 0.0, 0.9, 0.1, 0.01)
    assert r.param[1] == 1.0
    assert r.param[0] == pytest.approx(s.y, abs=1e-12)


# -- datasets ---------------------------------------------------------------


@pytest.mark.parametrize("n, n_train", [(1200, 1000), (10, 8), (6, 5)])
def test_split_sizes(n, n_train):
    tr, te = split_indices(n, seed=1)
    assert len(tr) == n_train and len(te) == n - n_train
    assert sorted(np.concatenate([tr, te])) == list(range(n))
    assert np.array_equal(split_indices(n, seed=1)[1], te)


def test_dataset_roundtrip_bit_exact(tmp_path, rng):
    X = rng.standard_normal((7, 3))
    Y = rng.uniform(0, 2, (7, 2))
    V = rng.exponential(size=7)
    tr, te = split_indices(7, seed=2)
    d = ParamDataset(X, Y, V, tr, te, {"family": "darcy"})
    path = tmp_path / "d.csv"
    d.write(path)
    back = ParamDataset.read(path)
    assert np.array_equal(back.X, X) and np.array_equal(back.Y, Y)
    assert np.array_equal(back.objective_values, V)
    assert np.array_equal(back.train_idx, tr) and np.array_equal(back.test_idx, te)
    assert back.meta["family"] == "darcy"
    header = path.read_text().splitlines()[0]
    assert header == "x1,x2,x3,y,y2,objective_value"


def test_build_dataset_small():
    probs = list(generate_problems("poisson", 6, grid_n=8, seed=3))
    search = SearchConfig(coarse_step=0.1, fine_step=0.05,
                          solver=SolverConfig(Method.CG))
    ds = build_dataset(probs, PrecondConfig("ssor"), Objective("iters"), search, seed=4)
    assert len(ds) == 6 and len(ds.train_idx) == 5
    assert np.all((ds.Y > 0) & (ds.Y < 2))
    assert np.array_equal(ds.X, np.array([p.features for p in probs]))
    again = build_dataset(probs, PrecondConfig("ssor"), Objective("iters"), search, seed=4)
    assert np.array_equal(ds.Y, again.Y)
    assert ds.meta["precond"]["kind"] == "ssor" and ds.meta["dropped"] == []


def test_build_dataset_drops_failures():
    probs = list(generate_problems("poisson", 3, grid_n=8, seed=3))
    search = SearchConfig(coarse_step=0.5, fine_step=0.25,
                          solver=SolverConfig(Method.CG, max_iters=1))
    with pytest.raises(SearchError):
        build_dataset(probs, PrecondConfig("ssor"), Objective("iters"), search)


def test_search_config_json():
    s = SearchConfig(method="binary", fallback=False, solver=SolverConfig(Method.CG, 1e-6))
    assert SearchConfig.from_json(s.to_json()) == s
    assert s.bounds("amg") == (0.0, 1.0)
    assert SearchConfig(lo=0.5).bounds("sor") == (0.5, 2.0)
    with pytest.raises(ValueError):
        SearchConfig(method="random")
