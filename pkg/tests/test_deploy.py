import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from symprecond.deploy import (
    CLAMP_RANGES, ParamPolicy, bench_compare, feature_key, predict_param,
)
from symprecond.expr import parse
from symprecond.krylov import Method, SolverConfig
from symprecond.precond import PrecondConfig
from symprecond.problems import generate_problems

TABLE4 = parse("1.0 + 1.0/(x2 + 1.2)")


def test_fixed_and_symbolic():
    assert predict_param(ParamPolicy.fixed(1.0), np.zeros(6), "sor") == 1.0
    v = predict_param(ParamPolicy.symbolic(TABLE4), [0.3, 0.0, 1, 0, 0, 0], "ssor")
    assert v == pytest.approx(1 + 1 / 1.2, abs=1e-12)


def test_clamp_and_invalid():
    assert predict_param(ParamPolicy.fixed(2.3), [0.0], "sor") == 1.95
    assert predict_param(ParamPolicy.fixed(-1.0), [0.0], "amg") == 0.0
    assert predict_param(ParamPolicy.fixed(0.99), [0.0], "amg") == 0.95
    # log of a negative feature is Invalid: falls back to the default
    assert predict_param(ParamPolicy.symbolic(parse("log(x1)")), [-1.0], "sor") == 1.0
    assert predict_param(ParamPolicy.symbolic(parse("log(x1)")), [-1.0], "amg") == 0.0
    assert predict_param(ParamPolicy.optimal({}), [0.5], "ssor") == 1.0
    with pytest.raises(ValueError):
        predict_param(ParamPolicy.none(), [0.0], "sor")


def test_clamp_fuzz():
    rng = np.random.default_rng(0)
    exprs = [TABLE4, parse("exp(x1 * 5.0)"), parse("x1 / x2"), parse("sqrt(x1) - 3.0"),
             parse("x2 ^ x1")]
    X = rng.standard_normal((20_000, 2)) * rng.choice([1e-3, 1.0, 1e3], (20_000, 1))
    for kind, (lo, hi) in CLAMP_RANGES.items():
        for e in exprs:
            pol = ParamPolicy.symbolic(e)
            vals = [predict_param(pol, x, kind) for x in X[: 100_000 // (3 * len(exprs))]]
            assert lo <= min(vals) and max(vals) <= hi


@given(st.floats(allow_nan=True, allow_infinity=True))
def test_clamp_any_fixed_value(v):
    for kind, (lo, hi) in CLAMP_RANGES.items():
        assert lo <= predict_param(ParamPolicy.fixed(v), [0.0], kind) <= hi


@pytest.fixture(scope="module")
def elliptic():
    return list(generate_problems("elliptic", 6, grid_n=12, seed=1))


def test_bench_shape_and_alias(elliptic):
    pols = {"none": ParamPolicy.none(), "default": ParamPolicy.fixed(1.0),
            "fixed=1.0": ParamPolicy.fixed(1.0), "symbolic": ParamPolicy.symbolic(TABLE4)}
    rep = bench_compare(elliptic, pols, PrecondConfig("sor"), optimal_constant=False)
    assert [r["policy"] for r in rep.rows] == list(pols)
    assert all(r["n"] == 6 for r in rep.rows)
    d, f = rep.row("default"), rep.row("fixed=1.0")
    assert d["mean_iters"] == f["mean_iters"]
    di = [c["iterations"] for c in rep.policy_cells("default")]
    fi = [c["iterations"] for c in rep.policy_cells("fixed=1.0")]
    assert di == fi
    lines = rep.to_csv().splitlines()
    assert lines[0] == ("policy,n,mean_time_s,median_time_s,q1,q3,var,mean_iters,"
                        "mean_cond,n_failed")
    assert len(lines) == 5


def test_per_instance_optimal_is_lower_bound(elliptic):
    lookup = {feature_key(p.features): 1.0 for p in elliptic}
    pols = {"default": ParamPolicy.fixed(1.0), "sym": ParamPolicy.symbolic(TABLE4),
            "fixed=1.9": ParamPolicy.fixed(1.9), "opt": ParamPolicy.optimal(lookup)}
    rep = bench_compare(elliptic, pols, PrecondConfig("sor"), constant_step=0.25)
    opt = rep.row("opt")["mean_iters"]
    for r in rep.rows:
        assert opt <= r["mean_iters"]
    for i in range(len(elliptic)):
        best = min(c["iterations"] for c in rep.cells
                   if c["instance"] == i and c["converged"] and c["policy"] != "opt")
        assert [c for c in rep.policy_cells("opt") if c["instance"] == i][0]["iterations"] \
            <= best
    assert "optimal_constant" in rep.notes


def test_failures_counted(elliptic):
    tight = SolverConfig(Method.GMRES, max_iters=3)
    rep = bench_compare(elliptic[:2], {"default": ParamPolicy.fixed(1.0)},
                        PrecondConfig("sor"), tight, optimal_constant=False)
    r = rep.row("default")
    assert r["n_failed"] == 2 and math.isnan(r["mean_time_s"])


def test_bench_with_cond():
    probs = list(generate_problems("poisson", 3, grid_n=8, seed=0))
    rep = bench_compare(probs, {"default": ParamPolicy.fixed(1.0)}, PrecondConfig("ssor"),
                        SolverConfig(Method.CG), with_cond=True, constant_step=0.5)
    assert rep.row("default")["mean_cond"] > 1
    assert rep.row("optimal-constant")["mean_cond"] > 1


def test_bench_requires_inputs(elliptic):
    with pytest.raises(ValueError):
        bench_compare([], {"d": ParamPolicy.fixed(1.0)}, PrecondConfig("sor"))
    with pytest.raises(ValueError):
        bench_compare(elliptic, {}, PrecondConfig("sor"))
