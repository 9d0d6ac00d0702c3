"""Acceptance gate: one test per criterion, each run at its stated tolerance.

Every test records a ``PASS``/``FAIL`` line that is printed in the
terminal summary.  Criterion 8 builds a full desk pipeline (about
15-25 minutes on one core); set ``SYMPRECOND_SKIP_PIPELINE=1`` to skip it.
"""
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE, diag_dominant, random_spd
from symprecond.cli import main as cli_main
from symprecond.datagen import (
    Objective, SearchConfig, adaptive_grid_search, build_dataset, make_objective,
)
from symprecond.deploy import CLAMP_RANGES, ParamPolicy, bench_compare
from symprecond.expr import Library, check_constraints, eval_batch, nrmse, parse, reward
from symprecond.krylov import Method, SolverConfig, estimate_condition
from symprecond.policy import PolicyModel, risk_seeking_gradient
from symprecond.precond import PrecondConfig, PrecondKind, sor_precond_apply, ssor_precond_apply
from symprecond.problems import gen_poisson, generate_problems
from symprecond.sparse import csr_from_dense, csr_from_triplets
from symprecond.train import EXACT_REWARD, PRESETS, load_checkpoint, train


def record(k, ok, what, detail, seconds, limit):
    within = seconds < limit
    status = "PASS" if ok and within else "FAIL"
    line = (f"CRITERION {k} {status}: {what} -- {detail}; "
            f"{seconds:.1f} s (limit {limit:g} s)")
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line
    assert within, line


# 1 ------------------------------------------------------------------------


def test_criterion_1_preconditioner_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        D = diag_dominant(rng, 10, density=0.6)
        r = rng.standard_normal(10)
        w = rng.uniform(0.05, 1.95)
        # one sweep from zero: (D + wL) z = w r
        z = sor_precond_apply(csr_from_dense(D), r, w, sweeps=1)
        want = np.linalg.solve(np.diag(np.diag(D)) + w * np.tril(D, -1), w * r)
        worst = max(worst, np.linalg.norm(z - want) / np.linalg.norm(want))

        S = random_spd(rng, 10)
        d = np.diag(np.diag(S))
        M = (d + w * np.tril(S, -1)) @ np.linalg.inv(d) @ (d + w * np.triu(S, 1)) / (w * (2 - w))
        z = ssor_precond_apply(csr_from_dense(S), r, w)
        want = np.linalg.solve(M, r)
        worst = max(worst, np.linalg.norm(z - want) / np.linalg.norm(want))
    record(1, worst <= 1e-12, "SOR/SSOR match dense oracles on 100 systems",
           f"max relative error {worst:.2e} (tol 1e-12)", time.perf_counter() - t0, 5)


# 2 ------------------------------------------------------------------------


def test_criterion_2_sor_model_problem():
    t0 = time.perf_counter()
    p = gen_poisson(np.ones(8), grid_n=16)
    solver = SolverConfig(Method.RICHARDSON, tolerance=1e-6, max_iters=5000)
    f = make_objective(p, PrecondConfig("sor"), Objective("iters"), solver)
    res = adaptive_grid_search(f, 0.05, 1.95, coarse_step=0.05, fine_step=0.001)
    oracle = 2 / (1 + math.sin(math.pi / 17))
    err = abs(res.y - oracle)
    record(2, err <= 0.05, "grid search finds the classical SOR optimum",
           f"omega* = {res.y:.4f}, oracle {oracle:.4f}, |diff| {err:.4f} (tol 0.05)",
           time.perf_counter() - t0, 120)


# 3 ------------------------------------------------------------------------


def test_criterion_3_condition_estimator():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        S = random_spd(rng, 50)
        s = np.linalg.svd(S, compute_uv=False)
        est = estimate_condition(csr_from_dense(S))
        worst = max(worst, abs(est / (s[0] / s[-1]) - 1))
    eye = csr_from_triplets(50, 50, [(i, i, 1.0) for i in range(50)])
    k_eye = estimate_condition(eye)
    ok = worst <= 0.05 and k_eye == 1.0
    record(3, ok, "Arnoldi condition estimate vs dense SVD",
           f"max relative error {worst:.2e} (tol 0.05), kappa(I) = {k_eye!r}",
           time.perf_counter() - t0, 30)


# 4 ------------------------------------------------------------------------


def test_criterion_4_amg_theta_trend():
    t0 = time.perf_counter()
    p = gen_poisson(np.ones(8), grid_n=32)
    k0 = estimate_condition(p.A, PrecondConfig("amg", theta=0.0))
    k8 = estimate_condition(p.A, PrecondConfig("amg", theta=0.8))
    record(4, k0 < k8, "AMG kappa lower at theta=0 than at theta=0.8",
           f"kappa(theta=0) = {k0:.4f}, kappa(theta=0.8) = {k8:.4f}",
           time.perf_counter() - t0, 120)


# 5 ------------------------------------------------------------------------


def test_criterion_5_gradients():
    t0 = time.perf_counter()
    model = PolicyModel(Library(3), seed=7)
    batch = model.sample(20, np.random.default_rng(8))
    seqs = [e.tokens for e in batch.expressions]
    g = np.array([model.flatten(model.backward(model.rollout(0, forced=[s]), [1.0]))
                  for s in seqs])
    flat = model.get_flat()
    idx = np.random.default_rng(9).choice(len(flat), 300, replace=False)
    fd = np.empty((len(seqs), len(idx)))
    h = 1e-5
    for k, j in enumerate(idx):
        f = flat.copy()
        f[j] += h
        model.set_flat(f)
        up = model.log_prob(seqs)
        f[j] -= 2 * h
        model.set_flat(f)
        fd[:, k] = (up - model.log_prob(seqs)) / (2 * h)
    model.set_flat(flat)
    fd_err = max(np.linalg.norm(fd[i] - g[i, idx]) / np.linalg.norm(g[i, idx])
                 for i in range(len(seqs)))

    # two-outcome toy policy: a length-1 expression is one of the two terminals
    toy = PolicyModel(Library(1, use_const=False), hidden=6, embed=3, seed=11,
                      min_length=1, max_length=1)
    space = [("1.0",), ("x1",)]
    rewards = {space[0]: 0.3, space[1]: 0.8}
    p_a, p_b = np.exp(toy.log_prob(space))
    assert abs(p_a + p_b - 1) < 1e-12
    eps = 0.75
    # p_b < eps, so the (1 - eps) quantile is R_a and only outcome b is elite:
    # grad J = p_b (R_b - R_a) grad log p_b / eps
    assert p_b < eps < 1.0
    g_b = toy.flatten(toy.backward(toy.rollout(0, forced=[space[1]]), [1.0]))
    analytic = p_b * (rewards[space[1]] - rewards[space[0]]) * g_b / eps
    rng = np.random.default_rng(10)
    acc = 0.0
    n_batches = 100
    for _ in range(n_batches):
        b = toy.sample(1000, rng)
        r = np.array([rewards[e.tokens] for e in b.expressions])
        acc = acc + toy.flatten(risk_seeking_gradient(toy, b, r, eps))
    mc = acc / n_batches
    mc_err = np.linalg.norm(mc - analytic) / np.linalg.norm(analytic)
    ok = fd_err <= 1e-5 and mc_err <= 0.05
    record(5, ok, "policy gradients",
           f"BPTT vs central FD worst per-rollout rel. error {fd_err:.2e} (tol 1e-5) over 20 rollouts; "
           f"estimator vs analytic rel. error {mc_err:.3f} (tol 0.05) at 1e5 samples", time.perf_counter() - t0, 120)


# 6 ------------------------------------------------------------------------


def test_criterion_6_constraints():
    t0 = time.perf_counter()
    model = PolicyModel(Library(6), seed=12)
    rng = np.random.default_rng(13)
    broken = 0
    lengths = []
    for _ in range(10):
        for e in model.sample(1000, rng).expressions:
            lengths.append(len(e))
            broken += bool(check_constraints(e))
    ok = broken == 0 and len(lengths) == 10_000 and 4 <= min(lengths) and max(lengths) <= 64
    record(6, ok, "10^4 sampled expressions obey the sampling rules",
           f"{broken} violations, lengths in [{min(lengths)}, {max(lengths)}]",
           time.perf_counter() - t0, 60)


# 7 ------------------------------------------------------------------------


def test_criterion_7_symbolic_recovery():
    t0 = time.perf_counter()
    X = np.random.default_rng(0).uniform(-1, 1, (200, 1))
    targets = {"x1 + 1.0": X[:, 0] + 1.0, "1 + 1/(x1 + 1.2)": 1 + 1 / (X[:, 0] + 1.2)}
    exact, close, notes = 0, 0, []
    for name, y in targets.items():
        for seed in range(5):
            res = train(X, y, replace(PRESETS["desk"], seed=seed))
            err = nrmse(y, eval_batch(res.best, X))
            if name.startswith("x1"):
                exact += res.best_reward >= EXACT_REWARD
            else:
                close += err < 1e-3
            notes.append(f"{name} seed {seed}: {len(res.trace.rows)} it, NRMSE {err:.1e}")
    for n in notes:
        print(n)
    record(7, exact >= 4 and close >= 3, "desk-preset symbolic recovery",
           f"x1+1.0 exact in {exact}/5 seeds (need 4); 1+1/(x1+1.2) NRMSE<1e-3 in "
           f"{close}/5 (need 3)", time.perf_counter() - t0, 15 * 60)


# 8 ------------------------------------------------------------------------


@pytest.mark.skipif(os.environ.get("SYMPRECOND_SKIP_PIPELINE") == "1",
                    reason="desk pipeline disabled by SYMPRECOND_SKIP_PIPELINE")
def test_criterion_8_desk_pipeline():
    t0 = time.perf_counter()
    problems = list(generate_problems("elliptic", 250, grid_n=64, seed=2024))
    precond = PrecondConfig("sor")
    solver = SolverConfig(Method.GMRES)
    lo, hi = CLAMP_RANGES[PrecondKind.SOR]
    # the GMRES(30) iteration count is ragged in omega, so bracket halving
    # stops in local minima; the adaptive grid search does not
    search = SearchConfig(method="grid", lo=lo, hi=hi, coarse_step=0.05, fine_step=0.01,
                          solver=solver)
    ds = build_dataset(problems, precond, Objective("iters"), search, seed=0, n_test=50)
    t_data = time.perf_counter() - t0
    assert len(ds.train_idx) == 200 and len(ds.test_idx) == 50
    X, y = ds.train()
    res = train(X, y, replace(PRESETS["desk"], seed=0))
    t_train = time.perf_counter() - t0 - t_data
    test = [problems[i] for i in ds.test_idx]
    pols = {"default": ParamPolicy.fixed(1.0), "symbolic": ParamPolicy.symbolic(res.best)}
    rep = bench_compare(test, pols, precond, solver, constant_step=0.05)
    sym = rep.row("symbolic")["mean_iters"]
    default = rep.row("default")["mean_iters"]
    const = rep.row("optimal-constant")["mean_iters"]
    failed = sum(rep.row(n)["n_failed"] for n in ("symbolic", "default", "optimal-constant"))
    print(rep.to_csv())
    print(f"learned: {res.best}  (train R {res.best_reward:.4f})")
    ok = failed == 0 and sym <= 0.90 * default and sym <= 1.05 * const
    record(8, ok, "desk pipeline, elliptic grid 64, SOR, 200/50 split",
           f"mean iterations: learned {sym:.1f}, default {default:.1f} "
           f"(ratio {sym / default:.3f}, need <= 0.90), optimal constant "
           f"{const:.1f} at omega={rep.notes['optimal_constant']} (ratio {sym / const:.3f}, "
           f"need <= 1.05); datagen {t_data:.0f} s, train {t_train:.0f} s",
           time.perf_counter() - t0, 45 * 60)


# 9 ------------------------------------------------------------------------


def test_criterion_9_reward():
    t0 = time.perf_counter()
    rng = np.random.default_rng(14)
    exprs = [parse(s) for s in ("x1 * 2.0", "log(x1) + x2", "x1 / x2", "exp(x2 * 30.0)",
                                "sqrt(x1 - x2)", "x1 ^ x2")]
    in_range = True
    for _ in range(300):
        n = rng.integers(2, 30)
        X = rng.standard_normal((n, 2)) * 10.0 ** rng.integers(-3, 4)
        y = rng.standard_normal(n) * 10.0 ** rng.integers(-3, 4)
        for e in exprs:
            r = reward(e, X, y)
            in_range &= 0.0 <= r <= 1.0
    X = rng.uniform(-1, 1, (50, 2))
    exact = reward(parse("x1 * x2 + 1.0"), X, X[:, 0] * X[:, 1] + 1.0)
    worked = reward(parse("x1 * 1.0"), [[1.0], [1.0]], [0.0, 2.0])
    ok = in_range and exact == 1.0 and worked == 0.5
    record(9, ok, "reward function",
           f"fuzzed rewards in [0,1]: {in_range}; exact fit R = {exact!r}; "
           f"worked example R = {worked!r}", time.perf_counter() - t0, 5)


# 10 -----------------------------------------------------------------------


def test_criterion_10_reproducibility(tmp_path):
    t0 = time.perf_counter()
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        argv = [
            ["gen-problems", "--family", "elliptic", "--grid", "16", "--count", "24",
             "--seed", "5", "--out", d / "p.jsonl"],
            ["datagen", "--problems", d / "p.jsonl", "--precond", "sor", "--objective",
             "iters", "--range", "0.05:1.95", "--coarse", "0.05", "--fine", "0.001",
             "--out", d / "d.csv"],
            ["train", "--dataset", d / "d.csv", "--preset", "desk", "--seed", "3",
             "--samples", "2000", "--out", d / "policy.json"],
        ]
        for a in argv:
            assert cli_main([str(v) for v in a]) == 0
        expr, _ = load_checkpoint(d / "policy.json")
        outs.append(((d / "d.csv").read_bytes(), (d / "p.jsonl").read_bytes(), expr))
    same_csv = outs[0][0] == outs[1][0]
    same_problems = outs[0][1] == outs[1][1]
    same_expr = outs[0][2] == outs[1][2]
    record(10, same_csv and same_problems and same_expr, "seeded reruns reproduce outputs",
           f"dataset CSV identical: {same_csv}; problems identical: {same_problems}; "
           f"best expression identical: {same_expr} ({outs[0][2]})",
           time.perf_counter() - t0, 600)
