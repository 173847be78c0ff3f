"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 8 runs a J=20 smoke variant by default. Set ``HOMCAR_FULL_ACCEPTANCE=1``
to run the J=100 version as well (a few hours on one core). The real-region
check (criterion 10) needs user-supplied data and is documented in the README.
"""

import math
import os
import time

import numpy as np
import pytest
from scipy.stats import ortho_group

from homcar.car import build_homcar, build_icar, conditional_spec, null_direction, row_sum_diagnostics
from homcar.graph import centroid_distances, distance_quantile, lattice_graph, neighbor_counts, parse_graph
from homcar.inference import BymModelSpec, McmcConfig, brute_force_posterior, fit_bym, posterior_mean_map
from homcar.inference._kernel import draw_precision
from homcar.metrics import (
    dic_from_loglik,
    empirical_variance_map,
    interval_score,
    mab,
    mean_variance,
    pearson_correlation,
    rmse,
    variance_mse,
    waic_from_loglik,
)
from homcar.sampling import (
    SimulationScenario,
    derive_seed,
    exp_cov_matrix,
    gaussian_field_factor,
    generate_replicate,
    sample_constrained_gmrf,
    sample_gaussian_field,
)
from homcar.spectral import (
    GeneralizedInverseSpec,
    generalized_inverse,
    marginal_variances,
    moore_penrose,
    singular_normal_logdensity,
)

from .conftest import random_connected_graph


@pytest.fixture
def report(capsys):
    def emit(number, title, checks: dict, started: float, limit: float | None = None):
        elapsed = time.perf_counter() - started
        ok = all(checks.values()) and (limit is None or elapsed < limit)
        failed = [k for k, v in checks.items() if not v]
        if limit is not None and elapsed >= limit:
            failed.append(f"runtime {elapsed:.1f}s >= {limit}s")
        detail = "" if ok else "  failed: " + ", ".join(failed)
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title} ({elapsed:.1f}s){detail}")
        assert ok, detail
    return emit


def test_criterion_01_p3_oracle(report):
    t = time.perf_counter()
    Q = build_icar(parse_graph("a,b\nb,c"))
    exact = np.array([[5, -1, -4], [-1, 2, -1], [-4, -1, 5]]) / 9
    checks = {
        "pseudoinverse": np.abs(moore_penrose(Q) - exact).max() < 1e-10,
        "variances": np.abs(marginal_variances(Q).variances - [5 / 9, 2 / 9, 5 / 9]).max() < 1e-10,
    }
    report(1, "P3 pseudoinverse oracle", checks, t, 1.0)


def test_criterion_02_generalized_inverses(report):
    t = time.perf_counter()
    rng = np.random.default_rng(20240602)
    worst_gi = worst_mp = worst_ld = 0.0
    for _ in range(20):
        g = random_connected_graph(rng, int(rng.integers(3, 31)), int(rng.integers(0, 15)))
        Q = build_icar(g)
        Qd = Q.dense()
        mp = moore_penrose(Q)
        worst_mp = max(worst_mp, np.abs(generalized_inverse(Q, GeneralizedInverseSpec.zeros(g.size)) - mp).max())
        theta = rng.standard_normal(g.size)
        theta -= theta.mean()
        ref = singular_normal_logdensity(theta, np.zeros(g.size), Q, 1.5)
        for _ in range(10):
            spec = GeneralizedInverseSpec.random(g.size, rng)
            G = generalized_inverse(Q, spec)
            worst_gi = max(worst_gi, np.abs(Qd @ G @ Qd - Qd).max())
            ld = singular_normal_logdensity(theta, np.zeros(g.size), Q, 1.5, spec=spec)
            worst_ld = max(worst_ld, abs(ld - ref))
    checks = {"QGQ=Q": worst_gi < 1e-8, "zero spec is Moore-Penrose": worst_mp < 1e-10,
              "log-density invariant": worst_ld < 1e-8}
    report(2, "generalized-inverse family", checks, t, 30.0)


def test_criterion_03_transform_consistency(report):
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for n in (3, 6, 12):
        Q = build_icar(random_connected_graph(rng, n, n)).dense()
        V = ortho_group.rvs(n, random_state=rng)
        worst = max(worst, np.abs(moore_penrose(V @ Q @ V.T) - V @ moore_penrose(Q) @ V.T).max())
    Q = build_icar(parse_graph("a,b\nb,c")).dense()
    L = np.diag([0.5, 1.0, 2.0])
    Linv = np.linalg.inv(L)
    gap = np.abs(moore_penrose(L @ Q @ L) - Linv @ moore_penrose(Q) @ Linv).max()
    report(3, "transform consistency", {"orthogonal": worst < 1e-8, "diagonal witness": gap > 1e-3}, t, 5.0)


def test_criterion_04_homcar_structure(report):
    t = time.perf_counter()
    checks = {}
    rng = np.random.default_rng(11)
    graphs = [lattice_graph(6, 7), parse_graph("a,b\nb,c")] + [random_connected_graph(rng, 15, 10) for _ in range(3)]
    null_err = weight_err = icar_rows = hom_rows = 0.0
    for g in graphs:
        Q = build_icar(g)
        H = build_homcar(g)
        s = H.sigma
        null_err = max(null_err, np.abs(H.matrix @ (1 / s)).max())
        n = neighbor_counts(g)
        for i in range(g.size):
            c = conditional_spec(H, i)
            weight_err = max(weight_err, np.abs(c.mean_weights - s[c.neighbors] / (n[i] * s[i])).max())
        icar_rows = max(icar_rows, np.abs(row_sum_diagnostics(Q)).max())
        W = (Q.dense() != 0) & ~np.eye(g.size, dtype=bool)
        expected = s**2 * n - s * (W @ s)
        hom_rows = max(hom_rows, np.abs(row_sum_diagnostics(H) - expected).max())
    checks["null direction"] = null_err < 1e-10
    checks["conditional weights"] = weight_err < 1e-12
    checks["ICAR rows sum to zero"] = icar_rows == 0.0
    checks["HomCAR row sums"] = hom_rows < 1e-12
    checks["null_direction agrees"] = np.allclose(
        np.abs(null_direction(build_homcar(graphs[0]))),
        (1 / build_homcar(graphs[0]).sigma) / np.linalg.norm(1 / build_homcar(graphs[0]).sigma), atol=1e-10)
    report(4, "HomCAR structure", checks, t, 5.0)


def test_criterion_05_lattice_homoscedasticity(report):
    t = time.perf_counter()
    g = lattice_graph(20, 20)
    r_i = marginal_variances(build_icar(g)).max_min_ratio
    r_h = marginal_variances(build_homcar(g)).max_min_ratio
    checks = {"R_H < 1.5": r_h < 1.5, "R_H < R_I / 3": r_h < r_i / 3,
              "R_I frozen": abs(r_i - 3.2759038937511793) < 1e-8,
              "R_H frozen": abs(r_h - 1.0614929052276574) < 1e-8}
    report(5, f"20x20 variance ratios R_I={r_i:.4f} R_H={r_h:.4f}", checks, t, 60.0)


def test_criterion_06_sampler_law(report):
    t = time.perf_counter()
    Q = build_icar(parse_graph("a,b\nb,c"))
    draws = sample_constrained_gmrf(Q, 1.0, 606, 10_000)
    S = moore_penrose(Q)
    frob = np.linalg.norm(np.cov(draws.T, bias=True) - S) / np.linalg.norm(S)
    g = lattice_graph(15, 15)
    C = exp_cov_matrix(centroid_distances(g), 0.2, distance_quantile(centroid_distances(g), 0.25))
    field = sample_gaussian_field(C, 607, 10_000)
    emp = field.var(axis=0)
    checks = {"GMRF covariance within 10%": frob < 0.1,
              "analytic diagonal 0.04": np.abs(np.diag(C) - 0.04).max() < 1e-12,
              "empirical variances within 10%": np.abs(emp / 0.04 - 1).max() < 0.1}
    report(6, f"sampler law (frobenius {frob:.3f}, field var range {emp.min():.4f}-{emp.max():.4f})",
           checks, t, 60.0)


def test_criterion_07_inference_oracle(report):
    t = time.perf_counter()
    O = np.array([2, 7, 4, 5])
    E = np.full(4, 5.0)
    model = BymModelSpec(build_icar(parse_graph("a,b\nb,c\nc,d\nd,a")))
    ref = brute_force_posterior(O, E, model)
    fit = fit_bym(O, E, model, McmcConfig(burn_in=5000, samples_per_chain=20_000, thinning=5, seed=7))
    err = max(abs(fit.flat("beta0").mean() - ref.beta0_mean),
              np.abs(fit.flat("eta").mean(axis=0) - ref.eta_mean).max())
    rng = np.random.default_rng(77)
    moments = []
    for shape, rate, quad in ((1.0 + 1.5, 5e-5, 4.1), (1.0 + 2.0, 5e-5, 0.3)):
        d = np.array([draw_precision(x, rate, quad) for x in rng.standard_gamma(shape, 20_000)])
        b = rate + quad / 2
        moments.append(abs(d.mean() / (shape / b) - 1) < 0.02 and abs(d.var() / (shape / b**2) - 1) < 0.04)
    checks = {"posterior means within 0.02": err < 0.02, "gamma conditionals": all(moments),
              "converged": fit.converged}
    report(7, f"4-cycle MCMC vs quadrature (max error {err:.4f})", checks, t, 600.0)


def test_criterion_09_metric_fixtures(report):
    t = time.perf_counter()
    ll = np.array([[-1.0], [-3.0]])
    checks = {
        "DIC": abs(dic_from_loglik(np.array([[-1.0], [-1.4]]), [-0.2]) - 4.4) < 1e-12,
        "WAIC": abs(waic_from_loglik(ll) + 2 * (math.log((math.exp(-1) + math.exp(-3)) / 2) - 2)) < 1e-12,
        "MAB": abs(mab([[0.1, -0.1], [0.5, 0.7]], np.zeros((2, 2))) - 0.3) < 1e-12,
        "RMSE": abs(rmse([0.5, 0.0], [0.0, 0.0]) - math.sqrt(0.125)) < 1e-12,
        "IS above": abs(interval_score(0.0, 1.0, 1.5, alpha=0.1) - 11.0) < 1e-12,
        "IS below": abs(interval_score(0.0, 1.0, -0.5, alpha=0.05) - 21.0) < 1e-12,
        "IS inside": abs(interval_score(0.0, 1.0, 0.5) - 1.0) < 1e-12,
    }
    report(9, "metric formula fixtures", checks, t)


def _replication(J: int, base_seed: int = 20240601):
    g = lattice_graph(15, 15)
    d = centroid_distances(g)
    s = SimulationScenario(g, distance_quantile(d, 0.25), replicates=J, base_seed=base_seed)
    L = gaussian_field_factor(s.covariance())
    models = {"icar": BymModelSpec(build_icar(g)), "homcar": BymModelSpec(build_homcar(g))}
    maps = {k: [] for k in models}
    for r in range(J):
        rep = generate_replicate(s, r, L)
        for k, m in models.items():
            fit = fit_bym(rep.counts, s.expected(), m, McmcConfig(seed=derive_seed(1, r)))
            maps[k].append(posterior_mean_map(fit, allow_unconverged=True))
    prior = marginal_variances(models["icar"].structure).variances
    out = {}
    for k, v in maps.items():
        emp = empirical_variance_map(np.array(v))
        out[k] = {"corr": pearson_correlation(prior, emp), "mse": variance_mse(emp), "mean": mean_variance(emp)}
    return out


def _criterion_08(report, J):
    t = time.perf_counter()
    res = _replication(J)
    i, h = res["icar"], res["homcar"]
    checks = {
        "(a) ICAR correlation > 0.1": i["corr"] > 0.1,
        "(b) |HomCAR correlation| < ICAR correlation": abs(h["corr"]) < i["corr"],
        "(c) HomCAR variance_mse lower": h["mse"] < i["mse"],
        "(d) HomCAR mean variance higher": h["mean"] > i["mean"],
        "(e) both mean variances < 0.04": i["mean"] < 0.04 and h["mean"] < 0.04,
    }
    title = (f"15x15 replication J={J}: corr icar={i['corr']:.4f} homcar={h['corr']:.4f}; "
             f"mse icar={i['mse']:.6f} homcar={h['mse']:.6f}; mean icar={i['mean']:.5f} homcar={h['mean']:.5f}")
    report(8, title, checks, t)


def test_criterion_08_smoke(report):
    _criterion_08(report, 20)


@pytest.mark.skipif(os.environ.get("HOMCAR_FULL_ACCEPTANCE") != "1",
                    reason="J=100 run takes hours; set HOMCAR_FULL_ACCEPTANCE=1")
def test_criterion_08_full(report):
    _criterion_08(report, 100)


@pytest.mark.skip(reason="needs a user-supplied real region graph; see README")
def test_criterion_10_real_region():
    pass
