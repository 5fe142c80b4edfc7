"""Acceptance criteria, one test each, at the stated tolerances.

Every test records a single PASS/FAIL line; the lines are repeated in the
terminal summary.  Criteria 8 to 10 run the full experiments and are marked
``slow`` but stay in the default run.
"""

import time
import warnings

import numpy as np
import pytest

from mongerb import analytic_ot_1d as ot1d
from mongerb.eim import eim_construct
from mongerb.entropic_ot import (
    SinkhornConfig,
    entropic_barycenter,
    entropic_monge_map,
    gaussian_moments,
    self_potential,
    sinkhorn_solve,
    softmin_ctransform,
)
from mongerb.pde import AdvectionOperator
from mongerb.pod import correlation_matrix, pod_from_correlation
from mongerb.registration import MongeEmbeddingSet, build_transport_modes
from mongerb.rom_pipeline import (
    FoldedMappingWarning,
    PipelineOptions,
    advection_error_series,
    draw_test_parameters,
    offline_train,
    online_advance_advection,
    online_solve_poisson,
    plain_pod_artifacts,
    poisson_test_errors,
)
from mongerb.tensor_grid import GridField, make_uniform_grid, normalize_density

BOUNDARY_LAYER = dict(mu_min=20.0, ratio=float(np.sqrt(0.1)))


def gaussian_1d(grid, mean, var=5e-3):
    x = grid.axis(0)
    return normalize_density(GridField(grid, np.exp(-((x - mean) ** 2) / (2 * var))))


def test_exact_transport_bound(acceptance_record):
    t0 = time.perf_counter()
    family = ot1d.BoundaryLayerFamily(**BOUNDARY_LAYER)
    errs, _ = ot1d.exact_transport_errors(family, n_mu=50, n_nodes=4097)
    elapsed = time.perf_counter() - t0
    bound = 2 * np.exp(-20.0)
    ok = bool(np.all(errs <= bound)) and elapsed < 5
    acceptance_record(1, "exact-map registration bound", ok,
                      f"max error {errs.max():.3e} <= {bound:.3e} over 50 mu, {elapsed:.2f} s < 5 s")


def test_one_mode_bound(acceptance_record):
    t0 = time.perf_counter()
    details, ok = [], True
    for mu_min in (20.0, 5.0):
        family = ot1d.BoundaryLayerFamily(mu_min, BOUNDARY_LAYER["ratio"])
        errs = ot1d.one_mode_errors(family, n_mu=50, n_nodes=4097)
        bound = family.one_mode_bound()
        ok &= bool(np.all(errs <= bound))
        details.append(f"mu_min={mu_min:g}: {errs.max():.3e} <= {bound:.3e}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10
    acceptance_record(2, "one-mode registration bound", ok, "; ".join(details) + f", {elapsed:.2f} s < 10 s")


def test_entropic_map_against_cdf_oracle(acceptance_record):
    t0 = time.perf_counter()
    grid = make_uniform_grid(1, 257)
    rho, sigma = gaussian_1d(grid, 0.35), gaussian_1d(grid, 0.65)
    exact = ot1d.transport_map_1d(rho, sigma).as_array()[0]
    details, ok = [], True
    for eps in (1e-2, 1e-3):
        res = sinkhorn_solve(rho, sigma, SinkhornConfig(eps, tol=1e-8, log_domain=True))
        gap = entropic_monge_map(res).as_array()[0] - exact
        err = float(np.sqrt(np.sum(gap**2 * rho.masses())))
        ok &= err <= 3 * np.sqrt(eps)
        details.append(f"eps={eps:g}: {err:.3e} <= {3 * np.sqrt(eps):.3e}")
    plain = sinkhorn_solve(rho, sigma, SinkhornConfig(1e-2, tol=1e-12, log_domain=False))
    logd = sinkhorn_solve(rho, sigma, SinkhornConfig(1e-2, tol=1e-12, log_domain=True))
    diff = max(np.max(np.abs(plain.psi_rho.values - logd.psi_rho.values)),
               np.max(np.abs(plain.psi_sigma.values - logd.psi_sigma.values)))
    ok &= diff <= 1e-8 and not plain.log_domain
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30
    acceptance_record(3, "entropic map vs cdf oracle", ok,
                      "; ".join(details) + f"; plain/log gap {diff:.1e}, {elapsed:.2f} s < 30 s")


def test_debiased_gaussian_barycenter(acceptance_record):
    t0 = time.perf_counter()
    grid = make_uniform_grid(1, 257)
    h = grid.spacing[0]
    var, eps = 5e-3, 1e-3
    inputs = [gaussian_1d(grid, 0.35, var), gaussian_1d(grid, 0.65, var)]
    debiased = entropic_barycenter(inputs, [0.5, 0.5], eps, debias=True)
    biased = entropic_barycenter(inputs, [0.5, 0.5], eps, debias=False, reference="product")
    m_d, v_d = gaussian_moments(debiased)
    m_b, v_b = gaussian_moments(biased)
    elapsed = time.perf_counter() - t0
    ok = (abs(m_d - 0.5) <= 2 * h and abs(v_d - var) <= 0.1 * var
          and abs(m_b - 0.5) <= 2 * h and abs(v_b - (var - eps)) <= 0.2 * (var - eps) and elapsed < 60)
    acceptance_record(4, "Gaussian barycenter", ok,
                      f"debiased mean {m_d:.4f} var {v_d:.3e}; product-reference var {v_b:.3e} "
                      f"(target {var - eps:.1e}); {elapsed:.2f} s < 60 s")


def test_shift_family_single_mode(acceptance_record):
    shifts = np.linspace(-0.15, 0.15, 11)
    # analytic potentials of translations y -> y + s e_1 on a 2D grid
    grid2 = make_uniform_grid(2, 33)
    y1, _ = grid2.mesh()
    uniform = normalize_density(GridField(grid2, np.ones(grid2.shape)))
    analytic = build_transport_modes(MongeEmbeddingSet(uniform, np.array([-s * y1.ravel() for s in shifts]),
                                                       shifts), 1e-12)
    lam_a = analytic.eigenvalues
    ratio_a = lam_a[1] / lam_a[0]

    # debiased Sinkhorn potentials from the central Gaussian at eps = 1e-3
    grid = make_uniform_grid(1, 257)
    ref = gaussian_1d(grid, 0.5)
    cfg = SinkhornConfig(1e-3, tol=1e-6, log_domain=True)
    correction = self_potential(ref, cfg).psi_rho.values
    pots = np.array([sinkhorn_solve(ref, gaussian_1d(grid, 0.5 + s), cfg).psi_rho.values - correction
                     for s in shifts])
    modes = build_transport_modes(MongeEmbeddingSet(ref, pots, shifts), 1e-6)
    lam = modes.eigenvalues
    ratio_s = lam[1] / lam[0]
    x = grid.axis(0)
    target = -(x - x[modes.anchor[0]])
    w = ref.masses()
    sign = np.sign(np.sum(modes.modes[0] * target * w))
    mode_err = float(np.sqrt(np.sum((sign * modes.modes[0] - target) ** 2 * w) / np.sum(target**2 * w)))
    ok = ratio_a <= 1e-8 and ratio_s <= 1e-3 and mode_err <= 1e-2
    acceptance_record(5, "shift family is rank one", ok,
                      f"analytic lambda2/lambda1 {ratio_a:.1e}, Sinkhorn {ratio_s:.1e}, "
                      f"mode vs -y relative {mode_err:.1e}")


def test_pod_eckart_young(acceptance_record):
    rng = np.random.default_rng(6)
    worst = 0.0
    for trial in range(20):
        n_s = int(rng.integers(4, 30))
        # graded singular values: tails stay far above the double-precision floor of ||S||^2
        singular = np.logspace(0.0, -rng.uniform(1.0, 3.0), n_s)
        U, _ = np.linalg.qr(rng.normal(size=(n_s, n_s)))
        V, _ = np.linalg.qr(rng.normal(size=(200, n_s)))
        S = (U * singular) @ V.T
        pod = pod_from_correlation(correlation_matrix(S), 1e-15)
        lam = pod.eigenvalues
        for n in range(1, pod.rank):
            Z = pod.truncate(n).modes(S)
            residual = np.sum((S - S @ Z.T @ Z) ** 2)
            tail = lam[n:].sum()
            worst = max(worst, abs(residual - tail) / tail)
    acceptance_record(6, "POD Eckart-Young", worst <= 1e-8, f"max relative residual gap {worst:.1e} <= 1e-8")


def test_eim_polynomial_exactness(acceptance_record):
    x = np.linspace(-1.0, 1.0, 201)
    worst, triangular = 0.0, True
    rng = np.random.default_rng(7)
    for degree in range(1, 7):
        family = np.array([x**k for k in range(degree + 1)])
        basis = eim_construct(family)
        B = basis.matrix
        triangular &= basis.Q == degree + 1
        triangular &= bool(np.all(np.triu(B, 1) == 0) and np.all(np.diag(B) == 1))
        for _ in range(5):
            g = rng.normal(size=degree + 1) @ family
            worst = max(worst, np.max(np.abs(basis.interpolate(g[basis.points]) - g)) / np.abs(g).max())
    acceptance_record(7, "EIM polynomial exactness", worst <= 1e-10 and triangular,
                      f"max relative interpolation error {worst:.1e} <= 1e-10, B unit lower triangular: {triangular}")


@pytest.mark.slow
def test_poisson_experiment(acceptance_record):
    t0 = time.perf_counter()
    opts = PipelineOptions(problem="poisson")
    art = offline_train(opts)
    mus = draw_test_parameters("poisson", 50, 1)
    hf = [art.problem.solve(art.space, mu) for mu in mus]
    registered, _ = poisson_test_errors(art, mus, use_eim=False, hf=hf)
    plain_art = plain_pod_artifacts(art, art.n_m + art.m)
    plain, _ = poisson_test_errors(plain_art, mus, use_eim=False, hf=hf)
    avg_r, avg_p = registered.l2.mean(), plain.l2.mean()
    ok_a = avg_r <= 5e-2 and avg_r < avg_p

    lam_u = art.spectra["u"] / art.spectra["u"][0]
    lam_m = art.spectra["mapped"] / art.spectra["mapped"][0]
    # index k counts from 1
    ok_b = bool(np.all(lam_m[2:] < lam_u[2:]))
    first_bad = int(np.argmax(~(lam_m[2:] < lam_u[2:]))) + 3 if not ok_b else None

    gaps = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FoldedMappingWarning)
        for mu in mus[:20]:
            full = online_solve_poisson(art, mu, use_eim=False, remap=False).coefficients
            eim = online_solve_poisson(art, mu, use_eim=True, remap=False).coefficients
            gaps.append(np.sum((eim - full) ** 2) / np.sum(full**2))
    gap = float(np.mean(gaps))
    tau_eim = opts.resolved_tau_eim
    ok_c = gap <= 10 * tau_eim
    elapsed = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and elapsed < 15 * 60
    acceptance_record(
        8, "Poisson experiment", ok,
        f"(a) avg L2 {avg_r:.3e} <= 5e-2, plain n={art.n_m + art.m} {avg_p:.3e}; "
        f"(b) mapped spectrum below raw from index 3: {ok_b}"
        + (f" (first failure at index {first_bad})" if first_bad else "")
        + f"; (c) EIM coefficient gap {gap:.1e} <= {10 * tau_eim:.0e}; "
        f"m={art.m} n_m={art.n_m}; {elapsed / 60:.1f} min < 15 min")


@pytest.mark.slow
def test_advection_experiment(acceptance_record):
    t0 = time.perf_counter()
    opts = PipelineOptions(problem="advection", density="u", tau=1e-3)
    art = offline_train(opts)
    alphas = draw_test_parameters("advection", 20, 1)
    op = AdvectionOperator(art.problem, art.space)
    h = art.grid.spacing[0]
    points = art.grid.points()
    errs, peak_gaps = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FoldedMappingWarning)
        for alpha in alphas:
            hf = op.trajectory(float(alpha), 1.0)[-1]
            sol = online_advance_advection(art, float(alpha), 1.0, remap_every=10**9)[-1]
            u = sol.physical_field.flat()
            e = u - hf
            M = art.space.mass()
            errs.append(np.sqrt(e @ M @ e) / np.sqrt(hf @ M @ hf))
            peak_gaps.append(np.max(np.abs(points[np.argmax(u)] - points[np.argmax(hf)])) / h)
    avg = float(np.mean(errs))
    plain = plain_pod_artifacts(art, 24)
    _, plain_series, _ = advection_error_series(plain, alphas, 1.0, use_eim=False)
    avg_plain = float(plain_series[-1])
    elapsed = time.perf_counter() - t0
    ok = avg <= 0.2 and avg < avg_plain and max(peak_gaps) <= 2 and elapsed < 20 * 60
    acceptance_record(
        9, "advection experiment", ok,
        f"t=1 avg L2 {avg:.3e} <= 2e-1, plain n=24 {avg_plain:.3e}; worst peak offset "
        f"{max(peak_gaps):.0f} cells <= 2; m={art.m} n_m={art.n_m}; {elapsed / 60:.1f} min < 20 min")


@pytest.mark.slow
def test_eim_online_cost_independent_of_grid(acceptance_record):
    arts = []
    for cells in (16, 32):
        opts = PipelineOptions(problem="poisson", pde_cells=cells, ot_factor=2, n_s=30, tau=1e-6, tau_eim=1e-9,
                               max_modes=3, max_basis=8, eim_max_terms=12, eim_samples=60)
        arts.append(offline_train(opts))
    sizes = [(a.m, a.n_m, a.meta["Q"]["K"], a.meta["Q"]["f"]) for a in arts]
    mus = draw_test_parameters("poisson", 10, 3)

    def batch(art, use_eim):
        t = time.perf_counter()
        for mu in mus:
            online_solve_poisson(art, mu, use_eim=use_eim, remap=False)
        return time.perf_counter() - t

    ratios = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FoldedMappingWarning)
        for use_eim in (True, False):
            for a in arts:
                batch(a, use_eim)
            samples = ([], [])
            # alternate the order so drifts in machine load hit both grids alike
            for r in range(21):
                for k in ((0, 1) if r % 2 == 0 else (1, 0)):
                    samples[k].append(batch(arts[k], use_eim))
            ratios[use_eim] = float(np.median(samples[1]) / np.median(samples[0]))
    ok = sizes[0] == sizes[1] and abs(ratios[True] - 1) <= 0.2 and ratios[False] > 1.2
    acceptance_record(
        10, "EIM online cost independent of N", ok,
        f"N {arts[0].space.N} -> {arts[1].space.N} at (m, n_m, Q_K, Q_f)={sizes[0]}: "
        f"EIM time ratio {ratios[True]:.2f} within 1 +- 0.2, full assembly ratio {ratios[False]:.2f} > 1")


def test_soft_convexity_invariant(acceptance_record):
    rng = np.random.default_rng(11)
    worst = np.inf
    for case in range(100):
        dim = 1 + case % 2
        grid = make_uniform_grid(dim, 33 if dim == 1 else 17)
        eps = float(10 ** rng.uniform(-3, -1))
        weights = normalize_density(GridField(grid, rng.uniform(0.0, 1.0, size=grid.shape)))
        if case < 50:
            psi = GridField(grid, rng.normal(scale=0.3, size=grid.shape))
        else:
            sigma = normalize_density(GridField(grid, rng.uniform(0.05, 1.0, size=grid.shape)))
            psi = sinkhorn_solve(weights, sigma, SinkhornConfig(max(eps, 1e-2), tol=1e-6)).psi_rho
        chi = softmin_ctransform(psi, weights, eps).values
        phi = 0.5 * sum(c**2 for c in grid.mesh()) - chi
        scale = max(1.0, float(np.abs(phi).max()))
        for k in range(dim):
            worst = min(worst, float(np.diff(phi, n=2, axis=k).min()) / scale)
    acceptance_record(11, "soft c-transform convexity", worst >= -1e-12,
                      f"min scaled second difference {worst:.2e} >= -1e-12 over 100 cases")
